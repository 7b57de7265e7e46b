//! Gradient exchange: broker queues, barriers, wire format and QSGD.

pub mod broker;
pub mod qsgd;
pub mod wire;

pub use broker::{
    check_lockstep, Broker, BrokerConfig, EventKind, GradientExchange, ProtocolEvent, Published, Received,
};
pub use qsgd::{qsgd_decode, qsgd_encode, QuantizedGradient};
pub use wire::{Encoding, GradientMessage, Payload, WireEncoding, TOMBSTONE_EPOCH};
