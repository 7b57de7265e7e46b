//! In-process gradient broker.
//!
//! Each peer owns one single-slot queue. Publishing replaces the slot's
//! message; consuming copies it and leaves it in place. Payloads larger than
//! the message size limit travel through the object store and the queue
//! holds only their UUID. Epoch barriers release once every rank has
//! arrived or retired.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use super::wire::{decode_payload, encode_payload, Encoding, GradientMessage, Payload, HEADER_LEN};
use crate::error::{Error, Result};
use crate::ml::GradientVector;
use crate::store::ObjectStore;

pub const DEFAULT_MESSAGE_LIMIT: usize = 100 * (1 << 20);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrokerConfig {
    pub message_size_limit_bytes: usize,
    pub timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            message_size_limit_bytes: DEFAULT_MESSAGE_LIMIT,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// What a publish put on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Published {
    pub message_bytes: usize,
    /// Size of the object-store blob when the payload was sent by reference.
    pub blob_bytes: usize,
    pub reference: Option<String>,
}

impl Published {
    pub fn total_bytes(&self) -> usize {
        self.message_bytes + self.blob_bytes
    }
}

#[derive(Clone, Debug)]
pub struct Received {
    pub sender: usize,
    pub epoch: u32,
    pub grad: GradientVector,
    pub bytes: usize,
    pub tombstone: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    EpochStart,
    BarrierArrive,
    /// Logged once per epoch, by the arrival that completed the barrier.
    BarrierRelease,
    BarrierExit,
    Retire,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolEvent {
    pub seq: usize,
    pub rank: usize,
    pub epoch: u32,
    pub kind: EventKind,
}

/// Gradient exchange surface used by peers. [`Broker`] is the in-process
/// implementation; a networked transport can implement the same trait.
pub trait GradientExchange: Send + Sync {
    fn publish_gradient(
        &self,
        rank: usize,
        epoch: u32,
        grad: &GradientVector,
        encoding: Encoding,
        seed: u64,
    ) -> Result<Published>;

    /// Reads `target`'s queue without removing the message. With
    /// `min_epoch`, blocks until the held message is at least that epoch;
    /// without it, returns whatever is held (blocking only while empty).
    fn consume_gradient(&self, reader: usize, target: usize, min_epoch: Option<u32>) -> Result<Received>;

    fn barrier_arrive_and_wait(&self, rank: usize, epoch: u32, peers: usize) -> Result<()>;

    /// Marks `rank` as finished: it counts as arrived at every later barrier.
    fn retire(&self, rank: usize) -> Result<()>;

    fn record_epoch_start(&self, _rank: usize, _epoch: u32) {}
}

#[derive(Default)]
struct BarrierSlot {
    arrived: BTreeSet<usize>,
    exited: usize,
    released: bool,
}

#[derive(Default)]
struct State {
    queues: HashMap<usize, Arc<Vec<u8>>>,
    barriers: BTreeMap<u32, BarrierSlot>,
    /// Last barrier epoch each rank passed.
    passed: HashMap<usize, u32>,
    retired: BTreeSet<usize>,
    events: Vec<ProtocolEvent>,
}

impl State {
    fn log(&mut self, rank: usize, epoch: u32, kind: EventKind) {
        let seq = self.events.len();
        self.events.push(ProtocolEvent {
            seq,
            rank,
            epoch,
            kind,
        });
    }

    fn missing(&self, epoch: u32, peers: usize) -> Vec<usize> {
        let arrived = self.barriers.get(&epoch).map(|s| &s.arrived);
        (0..peers)
            .filter(|r| !self.retired.contains(r) && !arrived.is_some_and(|a| a.contains(r)))
            .collect()
    }

    fn try_release(&mut self, epoch: u32, peers: usize, by: usize) -> bool {
        if self.missing(epoch, peers).is_empty() {
            if let Some(slot) = self.barriers.get_mut(&epoch) {
                if !slot.released {
                    slot.released = true;
                    self.log(by, epoch, EventKind::BarrierRelease);
                }
                return true;
            }
        }
        false
    }
}

pub struct Broker {
    peers: usize,
    store: ObjectStore,
    config: BrokerConfig,
    state: Mutex<State>,
    changed: Condvar,
}

impl Broker {
    pub fn new(peers: usize, store: ObjectStore, config: BrokerConfig) -> Result<Self> {
        if peers == 0 {
            return Err(Error::Config("broker needs at least one peer".into()));
        }
        Ok(Self {
            peers,
            store,
            config,
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
        })
    }

    pub fn peers(&self) -> usize {
        self.peers
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.peers {
            return Err(Error::Protocol(format!(
                "rank {rank} outside [0, {})",
                self.peers
            )));
        }
        Ok(())
    }

    /// Number of messages held for `rank` (0 before its first publish, 1 after).
    pub fn queue_len(&self, rank: usize) -> usize {
        usize::from(self.lock().queues.contains_key(&rank))
    }

    /// Raw bytes of the message currently held for `rank`.
    pub fn peek_raw(&self, rank: usize) -> Option<Arc<Vec<u8>>> {
        self.lock().queues.get(&rank).cloned()
    }

    pub fn events(&self) -> Vec<ProtocolEvent> {
        self.lock().events.clone()
    }

    fn resolve(&self, msg: &GradientMessage) -> Result<(Vec<u8>, usize)> {
        match &msg.payload {
            Payload::Inline(b) => Ok((b.clone(), 0)),
            Payload::Reference(key) => {
                let blob = self.store.get(key)?;
                let n = blob.len();
                Ok((blob, n))
            }
        }
    }
}

fn message_epoch(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes[4..8].try_into().expect("header checked on publish"))
}

impl GradientExchange for Broker {
    fn publish_gradient(
        &self,
        rank: usize,
        epoch: u32,
        grad: &GradientVector,
        encoding: Encoding,
        seed: u64,
    ) -> Result<Published> {
        self.check_rank(rank)?;
        let (wire, body) = encode_payload(grad, encoding, seed)?;
        let (payload, blob_bytes, reference) = if HEADER_LEN + body.len() > self.config.message_size_limit_bytes {
            let key = self.store.put(&body)?;
            (Payload::Reference(key.clone()), body.len(), Some(key))
        } else {
            (Payload::Inline(body), 0, None)
        };
        let bytes = GradientMessage {
            sender_rank: rank as u32,
            epoch,
            encoding: wire,
            payload,
        }
        .to_bytes();
        let message_bytes = bytes.len();
        self.lock().queues.insert(rank, Arc::new(bytes));
        self.changed.notify_all();
        Ok(Published {
            message_bytes,
            blob_bytes,
            reference,
        })
    }

    fn consume_gradient(&self, reader: usize, target: usize, min_epoch: Option<u32>) -> Result<Received> {
        self.check_rank(reader)?;
        self.check_rank(target)?;
        if reader == target {
            return Err(Error::Protocol(format!("rank {reader} cannot consume its own queue")));
        }
        let stale = |s: &State| match s.queues.get(&target) {
            Some(m) => min_epoch.is_some_and(|min| message_epoch(m) < min),
            None => true,
        };
        let waiting = |s: &mut State| stale(s) && !s.retired.contains(&target);
        let guard = self.lock();
        let (guard, wait) = self
            .changed
            .wait_timeout_while(guard, self.config.timeout, waiting)
            .unwrap_or_else(|p| p.into_inner());
        if wait.timed_out() {
            let held = guard.queues.get(&target).map(|m| message_epoch(m));
            return Err(Error::Timeout(format!(
                "rank {reader} waiting on queue of rank {target} (want epoch >= {min_epoch:?}, held {held:?})"
            )));
        }
        if stale(&guard) {
            return Err(Error::Protocol(format!(
                "rank {target} retired without a message for epoch {min_epoch:?}"
            )));
        }
        let raw = Arc::clone(guard.queues.get(&target).expect("checked above"));
        drop(guard);

        let msg = GradientMessage::from_bytes(&raw)?;
        let (body, blob_bytes) = self.resolve(&msg)?;
        let values = decode_payload(msg.encoding, &body)?;
        Ok(Received {
            sender: target,
            epoch: msg.epoch,
            grad: GradientVector::new(values, msg.epoch as u64),
            bytes: raw.len() + blob_bytes,
            tombstone: msg.is_tombstone(),
        })
    }

    fn barrier_arrive_and_wait(&self, rank: usize, epoch: u32, peers: usize) -> Result<()> {
        self.check_rank(rank)?;
        if peers != self.peers {
            return Err(Error::Protocol(format!(
                "barrier for {peers} peers on a broker of {}",
                self.peers
            )));
        }
        let mut state = self.lock();
        if state.passed.get(&rank).is_some_and(|&p| epoch <= p) {
            return Err(Error::Protocol(format!(
                "rank {rank} arrived at the barrier for epoch {epoch} after passing it"
            )));
        }
        let slot = state.barriers.entry(epoch).or_default();
        if !slot.arrived.insert(rank) {
            return Err(Error::Protocol(format!(
                "rank {rank} arrived twice at the barrier for epoch {epoch}"
            )));
        }
        state.log(rank, epoch, EventKind::BarrierArrive);
        if state.try_release(epoch, peers, rank) {
            self.changed.notify_all();
        }
        let (mut state, wait) = self
            .changed
            .wait_timeout_while(state, self.config.timeout, |s| {
                !s.barriers.get(&epoch).is_some_and(|slot| slot.released)
            })
            .unwrap_or_else(|p| p.into_inner());
        if wait.timed_out() {
            let missing = state.missing(epoch, peers);
            return Err(Error::Timeout(format!(
                "barrier for epoch {epoch} still missing ranks {missing:?}"
            )));
        }
        state.log(rank, epoch, EventKind::BarrierExit);
        state.passed.insert(rank, epoch);
        // the last waiter out drops the slot
        if let Some(slot) = state.barriers.get_mut(&epoch) {
            slot.exited += 1;
            if slot.exited == slot.arrived.len() {
                state.barriers.remove(&epoch);
            }
        }
        Ok(())
    }

    fn retire(&self, rank: usize) -> Result<()> {
        self.check_rank(rank)?;
        let mut state = self.lock();
        if !state.retired.insert(rank) {
            return Ok(());
        }
        state.log(rank, 0, EventKind::Retire);
        let pending: Vec<u32> = state
            .barriers
            .iter()
            .filter(|(_, s)| !s.released)
            .map(|(&e, _)| e)
            .collect();
        for epoch in pending {
            state.try_release(epoch, self.peers, rank);
        }
        drop(state);
        self.changed.notify_all();
        Ok(())
    }

    fn record_epoch_start(&self, rank: usize, epoch: u32) {
        self.lock().log(rank, epoch, EventKind::EpochStart);
    }
}

/// Checks a sync-mode event log for epoch lockstep: every epoch's barrier
/// released only after all its arrivals, and no rank starting epoch `t + 1`
/// before epoch `t`'s barrier released.
pub fn check_lockstep(events: &[ProtocolEvent], peers: usize) -> std::result::Result<(), String> {
    let mut release_seq: BTreeMap<u32, usize> = BTreeMap::new();
    let mut arrivals: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for e in events {
        match e.kind {
            EventKind::BarrierRelease => {
                if release_seq.insert(e.epoch, e.seq).is_some() {
                    return Err(format!("epoch {} released twice", e.epoch));
                }
            }
            EventKind::BarrierArrive => arrivals.entry(e.epoch).or_default().push(e.seq),
            _ => {}
        }
    }
    for (epoch, seqs) in &arrivals {
        let Some(&rel) = release_seq.get(epoch) else {
            return Err(format!("epoch {epoch} never released"));
        };
        if seqs.len() != peers {
            return Err(format!("epoch {epoch}: {} arrivals for {peers} peers", seqs.len()));
        }
        if seqs.iter().any(|&s| s > rel) {
            return Err(format!("epoch {epoch} released before all peers arrived"));
        }
    }
    for e in events {
        let too_early = |kind: EventKind| {
            e.kind == kind && e.epoch > 0 && release_seq.get(&(e.epoch - 1)).is_none_or(|&rel| e.seq < rel)
        };
        if too_early(EventKind::EpochStart) || too_early(EventKind::BarrierArrive) {
            return Err(format!(
                "rank {} entered epoch {} before epoch {} was released",
                e.rank,
                e.epoch,
                e.epoch - 1
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broker(peers: usize, limit: usize) -> (tempfile::TempDir, Broker) {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let b = Broker::new(
            peers,
            store,
            BrokerConfig {
                message_size_limit_bytes: limit,
                timeout: Duration::from_millis(500),
            },
        )
        .unwrap();
        (dir, b)
    }

    fn g(vals: &[f64]) -> GradientVector {
        GradientVector::new(vals.to_vec(), 0)
    }

    #[test]
    fn publish_replaces() {
        let (_d, b) = broker(2, DEFAULT_MESSAGE_LIMIT);
        assert_eq!(b.queue_len(0), 0);
        b.publish_gradient(0, 0, &g(&[1.0]), Encoding::RawF64, 0).unwrap();
        b.publish_gradient(0, 1, &g(&[2.0]), Encoding::RawF64, 0).unwrap();
        assert_eq!(b.queue_len(0), 1);
        let r = b.consume_gradient(1, 0, None).unwrap();
        assert_eq!(r.grad.values, vec![2.0]);
        assert_eq!(r.epoch, 1);
    }

    #[test]
    fn oversized_payload_goes_by_reference() {
        let (_d, b) = broker(2, 100);
        let grad = g(&(0..60).map(|i| i as f64 / 7.0).collect::<Vec<_>>());
        let p = b.publish_gradient(0, 0, &grad, Encoding::RawF64, 0).unwrap();
        let key = p.reference.clone().expect("forced indirection");
        assert!(b.store().contains(&key));
        assert_eq!(p.message_bytes, HEADER_LEN + 36);
        assert_eq!(p.blob_bytes, 480);
        let r = b.consume_gradient(1, 0, None).unwrap();
        assert_eq!(r.grad.values, grad.values);
        assert_eq!(r.bytes, p.total_bytes());
    }

    #[test]
    fn consume_own_queue_is_rejected() {
        let (_d, b) = broker(2, DEFAULT_MESSAGE_LIMIT);
        assert!(matches!(b.consume_gradient(1, 1, None), Err(Error::Protocol(_))));
        assert!(matches!(b.consume_gradient(0, 5, None), Err(Error::Protocol(_))));
    }

    #[test]
    fn consume_times_out_naming_target() {
        let (_d, b) = broker(3, DEFAULT_MESSAGE_LIMIT);
        match b.consume_gradient(0, 2, Some(0)) {
            Err(Error::Timeout(msg)) => assert!(msg.contains("rank 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_peer_barrier_is_immediate() {
        let (_d, b) = broker(1, DEFAULT_MESSAGE_LIMIT);
        b.barrier_arrive_and_wait(0, 0, 1).unwrap();
        b.barrier_arrive_and_wait(0, 1, 1).unwrap();
    }

    #[test]
    fn duplicate_arrival_is_protocol_error() {
        let (_d, b) = broker(1, DEFAULT_MESSAGE_LIMIT);
        b.barrier_arrive_and_wait(0, 5, 1).unwrap();
        assert!(matches!(b.barrier_arrive_and_wait(0, 5, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn barrier_timeout_lists_missing() {
        let (_d, b) = broker(3, DEFAULT_MESSAGE_LIMIT);
        match b.barrier_arrive_and_wait(1, 0, 3) {
            Err(Error::Timeout(msg)) => assert!(msg.contains("[0, 2]"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn retired_rank_counts_as_arrived() {
        let (_d, b) = broker(2, DEFAULT_MESSAGE_LIMIT);
        std::thread::scope(|s| {
            let h = s.spawn(|| b.barrier_arrive_and_wait(0, 3, 2));
            std::thread::sleep(Duration::from_millis(20));
            b.retire(1).unwrap();
            h.join().unwrap().unwrap();
        });
    }

    #[test]
    fn retired_silent_rank_fails_fast() {
        let (_d, b) = broker(2, DEFAULT_MESSAGE_LIMIT);
        b.retire(1).unwrap();
        let start = std::time::Instant::now();
        assert!(matches!(b.consume_gradient(0, 1, Some(0)), Err(Error::Protocol(_))));
        assert!(start.elapsed() < Duration::from_millis(400));
    }

    #[test]
    fn back_to_back_barriers() {
        let (_d, b) = broker(4, DEFAULT_MESSAGE_LIMIT);
        std::thread::scope(|s| {
            for rank in 0..4 {
                let b = &b;
                s.spawn(move || {
                    for e in 0..50 {
                        b.barrier_arrive_and_wait(rank, e, 4).unwrap();
                    }
                });
            }
        });
        check_lockstep(&b.events(), 4).unwrap();
        assert!(b.lock().barriers.is_empty());
    }
}
