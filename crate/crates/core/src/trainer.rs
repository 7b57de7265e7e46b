//! One peer's training loop.
//!
//! Every epoch a peer computes its local gradient through the executor,
//! publishes it to its own queue, reads every other peer's queue, averages
//! the `P` gradients, updates its model and checks convergence on the shared
//! validation set. In synchronous mode reads wait for the current epoch and
//! an epoch barrier keeps peers in lockstep; in asynchronous mode reads take
//! whatever each queue holds.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comms::{Encoding, GradientExchange, TOMBSTONE_EPOCH};
use crate::dataset::{mix_seed, partition_and_batch, store_batches, SampleSet};
use crate::error::{Error, Result, Stage};
use crate::executor::{build_fanout_plan, encode_model, execute, total_lambda_cost, ExecutorConfig, Hyper};
use crate::metrics::{MetricsRecorder, StageSummary, MEMORY_POLL_INTERVAL};
use crate::ml::{apply_update, average_batch_gradients, evaluate, init_model, Arch, Batch, GradientVector, ModelParams};
use crate::store::ObjectStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    Synchronous,
    Asynchronous,
}

impl SyncMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::Synchronous => "sync",
            SyncMode::Asynchronous => "async",
        }
    }
}

/// Early stopping combined with plateau learning-rate reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePolicy {
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
}

impl Default for ConvergencePolicy {
    fn default() -> Self {
        Self {
            early_stop_patience: 5,
            min_delta: 1e-4,
            plateau_patience: 3,
            plateau_factor: 0.5,
            min_lr: 1e-4,
        }
    }
}

impl ConvergencePolicy {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            bad.push("patience values must be >= 1".to_string());
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            bad.push(format!("min_delta must be >= 0, got {}", self.min_delta));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            bad.push(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if self.min_lr.is_nan() || self.min_lr <= 0.0 {
            bad.push(format!("min_lr must be > 0, got {}", self.min_lr));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Replays `history` through the plateau and early-stop counters and
/// reports the decision and learning rate for its last entry.
///
/// A loss counts as an improvement when it beats the best so far by more
/// than `min_delta`; an improvement resets both counters. The plateau
/// counter also resets each time it fires.
pub fn check_convergence(policy: &ConvergencePolicy, history: &[f64], lr: f64) -> (Decision, f64) {
    let Some((&first, rest)) = history.split_first() else {
        return (Decision::Continue, lr);
    };
    let mut best = first;
    let mut since_improvement = 0;
    let mut plateau = 0;
    let mut fired_last = false;
    for &loss in rest {
        fired_last = false;
        if loss < best - policy.min_delta {
            best = loss;
            since_improvement = 0;
            plateau = 0;
        } else {
            since_improvement += 1;
            plateau += 1;
            if plateau >= policy.plateau_patience {
                plateau = 0;
                fired_last = true;
            }
        }
    }
    let new_lr = if fired_last {
        (lr * policy.plateau_factor).max(policy.min_lr)
    } else {
        lr
    };
    let decision = if since_improvement >= policy.early_stop_patience {
        Decision::Stop
    } else {
        Decision::Continue
    };
    (decision, new_lr)
}

/// Gradients gathered for one epoch, keyed by rank.
#[derive(Clone, Debug, Default)]
pub struct GradientsPeers(BTreeMap<usize, GradientVector>);

impl GradientsPeers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, rank: usize, grad: GradientVector) {
        self.0.insert(rank, grad);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, rank: usize) -> Option<&GradientVector> {
        self.0.get(&rank)
    }
}

/// Unweighted element-wise mean over ranks `0..peers`, summed in rank order.
/// The result carries the newest source version among the inputs.
pub fn average_peer_gradients(gp: &GradientsPeers, peers: usize) -> Result<GradientVector> {
    let missing: Vec<usize> = (0..peers).filter(|r| !gp.0.contains_key(r)).collect();
    if !missing.is_empty() || gp.len() != peers {
        return Err(Error::Protocol(format!(
            "cannot average: missing ranks {missing:?} ({} of {peers} present)",
            gp.len()
        )));
    }
    let len = gp.0.values().next().map_or(0, |g| g.len());
    let mut values = vec![0.0; len];
    for (rank, g) in &gp.0 {
        if g.len() != len {
            return Err(Error::Shape(format!("rank {rank} sent {} values, expected {len}", g.len())));
        }
        for (acc, v) in values.iter_mut().zip(&g.values) {
            *acc += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= peers as f64);
    Ok(GradientVector {
        values,
        source_version: gp.0.values().map(|g| g.source_version).max().unwrap_or(0),
        batch_count: gp.0.values().map(|g| g.batch_count).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerConfig {
    pub rank: usize,
    pub peers: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: SyncMode,
    pub encoding: Encoding,
    pub executor: ExecutorConfig,
    pub convergence: ConvergencePolicy,
    pub arch: Arch,
    /// Shared by all peers: model init, data shuffles and quantization seeds
    /// derive from it.
    pub seed: u64,
}

impl PeerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peers == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("peers, epochs and batch size must be >= 1".into()));
        }
        if self.rank >= self.peers {
            return Err(Error::Config(format!("rank {} outside [0, {})", self.rank, self.peers)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.max_epochs >= TOMBSTONE_EPOCH as usize {
            return Err(Error::Config("too many epochs".into()));
        }
        self.executor.validate()?;
        self.convergence.validate()?;
        self.arch.validate()
    }
}

/// Training data shared read-only by all peers.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: SampleSet,
    pub validation: Vec<Batch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub compute_s: f64,
    pub send_s: f64,
    pub receive_s: f64,
    pub update_s: f64,
    pub convergence_s: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used for this epoch's update.
    pub lr: f64,
    pub bytes_sent: usize,
    pub bytes_received: usize,
    pub batches: usize,
    /// Summed per-invocation billing of this epoch's fan-out.
    pub lambda_billed_usd: f64,
    /// SHA-256 of the model parameters after the update.
    pub model_checksum: String,
    /// Set on the peer's last epoch.
    pub stop_reason: Option<StopReason>,
}

impl EpochTrace {
    pub fn stage_time(&self, stage: Stage) -> f64 {
        match stage {
            Stage::ComputeGradients => self.compute_s,
            Stage::SendGradients => self.send_s,
            Stage::ReceiveGradients => self.receive_s,
            Stage::ModelUpdate => self.update_s,
            Stage::ConvergenceDetection => self.convergence_s,
        }
    }
}

#[derive(Debug)]
pub struct PeerOutcome {
    pub rank: usize,
    pub model: ModelParams,
    pub traces: Vec<EpochTrace>,
    pub stop_reason: StopReason,
    pub stages: Vec<StageSummary>,
}

/// A failed peer: the error names epoch and stage; traces cover the epochs
/// that completed.
#[derive(Debug)]
pub struct PeerAbort {
    pub error: Error,
    pub traces: Vec<EpochTrace>,
}

pub fn model_checksum(model: &ModelParams) -> String {
    let mut h = Sha256::new();
    for v in &model.values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn quantization_seed(seed: u64, rank: usize, epoch: u32) -> u64 {
    mix_seed(&[seed, 5, rank as u64, epoch as u64])
}

struct Peer<'a, X: GradientExchange + ?Sized> {
    config: &'a PeerConfig,
    data: &'a TrainingData,
    exchange: &'a X,
    store: &'a ObjectStore,
    metrics: MetricsRecorder,
}

struct EpochOutput {
    trace: EpochTrace,
    model: ModelParams,
    local: GradientVector,
}

impl<X: GradientExchange + ?Sized> Peer<'_, X> {
    fn stage<T>(&mut self, epoch: usize, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        f(self).map_err(|e| Error::Aborted {
            rank: self.config.rank,
            epoch,
            stage,
            source: Box::new(e),
        })
    }

    fn epoch(&mut self, epoch: usize, model: &ModelParams, lr: f64) -> Result<EpochOutput> {
        let cfg = self.config;
        let rank = cfg.rank;
        let wire_epoch = epoch as u32;
        self.exchange.record_epoch_start(rank, wire_epoch);

        let (local, batches, billed, compute_s) = self.stage(epoch, Stage::ComputeGradients, |p| {
            p.metrics.begin(Stage::ComputeGradients)?;
            let partition = partition_and_batch(&p.data.train, cfg.peers, cfg.batch_size, cfg.seed, epoch as u64)?
                .swap_remove(rank);
            let manifest = store_batches(p.store, &partition)?;
            let model_key = p.store.put(&encode_model(model))?;
            let plan = build_fanout_plan(&manifest, &model_key, Hyper::sgd(lr))?;
            let run = execute(&plan, &cfg.executor, p.store)?;
            let local = average_batch_gradients(&run.grads)?;
            let sample = p.metrics.end_with_busy(Stage::ComputeGradients, Some(run.busy_time_s()))?;
            Ok((local, plan.total_batches, total_lambda_cost(&run.records), sample.wall_s))
        })?;

        let (bytes_sent, send_s) = self.stage(epoch, Stage::SendGradients, |p| {
            p.metrics.begin(Stage::SendGradients)?;
            let seed = quantization_seed(cfg.seed, rank, wire_epoch);
            let sent = p.exchange.publish_gradient(rank, wire_epoch, &local, cfg.encoding, seed)?;
            Ok((sent.total_bytes(), p.metrics.end(Stage::SendGradients)?.wall_s))
        })?;

        let mut gp = GradientsPeers::new();
        gp.insert(rank, local.clone());
        let (bytes_received, receive_s) = self.stage(epoch, Stage::ReceiveGradients, |p| {
            p.metrics.begin(Stage::ReceiveGradients)?;
            let min_epoch = match cfg.mode {
                SyncMode::Synchronous => Some(wire_epoch),
                SyncMode::Asynchronous => None,
            };
            let mut bytes = 0;
            for other in (0..cfg.peers).filter(|&r| r != rank) {
                let got = p.exchange.consume_gradient(rank, other, min_epoch)?;
                if cfg.mode == SyncMode::Synchronous && got.epoch != wire_epoch && !got.tombstone {
                    return Err(Error::Protocol(format!(
                        "rank {other} is at epoch {} during synchronous epoch {epoch}",
                        got.epoch
                    )));
                }
                bytes += got.bytes;
                gp.insert(other, got.grad);
            }
            // nobody publishes epoch t + 1 until everyone has read epoch t
            if cfg.mode == SyncMode::Synchronous {
                p.exchange.barrier_arrive_and_wait(rank, wire_epoch, cfg.peers)?;
            }
            Ok((bytes, p.metrics.end(Stage::ReceiveGradients)?.wall_s))
        })?;

        let (updated, update_s) = self.stage(epoch, Stage::ModelUpdate, |p| {
            p.metrics.begin(Stage::ModelUpdate)?;
            let averaged = average_peer_gradients(&gp, cfg.peers)?;
            // async peers apply whatever gradients they hold, stale or not
            let step = GradientVector {
                source_version: model.version,
                ..averaged
            };
            let next = apply_update(model, &step, lr)?;
            Ok((next, p.metrics.end(Stage::ModelUpdate)?.wall_s))
        })?;

        Ok(EpochOutput {
            trace: EpochTrace {
                epoch,
                compute_s,
                send_s,
                receive_s,
                update_s,
                convergence_s: 0.0,
                val_loss: f64::NAN,
                val_accuracy: f64::NAN,
                lr,
                bytes_sent,
                bytes_received,
                batches,
                lambda_billed_usd: billed,
                model_checksum: model_checksum(&updated),
                stop_reason: None,
            },
            model: updated,
            local,
        })
    }

    fn run(mut self) -> std::result::Result<PeerOutcome, PeerAbort> {
        let cfg = self.config;
        let mut traces = Vec::new();
        let mut last_local: Option<GradientVector> = None;
        let result = (|| -> Result<(ModelParams, StopReason)> {
            let mut model = init_model(&cfg.arch, cfg.seed)?;
            let mut lr = cfg.lr;
            let mut history = Vec::new();
            for epoch in 0..cfg.max_epochs {
                let out = self.epoch(epoch, &model, lr)?;
                let mut trace = out.trace;
                model = out.model;
                last_local = Some(out.local);

                let (decision, next_lr) = self.stage(epoch, Stage::ConvergenceDetection, |p| {
                    p.metrics.begin(Stage::ConvergenceDetection)?;
                    let start = Instant::now();
                    let (loss, acc) = evaluate(&model, &p.data.validation)?;
                    history.push(loss.value);
                    let (decision, next_lr) = check_convergence(&cfg.convergence, &history, lr);
                    trace.val_loss = loss.value;
                    trace.val_accuracy = acc;
                    let sample = p.metrics.end(Stage::ConvergenceDetection)?;
                    trace.convergence_s = sample.wall_s.max(start.elapsed().as_secs_f64());
                    Ok((decision, next_lr))
                })?;
                log::debug!(
                    "rank {} epoch {epoch}: loss {:.6} accuracy {:.4} lr {lr}",
                    cfg.rank,
                    trace.val_loss,
                    trace.val_accuracy
                );
                lr = next_lr;
                let last = decision == Decision::Stop || epoch + 1 == cfg.max_epochs;
                if last {
                    let reason = if decision == Decision::Stop {
                        StopReason::Converged
                    } else {
                        StopReason::MaxEpochs
                    };
                    trace.stop_reason = Some(reason);
                    traces.push(trace);
                    return Ok((model, reason));
                }
                traces.push(trace);
            }
            unreachable!("loop returns on its last epoch")
        })();

        // A finished peer leaves a final message so that peers still
        // training never block on its queue; a failed one leaves its queue
        // as is, and sync readers waiting on it fail. Either way it retires
        // so it never holds up a barrier.
        if let (Ok(_), Some(g)) = (&result, &last_local) {
            let seed = quantization_seed(cfg.seed, cfg.rank, TOMBSTONE_EPOCH);
            let _ = self.exchange.publish_gradient(cfg.rank, TOMBSTONE_EPOCH, g, cfg.encoding, seed);
        }
        let _ = self.exchange.retire(cfg.rank);

        match result {
            Ok((model, stop_reason)) => match self.metrics.summarize() {
                Ok(stages) => Ok(PeerOutcome {
                    rank: cfg.rank,
                    model,
                    traces,
                    stop_reason,
                    stages,
                }),
                Err(error) => Err(PeerAbort { error, traces }),
            },
            Err(error) => Err(PeerAbort { error, traces }),
        }
    }
}

/// Runs one peer to convergence or `max_epochs`.
pub fn run_peer<X: GradientExchange + ?Sized>(
    config: &PeerConfig,
    data: &TrainingData,
    exchange: &X,
    store: &ObjectStore,
) -> std::result::Result<PeerOutcome, PeerAbort> {
    if let Err(error) = config.validate() {
        return Err(PeerAbort {
            error,
            traces: Vec::new(),
        });
    }
    Peer {
        config,
        data,
        exchange,
        store,
        metrics: MetricsRecorder::with_memory_polling(MEMORY_POLL_INTERVAL),
    }
    .run()
}
