//! Runs a configured experiment: `P` peer threads against one broker and
//! object store, then writes the run directory.
//!
//! A run directory holds `config.cfg` (the effective configuration),
//! `trace.csv` (one row per peer per epoch), `cost.csv` (one row per peer),
//! `stages.csv` (per-peer stage summaries) and `summary.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::comms::{Broker, ProtocolEvent};
use crate::config::RunConfig;
use crate::cost::{instance_report, serverless_report, CostInputs, CostReport};
use crate::dataset::generate;
use crate::error::{Error, Result, Stage};
use crate::executor::{ExecutorConfig, ExecutorMode};
use crate::ml::Arch;
use crate::store::ObjectStore;
use crate::trainer::{model_checksum, run_peer, EpochTrace, PeerAbort, PeerConfig, PeerOutcome, TrainingData};

const VALIDATION_BATCH: usize = 1024;
const STORE_DIR: &str = ".store";

/// Stable identifier of a configuration: identical configs (output
/// directory aside) share it.
pub fn run_id(config: &RunConfig) -> String {
    let mut h = Sha256::new();
    for line in config.snapshot().lines().filter(|l| !l.starts_with("out ")) {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..6])
}

#[derive(Debug)]
pub struct RunReport {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub arch: Arch,
    pub executor: ExecutorConfig,
    pub outcomes: Vec<PeerOutcome>,
    pub costs: Vec<CostReport>,
    pub events: Vec<ProtocolEvent>,
}

impl RunReport {
    pub fn final_checksum(&self) -> String {
        model_checksum(&self.outcomes[0].model)
    }

    pub fn models_identical(&self) -> bool {
        self.outcomes.iter().all(|o| o.model.values == self.outcomes[0].model.values)
    }

    /// Mean over peers of the per-epoch mean of `f`.
    pub fn mean_per_epoch(&self, f: impl Fn(&EpochTrace) -> f64) -> f64 {
        let per_peer: Vec<f64> = self
            .outcomes
            .iter()
            .map(|o| o.traces.iter().map(&f).sum::<f64>() / o.traces.len() as f64)
            .collect();
        per_peer.iter().sum::<f64>() / per_peer.len() as f64
    }

    pub fn final_accuracy(&self) -> f64 {
        let accs: Vec<f64> = self.outcomes.iter().filter_map(|o| o.traces.last()).map(|t| t.val_accuracy).collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    }

    pub fn mean_cost(&self) -> f64 {
        self.costs.iter().map(|c| c.cost_per_peer_usd).sum::<f64>() / self.costs.len() as f64
    }
}

/// Loads the data and resolves the model and executor settings.
pub fn prepare(config: &RunConfig) -> Result<(TrainingData, Arch, ExecutorConfig)> {
    config.validate()?;
    let data = generate(&config.dataset)?;
    let classes = data.train.num_classes().max(data.validation.num_classes());
    let arch = config.model.arch(data.train.dim, classes);
    arch.validate()?;
    let mut executor = config.executor.clone();
    if let Some(ms) = config.batch_compute_ms {
        executor.simulated_speed_factor = ExecutorConfig::speed_factor_for(ms / 1000.0, config.batch_size, &arch);
    }
    let train_len = data.train.len();
    if train_len < config.peers * config.batch_size {
        return Err(Error::Config(format!(
            "{train_len} training samples cannot give each of {} peers a batch of {}",
            config.peers, config.batch_size
        )));
    }
    let validation = data.validation.to_batches(VALIDATION_BATCH);
    if validation.is_empty() {
        return Err(Error::Config("validation split is empty; use more samples".into()));
    }
    Ok((
        TrainingData {
            train: data.train,
            validation,
        },
        arch,
        executor,
    ))
}

fn cost_for(config: &RunConfig, executor: &ExecutorConfig, outcome: &PeerOutcome) -> Result<CostReport> {
    let inputs = CostInputs {
        num_batches: outcome.traces.first().map_or(0, |t| t.batches),
        lambda_rate_usd_per_s: executor.lambda_rate_usd_per_s,
        ec2_rate_usd_per_s: executor.instance_rate_usd_per_s,
        computation_time_s: outcome.traces.iter().map(|t| t.compute_s).sum(),
        lambda_memory_mb: executor.lambda_memory_mb,
        batch_size: config.batch_size,
    };
    match executor.mode {
        ExecutorMode::ServerlessParallel => {
            let billed = outcome.traces.iter().map(|t| t.lambda_billed_usd).sum();
            serverless_report(inputs, Some(billed))
        }
        ExecutorMode::InstanceSequential => instance_report(inputs),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Serialize)]
struct TraceRow<'a> {
    run_id: &'a str,
    rank: usize,
    epoch: usize,
    compute_gradients_s: f64,
    send_gradients_s: f64,
    receive_gradients_s: f64,
    model_update_s: f64,
    convergence_detection_s: f64,
    loss: f64,
    accuracy: f64,
    lr: f64,
    bytes_sent: usize,
    bytes_received: usize,
    stop_reason: &'a str,
    model_checksum: &'a str,
}

fn write_trace(path: &Path, run_id: &str, peers: &[(usize, &[EpochTrace])]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (rank, traces) in peers {
        for t in *traces {
            w.serialize(TraceRow {
                run_id,
                rank: *rank,
                epoch: t.epoch,
                compute_gradients_s: t.compute_s,
                send_gradients_s: t.send_s,
                receive_gradients_s: t.receive_s,
                model_update_s: t.update_s,
                convergence_detection_s: t.convergence_s,
                loss: t.val_loss,
                accuracy: t.val_accuracy,
                lr: t.lr,
                bytes_sent: t.bytes_sent,
                bytes_received: t.bytes_received,
                stop_reason: t.stop_reason.map_or("", |r| r.as_str()),
                model_checksum: &t.model_checksum,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CostRow<'a> {
    run_id: &'a str,
    rank: usize,
    architecture: &'a str,
    batch_size: usize,
    num_batches: usize,
    computation_time_s: f64,
    lambda_rate_usd_per_s: f64,
    ec2_rate_usd_per_s: f64,
    lambda_memory_mb: u32,
    cost_per_peer_usd: f64,
    measured_lambda_billing_usd: Option<f64>,
}

fn write_costs(path: &Path, run_id: &str, costs: &[(usize, &CostReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if costs.is_empty() {
        w.write_record([
            "run_id",
            "rank",
            "architecture",
            "batch_size",
            "num_batches",
            "computation_time_s",
            "lambda_rate_usd_per_s",
            "ec2_rate_usd_per_s",
            "lambda_memory_mb",
            "cost_per_peer_usd",
            "measured_lambda_billing_usd",
        ])
        .map_err(csv_err)?;
    }
    for (rank, c) in costs {
        let i = &c.inputs;
        w.serialize(CostRow {
            run_id,
            rank: *rank,
            architecture: c.architecture.as_str(),
            batch_size: i.batch_size,
            num_batches: i.num_batches,
            computation_time_s: i.computation_time_s,
            lambda_rate_usd_per_s: i.lambda_rate_usd_per_s,
            ec2_rate_usd_per_s: i.ec2_rate_usd_per_s,
            lambda_memory_mb: i.lambda_memory_mb,
            cost_per_peer_usd: c.cost_per_peer_usd,
            measured_lambda_billing_usd: c.measured_lambda_billing_usd,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_stages(path: &Path, run_id: &str, outcomes: &[PeerOutcome]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "run_id",
        "rank",
        "stage",
        "samples",
        "mean_time_s",
        "peak_memory_bytes",
        "mean_cpu_proxy",
    ])
    .map_err(csv_err)?;
    for o in outcomes {
        for s in &o.stages {
            w.write_record([
                run_id.to_string(),
                o.rank.to_string(),
                s.stage.to_string(),
                s.samples.to_string(),
                s.mean_time_s.to_string(),
                s.peak_memory_bytes.to_string(),
                s.mean_cpu_proxy.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn summary_text(report: &RunReport, config: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run_id = {}", report.run_id);
    let _ = writeln!(s, "status = ok");
    let _ = writeln!(s, "peers = {}", config.peers);
    let _ = writeln!(s, "mode = {}", config.mode.as_str());
    let _ = writeln!(s, "encoding = {}", config.encoding);
    let _ = writeln!(s, "parameters = {}", report.arch.param_count());
    for o in &report.outcomes {
        let last = o.traces.last().expect("a finished peer ran an epoch");
        let _ = writeln!(
            s,
            "rank {}: epochs = {}, stop = {}, loss = {:.6}, accuracy = {:.4}, cost_usd = {:.6}",
            o.rank,
            o.traces.len(),
            o.stop_reason.as_str(),
            last.val_loss,
            last.val_accuracy,
            report.costs[o.rank].cost_per_peer_usd,
        );
    }
    let _ = writeln!(s, "final_model_checksum = {}", report.final_checksum());
    let _ = writeln!(s, "models_identical = {}", report.models_identical());
    let _ = writeln!(s, "mean_compute_s_per_epoch = {:.6}", report.mean_per_epoch(|t| t.compute_s));
    let _ = writeln!(
        s,
        "mean_comm_s_per_epoch = {:.6}",
        report.mean_per_epoch(|t| t.send_s + t.receive_s)
    );
    let _ = writeln!(s, "mean_cost_per_peer_usd = {:.6}", report.mean_cost());
    for stage in Stage::ALL {
        let mean = report.mean_per_epoch(|t| t.stage_time(stage));
        let _ = writeln!(s, "stage {stage}: mean_s = {mean:.6}");
    }
    s
}

/// Runs the experiment and writes its run directory under `config.out`.
pub fn run_experiment(config: &RunConfig) -> Result<RunReport> {
    let (data, arch, executor) = prepare(config)?;
    let id = run_id(config);
    let out = config.out.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.cfg"), config.snapshot())?;
    log::info!("run {id}: {} peers, {} parameters, out {}", config.peers, arch.param_count(), out.display());

    let store_dir = out.join(STORE_DIR);
    let store = ObjectStore::open(&store_dir)?;
    let broker = Broker::new(config.peers, store.clone(), config.broker.clone())?;

    let peer_configs: Vec<PeerConfig> = (0..config.peers)
        .map(|rank| PeerConfig {
            rank,
            peers: config.peers,
            max_epochs: config.epochs,
            batch_size: config.batch_size,
            lr: config.lr,
            mode: config.mode,
            encoding: config.encoding,
            executor: executor.clone(),
            convergence: config.policy(),
            arch: arch.clone(),
            seed: config.seed,
        })
        .collect();
    let results: Vec<std::result::Result<PeerOutcome, PeerAbort>> = std::thread::scope(|s| {
        let handles: Vec<_> = peer_configs
            .iter()
            .map(|pc| {
                let (data, broker, store) = (&data, &broker, &store);
                std::thread::Builder::new()
                    .name(format!("peer-{}", pc.rank))
                    .spawn_scoped(s, move || run_peer(pc, data, broker, store))
                    .expect("spawn peer thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| panic!("peer thread panicked")))
            .collect()
    });
    let _ = fs::remove_dir_all(&store_dir);

    let trace_path = out.join("trace.csv");
    if results.iter().any(|r| r.is_err()) {
        return Err(abort(config, &id, &out, results));
    }
    let outcomes: Vec<PeerOutcome> = results.into_iter().map(|r| r.expect("checked above")).collect();
    let costs = outcomes
        .iter()
        .map(|o| cost_for(config, &executor, o))
        .collect::<Result<Vec<_>>>()?;

    let traces: Vec<(usize, &[EpochTrace])> = outcomes.iter().map(|o| (o.rank, o.traces.as_slice())).collect();
    write_trace(&trace_path, &id, &traces)?;
    let cost_rows: Vec<(usize, &CostReport)> = costs.iter().enumerate().collect();
    write_costs(&out.join("cost.csv"), &id, &cost_rows)?;
    write_stages(&out.join("stages.csv"), &id, &outcomes)?;

    let report = RunReport {
        run_id: id,
        out_dir: out.clone(),
        arch,
        executor,
        outcomes,
        costs,
        events: broker.events(),
    };
    fs::write(out.join("summary.txt"), summary_text(&report, config))?;
    Ok(report)
}

/// Writes what the failed run produced and picks the error to report.
/// A peer's own failure wins over the timeouts it causes in others.
fn abort(config: &RunConfig, id: &str, out: &Path, results: Vec<std::result::Result<PeerOutcome, PeerAbort>>) -> Error {
    let mut traces = Vec::new();
    let mut errors = Vec::new();
    for (rank, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => traces.push((rank, o.traces)),
            Err(a) => {
                traces.push((rank, a.traces));
                errors.push(a.error);
            }
        }
    }
    let refs: Vec<(usize, &[EpochTrace])> = traces.iter().map(|(r, t)| (*r, t.as_slice())).collect();
    let _ = write_trace(&out.join("trace.csv"), id, &refs);
    let _ = write_costs(&out.join("cost.csv"), id, &[]);
    let _ = write_stages(&out.join("stages.csv"), id, &[]);

    let is_knock_on = |e: &Error| {
        let inner = match e {
            Error::Aborted { source, .. } => source.as_ref(),
            other => other,
        };
        matches!(inner, Error::Timeout(_) | Error::Protocol(_))
    };
    let idx = errors.iter().position(|e| !is_knock_on(e)).unwrap_or(0);
    let error = errors.swap_remove(idx);
    let mut s = String::new();
    let _ = writeln!(s, "run_id = {id}");
    let _ = writeln!(s, "status = aborted");
    let _ = writeln!(s, "peers = {}", config.peers);
    let _ = writeln!(s, "error = {error}");
    for e in &errors {
        let _ = writeln!(s, "also = {e}");
    }
    let _ = fs::write(out.join("summary.txt"), s);
    error
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    BatchSize,
    Peers,
    Encoding,
    Mode,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Peers => "peers",
            SweepAxis::Encoding => "encoding",
            SweepAxis::Mode => "mode",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(SweepAxis::BatchSize),
            "peers" => Ok(SweepAxis::Peers),
            "encoding" => Ok(SweepAxis::Encoding),
            "mode" => Ok(SweepAxis::Mode),
            _ => Err(Error::Validation(format!(
                "axis: {s:?}: expected batch_size, peers, encoding or mode"
            ))),
        }
    }
}

/// One sweep point; times are per peer per epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub compute_time: f64,
    pub comm_time: f64,
    pub cost: f64,
    pub accuracy: f64,
    pub bytes: f64,
    pub epochs: f64,
}

fn dir_name(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Runs one experiment per value and writes `sweep.csv` plus one loss
/// curve per value into `out`.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[String], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Validation("values: at least one value required".into()));
    }
    // validate every point before running any
    let configs = values
        .iter()
        .map(|v| {
            let name = format!("{}_{}", axis.key(), dir_name(v));
            base.with_override(axis.key(), v)?
                .with_override("out", &out.join(&name).display().to_string())
                .map(|c| (v.clone(), name, c))
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (value, name, config) in configs {
        log::info!("sweep {} = {value}", axis.key());
        let report = run_experiment(&config)?;
        let mut curve = csv_writer(&out.join(format!("loss_{name}.csv")))?;
        curve.write_record(["epoch", "loss", "accuracy"]).map_err(csv_err)?;
        let epochs = report.outcomes.iter().map(|o| o.traces.len()).max().unwrap_or(0);
        for e in 0..epochs {
            let at: Vec<&EpochTrace> = report.outcomes.iter().filter_map(|o| o.traces.get(e)).collect();
            let n = at.len() as f64;
            curve
                .write_record([
                    e.to_string(),
                    (at.iter().map(|t| t.val_loss).sum::<f64>() / n).to_string(),
                    (at.iter().map(|t| t.val_accuracy).sum::<f64>() / n).to_string(),
                ])
                .map_err(csv_err)?;
        }
        curve.flush()?;
        rows.push(SweepRow {
            value,
            compute_time: report.mean_per_epoch(|t| t.compute_s),
            comm_time: report.mean_per_epoch(|t| t.send_s + t.receive_s),
            cost: report.mean_cost(),
            accuracy: report.final_accuracy(),
            bytes: report.mean_per_epoch(|t| (t.bytes_sent + t.bytes_received) as f64),
            epochs: report.outcomes.iter().map(|o| o.traces.len() as f64).sum::<f64>() / report.outcomes.len() as f64,
        });
    }
    let mut w = csv_writer(&out.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}
