use std::fs;
use std::path::Path;

use p2pfaas::comms::{Broker, BrokerConfig, Encoding, GradientExchange, Published, Received};
use p2pfaas::config::{parse_pairs, RunConfig};
use p2pfaas::experiment::{prepare, run_experiment};
use p2pfaas::ml::GradientVector;
use p2pfaas::store::ObjectStore;
use p2pfaas::trainer::{run_peer, PeerConfig, StopReason, SyncMode};
use p2pfaas::{Error, Stage};

fn config(out: &Path, extra: &str) -> RunConfig {
    let base = format!(
        "seed = 5\npeers = 3\nbatch_size = 32\nepochs = 6\nlr = 0.2\ndataset.samples = 600\n\
         executor.invocation_overhead_ms = 0\nconvergence.enabled = false\nbroker.timeout_s = 20\nout = {}\n",
        out.display()
    );
    let mut pairs = parse_pairs(&base).unwrap();
    pairs.extend(parse_pairs(extra).unwrap());
    RunConfig::from_pairs(&pairs).unwrap()
}

fn deterministic_columns(trace: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(trace).unwrap();
    let headers = r.headers().unwrap().clone();
    let keep: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !h.ends_with("_s"))
        .map(|(i, _)| i)
        .collect();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            keep.iter().map(|&i| rec[i].to_string()).collect::<Vec<_>>().join(",")
        })
        .collect()
}

#[test]
fn reruns_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&config(&dir.path().join("a"), "")).unwrap();
    let b = run_experiment(&config(&dir.path().join("b"), "")).unwrap();
    assert_eq!(a.run_id, b.run_id);
    assert_eq!(a.final_checksum(), b.final_checksum());
    assert_eq!(
        deterministic_columns(&dir.path().join("a/trace.csv")),
        deterministic_columns(&dir.path().join("b/trace.csv"))
    );
    let c = run_experiment(&config(&dir.path().join("c"), "seed = 6")).unwrap();
    assert_ne!(a.final_checksum(), c.final_checksum());
}

#[test]
fn run_directory_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&config(dir.path(), "")).unwrap();
    for f in ["config.cfg", "trace.csv", "cost.csv", "stages.csv", "summary.txt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(!dir.path().join(".store").exists());
    assert_eq!(deterministic_columns(&dir.path().join("trace.csv")).len(), 3 * 6);
    let cost_rows = csv::Reader::from_path(dir.path().join("cost.csv")).unwrap().records().count();
    assert_eq!(cost_rows, 3);
    let stage_rows = csv::Reader::from_path(dir.path().join("stages.csv")).unwrap().records().count();
    assert_eq!(stage_rows, 3 * 5);
    assert!(run.outcomes.iter().all(|o| o.stages.iter().all(|s| s.samples == 6)));
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains(&format!("final_model_checksum = {}", run.final_checksum())));
    assert!(summary.contains("models_identical = true"));
    // the snapshot is itself a valid config describing the same run
    let again = RunConfig::load(&dir.path().join("config.cfg")).unwrap();
    assert_eq!(again, config(dir.path(), ""));
}

#[test]
fn sync_peers_stop_together() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&config(
        dir.path(),
        "epochs = 200\nconvergence.enabled = true\nconvergence.early_stop_patience = 3\nconvergence.min_delta = 0.001",
    ))
    .unwrap();
    let epochs: Vec<usize> = run.outcomes.iter().map(|o| o.traces.len()).collect();
    assert!(epochs.iter().all(|&e| e == epochs[0] && e < 200), "{epochs:?}");
    assert!(run.outcomes.iter().all(|o| o.stop_reason == StopReason::Converged));
    assert!(run.models_identical());
    let lrs: Vec<f64> = run.outcomes[0].traces.iter().map(|t| t.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn async_qsgd_mlp_learns() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&config(
        dir.path(),
        "mode = async\nencoding = qsgd:8\nmodel = mlp:8\nepochs = 25\nlr = 0.3\nbroker.message_limit_bytes = 64",
    ))
    .unwrap();
    assert!(run.final_accuracy() > 0.9, "{}", run.final_accuracy());
    // over the limit, so the count includes the referenced blob
    let sent = run.outcomes[0].traces[0].bytes_sent;
    assert!(sent > 64);
}

#[test]
fn csv_dataset_trains() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let mut text = String::from("x,label,y\n");
    for i in 0..400 {
        let c = i % 2;
        let s = if c == 0 { 1.0 } else { -1.0 };
        text.push_str(&format!("{},{c},{}\n", s * 2.0 + (i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()));
    }
    fs::write(&path, text).unwrap();
    let cfg = config(
        &dir.path().join("run"),
        &format!(
            "dataset.kind = csv\ndataset.path = {}\ndataset.preprocessing = standardize\nepochs = 15",
            path.display()
        ),
    );
    let (data, arch, _) = prepare(&cfg).unwrap();
    assert_eq!(data.train.dim, 2);
    assert_eq!(arch.param_count(), 6);
    let run = run_experiment(&cfg).unwrap();
    assert!(run.final_accuracy() > 0.95);
}

/// Delegates to a broker but fails one publish.
struct FailingExchange {
    inner: Broker,
    fail_rank: usize,
    fail_epoch: u32,
}

impl GradientExchange for FailingExchange {
    fn publish_gradient(&self, rank: usize, epoch: u32, grad: &GradientVector, encoding: Encoding, seed: u64) -> p2pfaas::Result<Published> {
        if rank == self.fail_rank && epoch == self.fail_epoch {
            return Err(Error::Store("disk full".into()));
        }
        self.inner.publish_gradient(rank, epoch, grad, encoding, seed)
    }

    fn consume_gradient(&self, reader: usize, target: usize, min_epoch: Option<u32>) -> p2pfaas::Result<Received> {
        self.inner.consume_gradient(reader, target, min_epoch)
    }

    fn barrier_arrive_and_wait(&self, rank: usize, epoch: u32, peers: usize) -> p2pfaas::Result<()> {
        self.inner.barrier_arrive_and_wait(rank, epoch, peers)
    }

    fn retire(&self, rank: usize) -> p2pfaas::Result<()> {
        self.inner.retire(rank)
    }
}

#[test]
fn failure_names_rank_epoch_and_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("run"), "peers = 2");
    let (data, arch, executor) = prepare(&cfg).unwrap();
    let store = ObjectStore::open(dir.path().join("store")).unwrap();
    let exchange = FailingExchange {
        inner: Broker::new(
            2,
            store.clone(),
            BrokerConfig {
                timeout: std::time::Duration::from_secs(5),
                ..Default::default()
            },
        )
        .unwrap(),
        fail_rank: 1,
        fail_epoch: 2,
    };
    let peer = |rank| PeerConfig {
        rank,
        peers: 2,
        max_epochs: 6,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        mode: SyncMode::Synchronous,
        encoding: Encoding::RawF64,
        executor: executor.clone(),
        convergence: cfg.policy(),
        arch: arch.clone(),
        seed: cfg.seed,
    };
    let (p0, p1) = (peer(0), peer(1));
    let (r0, r1) = std::thread::scope(|s| {
        let h0 = s.spawn(|| run_peer(&p0, &data, &exchange, &store));
        let h1 = s.spawn(|| run_peer(&p1, &data, &exchange, &store));
        (h0.join().unwrap(), h1.join().unwrap())
    });
    let abort = r1.unwrap_err();
    match &abort.error {
        Error::Aborted { rank, epoch, stage, source } => {
            assert_eq!((*rank, *epoch, *stage), (1, 2, Stage::SendGradients));
            assert!(matches!(**source, Error::Store(_)));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(abort.traces.len(), 2);
    // the surviving peer sees the failure instead of hanging: the failed
    // peer's last message is its epoch-1 gradient, then it retires
    let other = r0.unwrap_err();
    assert!(matches!(&other.error, Error::Aborted { rank: 0, epoch: 2, stage: Stage::ReceiveGradients, .. }), "{:?}", other.error);
}
