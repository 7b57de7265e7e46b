//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to the default listed in [`KEYS`]. Unknown keys,
//! unparsable values and invalid combinations are all reported together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::comms::{BrokerConfig, Encoding};
use crate::dataset::{DatasetKind, DatasetSpec, Preprocessing};
use crate::error::{Error, Result};
use crate::executor::{ExecutorConfig, ExecutorMode};
use crate::ml::Arch;
use crate::trainer::{ConvergencePolicy, SyncMode};

/// Recognized keys with their defaults.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("peers", "4"),
    ("batch_size", "64"),
    ("epochs", "30"),
    ("lr", "0.1"),
    ("mode", "sync"),
    ("encoding", "raw"),
    ("model", "logistic"),
    ("out", "runs/default"),
    ("dataset.kind", "blobs"),
    ("dataset.classes", "2"),
    ("dataset.features", "2"),
    ("dataset.samples", "2000"),
    ("dataset.separation", "3.0"),
    ("dataset.path", ""),
    ("dataset.label_column", "label"),
    ("dataset.preprocessing", "none"),
    ("executor.mode", "serverless"),
    ("executor.max_concurrency", "1000"),
    ("executor.invocation_overhead_ms", "50"),
    ("executor.lambda_memory_mb", "4400"),
    ("executor.lambda_rate_usd_per_s", "0.0000573"),
    ("executor.instance_rate_usd_per_s", "0.00000639"),
    ("executor.speed_factor", "1.0"),
    ("executor.batch_compute_ms", ""),
    ("executor.retries", "0"),
    ("convergence.enabled", "true"),
    ("convergence.early_stop_patience", "5"),
    ("convergence.min_delta", "0.0001"),
    ("convergence.plateau_patience", "3"),
    ("convergence.plateau_factor", "0.5"),
    ("convergence.min_lr", "0.0001"),
    ("broker.message_limit_bytes", "104857600"),
    ("broker.timeout_s", "60"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Logistic,
    /// Hidden-layer widths.
    Mlp(Vec<usize>),
}

impl ModelSpec {
    pub fn arch(&self, features: usize, classes: usize) -> Arch {
        match self {
            ModelSpec::Logistic => Arch::logistic(features, classes),
            ModelSpec::Mlp(hidden) => {
                let mut widths = vec![features];
                widths.extend(hidden);
                widths.push(classes);
                Arch::mlp(&widths)
            }
        }
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelSpec::Logistic => f.write_str("logistic"),
            ModelSpec::Mlp(h) => {
                let h: Vec<String> = h.iter().map(|w| w.to_string()).collect();
                write!(f, "mlp:{}", h.join(","))
            }
        }
    }
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "logistic" {
            return Ok(ModelSpec::Logistic);
        }
        let hidden = s.strip_prefix("mlp:").ok_or("expected logistic or mlp:W1,W2,...")?;
        let widths = hidden
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| format!("width {w:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if widths.contains(&0) {
            return Err("hidden widths must be >= 1".into());
        }
        Ok(ModelSpec::Mlp(widths))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub peers: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub mode: SyncMode,
    pub encoding: Encoding,
    pub model: ModelSpec,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub executor: ExecutorConfig,
    /// When set, overrides `executor.simulated_speed_factor` so that a
    /// full batch takes this many milliseconds.
    pub batch_compute_ms: Option<f64>,
    pub convergence_enabled: bool,
    pub convergence: ConvergencePolicy,
    pub broker: BrokerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(&BTreeMap::new()).expect("defaults are valid")
    }
}

fn mode_str(mode: ExecutorMode) -> &'static str {
    match mode {
        ExecutorMode::ServerlessParallel => "serverless",
        ExecutorMode::InstanceSequential => "instance",
    }
}

fn preprocessing_str(p: Preprocessing) -> &'static str {
    match p {
        Preprocessing::None => "none",
        Preprocessing::MinMax => "min-max",
        Preprocessing::Standardize => "standardize",
    }
}

struct Reader<'a> {
    pairs: &'a BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.pairs.get(key).map(String::as_str).unwrap_or_else(|| {
            KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).expect("known key")
        })
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key).trim().to_string();
        match raw.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key}: {raw:?}: {e}"));
                None
            }
        }
    }

    fn with<T>(&mut self, key: &str, f: impl FnOnce(&str) -> std::result::Result<T, String>) -> Option<T> {
        let raw = self.raw(key).trim().to_string();
        match f(&raw) {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key}: {raw:?}: {e}"));
                None
            }
        }
    }

    fn check(&mut self, ok: bool, key: &str, msg: &str) {
        if !ok {
            self.errors.push(format!("{key}: {msg}"));
        }
    }
}

/// Splits the text into key/value pairs. Duplicate keys and lines without
/// `=` are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {}: expected key = value", i + 1));
            continue;
        };
        let k = k.trim().to_string();
        if pairs.insert(k.clone(), v.trim().to_string()).is_some() {
            errors.push(format!("{k}: duplicate key (line {})", i + 1));
        }
    }
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(Error::Validation(errors.join("\n")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut r = Reader {
            pairs,
            errors: Vec::new(),
        };
        for k in pairs.keys() {
            if !KEYS.iter().any(|(known, _)| known == k) {
                r.errors.push(format!("{k}: unknown key"));
            }
        }

        let seed = r.get("seed");
        let peers: Option<usize> = r.get("peers");
        let batch_size: Option<usize> = r.get("batch_size");
        let epochs: Option<usize> = r.get("epochs");
        let lr: Option<f64> = r.get("lr");
        let mode = r.with("mode", |s| match s {
            "sync" => Ok(SyncMode::Synchronous),
            "async" => Ok(SyncMode::Asynchronous),
            _ => Err("expected sync or async".into()),
        });
        let encoding: Option<Encoding> = r.with("encoding", |s| s.parse().map_err(|e: Error| e.to_string()));
        let model: Option<ModelSpec> = r.get("model");
        let out: Option<PathBuf> = r.get("out");

        let preprocessing = r.with("dataset.preprocessing", |s| match s {
            "none" => Ok(Preprocessing::None),
            "min-max" | "minmax" => Ok(Preprocessing::MinMax),
            "standardize" => Ok(Preprocessing::Standardize),
            _ => Err("expected none, min-max or standardize".into()),
        });
        let kind = match r.raw("dataset.kind").trim() {
            "blobs" => {
                let classes = r.get("dataset.classes");
                let features = r.get("dataset.features");
                let samples = r.get("dataset.samples");
                let separation = r.get("dataset.separation");
                match (classes, features, samples, separation) {
                    (Some(classes), Some(features), Some(samples), Some(separation)) => {
                        Some(DatasetKind::SyntheticBlobs {
                            classes,
                            features,
                            samples,
                            separation,
                        })
                    }
                    _ => None,
                }
            }
            "csv" => {
                let path: String = r.raw("dataset.path").trim().to_string();
                r.check(!path.is_empty(), "dataset.path", "required when dataset.kind = csv");
                Some(DatasetKind::Csv {
                    path: PathBuf::from(path),
                    label_column: r.raw("dataset.label_column").trim().to_string(),
                })
            }
            other => {
                r.errors.push(format!("dataset.kind: {other:?}: expected blobs or csv"));
                None
            }
        };

        let exec_mode = r.with("executor.mode", |s| match s {
            "serverless" => Ok(ExecutorMode::ServerlessParallel),
            "instance" => Ok(ExecutorMode::InstanceSequential),
            _ => Err("expected serverless or instance".into()),
        });
        let max_concurrency = r.get("executor.max_concurrency");
        let invocation_overhead_ms = r.get("executor.invocation_overhead_ms");
        let lambda_memory_mb = r.get("executor.lambda_memory_mb");
        let lambda_rate = r.get("executor.lambda_rate_usd_per_s");
        let instance_rate = r.get("executor.instance_rate_usd_per_s");
        let speed_factor = r.get("executor.speed_factor");
        let batch_compute_ms = r.with("executor.batch_compute_ms", |s| {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| e.to_string())
            }
        });
        let retries = r.get("executor.retries");

        let convergence_enabled = r.get("convergence.enabled");
        let early = r.get("convergence.early_stop_patience");
        let min_delta = r.get("convergence.min_delta");
        let plateau = r.get("convergence.plateau_patience");
        let factor = r.get("convergence.plateau_factor");
        let min_lr = r.get("convergence.min_lr");

        let limit = r.get("broker.message_limit_bytes");
        let timeout_s: Option<f64> = r.get("broker.timeout_s");

        if let Some(p) = peers {
            r.check(p >= 1, "peers", "must be >= 1");
        }
        if let Some(b) = batch_size {
            r.check(b >= 1, "batch_size", "must be >= 1");
        }
        if let Some(e) = epochs {
            r.check(e >= 1, "epochs", "must be >= 1");
        }
        if let Some(lr) = lr {
            r.check(lr > 0.0 && lr.is_finite(), "lr", "must be finite and > 0");
        }
        if let Some(t) = timeout_s {
            r.check(t > 0.0 && t.is_finite(), "broker.timeout_s", "must be finite and > 0");
        }
        if let Some(l) = limit {
            r.check(l >= 1, "broker.message_limit_bytes", "must be >= 1");
        }
        if let Some(Some(ms)) = batch_compute_ms {
            r.check(ms >= 0.0 && ms.is_finite(), "executor.batch_compute_ms", "must be finite and >= 0");
        }
        if let Some(DatasetKind::SyntheticBlobs {
            classes,
            features,
            samples,
            ..
        }) = kind
        {
            r.check(classes >= 2, "dataset.classes", "must be >= 2");
            r.check(features >= 1, "dataset.features", "must be >= 1");
            if let (Some(p), Some(b)) = (peers, batch_size) {
                let train = samples - (samples as f64 * crate::dataset::VALIDATION_FRACTION).floor() as usize;
                r.check(
                    train >= p * b,
                    "dataset.samples",
                    &format!("{train} training samples cannot give each of {p} peers a batch of {b}"),
                );
            }
        }

        if !r.errors.is_empty() {
            return Err(Error::Validation(r.errors.join("\n")));
        }
        fn u<T>(o: Option<T>) -> T {
            o.expect("checked above")
        }
        let config = RunConfig {
            seed: u(seed),
            peers: u(peers),
            batch_size: u(batch_size),
            epochs: u(epochs),
            lr: u(lr),
            mode: u(mode),
            encoding: u(encoding),
            model: u(model),
            out: u(out),
            dataset: DatasetSpec {
                kind: u(kind),
                preprocessing: u(preprocessing),
                seed: u(seed),
            },
            executor: ExecutorConfig {
                mode: u(exec_mode),
                max_concurrency: u(max_concurrency),
                invocation_overhead_ms: u(invocation_overhead_ms),
                lambda_memory_mb: u(lambda_memory_mb),
                lambda_rate_usd_per_s: u(lambda_rate),
                instance_rate_usd_per_s: u(instance_rate),
                simulated_speed_factor: u(speed_factor),
                retries: u(retries),
            },
            batch_compute_ms: u(batch_compute_ms),
            convergence_enabled: u(convergence_enabled),
            convergence: ConvergencePolicy {
                early_stop_patience: u(early),
                min_delta: u(min_delta),
                plateau_patience: u(plateau),
                plateau_factor: u(factor),
                min_lr: u(min_lr),
            },
            broker: BrokerConfig {
                message_size_limit_bytes: u(limit),
                timeout: Duration::from_secs_f64(u(timeout_s)),
            },
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks that span several keys or belong to other modules.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.peers == 0 {
            errors.push("peers: must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errors.push("batch_size: must be >= 1".to_string());
        }
        if self.epochs == 0 {
            errors.push("epochs: must be >= 1".to_string());
        }
        if let Err(e) = self.executor.validate() {
            errors.push(format!("executor: {e}"));
        }
        if let Err(e) = self.convergence.validate() {
            errors.push(format!("convergence: {e}"));
        }
        if let Encoding::Qsgd { levels: 0 } = self.encoding {
            errors.push("encoding: qsgd needs at least one level".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors.join("\n")))
        }
    }

    pub fn policy(&self) -> ConvergencePolicy {
        if self.convergence_enabled {
            self.convergence.clone()
        } else {
            ConvergencePolicy {
                early_stop_patience: usize::MAX,
                plateau_patience: usize::MAX,
                ..self.convergence.clone()
            }
        }
    }

    /// Every key with its effective value, in the order of [`KEYS`].
    pub fn snapshot(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("peers", self.peers.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("lr", self.lr.to_string());
        m.insert("mode", self.mode.as_str().to_string());
        m.insert("encoding", self.encoding.to_string());
        m.insert("model", self.model.to_string());
        m.insert("out", self.out.display().to_string());
        m.insert("dataset.preprocessing", preprocessing_str(self.dataset.preprocessing).into());
        match &self.dataset.kind {
            DatasetKind::SyntheticBlobs {
                classes,
                features,
                samples,
                separation,
            } => {
                m.insert("dataset.kind", "blobs".into());
                m.insert("dataset.classes", classes.to_string());
                m.insert("dataset.features", features.to_string());
                m.insert("dataset.samples", samples.to_string());
                m.insert("dataset.separation", separation.to_string());
            }
            DatasetKind::Csv { path, label_column } => {
                m.insert("dataset.kind", "csv".into());
                m.insert("dataset.path", path.display().to_string());
                m.insert("dataset.label_column", label_column.clone());
            }
        }
        let e = &self.executor;
        m.insert("executor.mode", mode_str(e.mode).into());
        m.insert("executor.max_concurrency", e.max_concurrency.to_string());
        m.insert("executor.invocation_overhead_ms", e.invocation_overhead_ms.to_string());
        m.insert("executor.lambda_memory_mb", e.lambda_memory_mb.to_string());
        m.insert("executor.lambda_rate_usd_per_s", e.lambda_rate_usd_per_s.to_string());
        m.insert("executor.instance_rate_usd_per_s", e.instance_rate_usd_per_s.to_string());
        m.insert("executor.speed_factor", e.simulated_speed_factor.to_string());
        if let Some(ms) = self.batch_compute_ms {
            m.insert("executor.batch_compute_ms", ms.to_string());
        }
        m.insert("executor.retries", e.retries.to_string());
        let c = &self.convergence;
        m.insert("convergence.enabled", self.convergence_enabled.to_string());
        m.insert("convergence.early_stop_patience", c.early_stop_patience.to_string());
        m.insert("convergence.min_delta", c.min_delta.to_string());
        m.insert("convergence.plateau_patience", c.plateau_patience.to_string());
        m.insert("convergence.plateau_factor", c.plateau_factor.to_string());
        m.insert("convergence.min_lr", c.min_lr.to_string());
        m.insert("broker.message_limit_bytes", self.broker.message_size_limit_bytes.to_string());
        m.insert("broker.timeout_s", self.broker.timeout.as_secs_f64().to_string());

        let mut s = String::new();
        for (k, _) in KEYS {
            if let Some(v) = m.get(k) {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    /// Applies a single `key = value` override, revalidating everything.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut pairs = parse_pairs(&self.snapshot())?;
        pairs.insert(key.to_string(), value.to_string());
        Self::from_pairs(&pairs)
    }
}
