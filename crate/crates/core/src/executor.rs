//! Per-batch gradient executors.
//!
//! A fan-out plan holds one branch per stored batch. The instance executor
//! runs branches one after another on the peer itself; the serverless
//! executor dispatches them to a bounded pool of simulated function
//! invocations, each paying a startup overhead and billed per second.
//!
//! Branch compute time is modeled: a branch lasts at least
//! `simulated_speed_factor * rows * params * 1 ns`, padded with sleep after the
//! real gradient kernel finishes. Sleeping, not spinning, because the
//! modeled work runs on remote hardware.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::load_batch;
use crate::error::{Error, Result};
use crate::ml::{compute_batch_gradient, Arch, GradientVector, ModelParams};
use crate::store::ObjectStore;

/// Nominal cost of one sample-parameter multiply-accumulate, in seconds.
pub const NOMINAL_SECONDS_PER_SAMPLE_PARAM: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutorMode {
    InstanceSequential,
    ServerlessParallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub mode: ExecutorMode,
    pub max_concurrency: usize,
    pub invocation_overhead_ms: f64,
    pub lambda_memory_mb: u32,
    pub lambda_rate_usd_per_s: f64,
    pub instance_rate_usd_per_s: f64,
    pub simulated_speed_factor: f64,
    /// Extra attempts per failed branch.
    pub retries: u32,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            mode: ExecutorMode::ServerlessParallel,
            max_concurrency: 1000,
            invocation_overhead_ms: 50.0,
            lambda_memory_mb: 4400,
            lambda_rate_usd_per_s: 0.0000573,
            instance_rate_usd_per_s: 0.00000639,
            simulated_speed_factor: 1.0,
            retries: 0,
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.max_concurrency == 0 {
            bad.push("max_concurrency must be >= 1");
        }
        if !(self.invocation_overhead_ms >= 0.0 && self.invocation_overhead_ms.is_finite()) {
            bad.push("invocation_overhead_ms must be finite and >= 0");
        }
        if !(self.lambda_rate_usd_per_s >= 0.0 && self.instance_rate_usd_per_s >= 0.0) {
            bad.push("rates must be >= 0");
        }
        if !(self.simulated_speed_factor > 0.0 && self.simulated_speed_factor.is_finite()) {
            bad.push("simulated_speed_factor must be > 0");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn effective_concurrency(&self) -> usize {
        match self.mode {
            ExecutorMode::InstanceSequential => 1,
            ExecutorMode::ServerlessParallel => self.max_concurrency.max(1),
        }
    }

    /// Modeled compute seconds for one batch.
    pub fn simulated_compute_s(&self, rows: usize, params: usize) -> f64 {
        self.simulated_speed_factor * (rows * params) as f64 * NOMINAL_SECONDS_PER_SAMPLE_PARAM
    }

    /// Speed factor that makes a `rows`-row batch on `arch` take `target_s`.
    pub fn speed_factor_for(target_s: f64, rows: usize, arch: &Arch) -> f64 {
        target_s / ((rows * arch.param_count()) as f64 * NOMINAL_SECONDS_PER_SAMPLE_PARAM)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvocationRecord {
    pub batch_id: usize,
    /// Seconds since the fan-out started.
    pub start_s: f64,
    pub duration_s: f64,
    pub memory_mb: u32,
    pub billed_cost_usd: f64,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub loss: String,
    pub optimizer: String,
}

impl Hyper {
    pub fn sgd(lr: f64) -> Self {
        Self {
            lr,
            loss: "cross-entropy".into(),
            optimizer: "sgd".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub batch_id: usize,
    pub batch_key: String,
}

/// Input of one dynamic fan-out: a branch per batch plus the shared model
/// reference and hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoutPlan {
    pub total_batches: usize,
    pub model_ref: String,
    pub hyper: Hyper,
    pub branches: Vec<Branch>,
}

impl FanoutPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let plan: FanoutPlan =
            serde_json::from_str(json).map_err(|e| Error::Plan(format!("invalid plan document: {e}")))?;
        let manifest: Vec<_> = plan
            .branches
            .iter()
            .map(|b| (b.batch_id, b.batch_key.clone()))
            .collect();
        let rebuilt = build_fanout_plan(&manifest, &plan.model_ref, plan.hyper.clone())?;
        if rebuilt.total_batches != plan.total_batches {
            return Err(Error::Plan(format!(
                "plan claims {} batches but lists {}",
                plan.total_batches, rebuilt.total_batches
            )));
        }
        Ok(rebuilt)
    }
}

pub fn build_fanout_plan(manifest: &[(usize, String)], model_key: &str, hyper: Hyper) -> Result<FanoutPlan> {
    if manifest.is_empty() {
        return Err(Error::Plan("empty batch manifest".into()));
    }
    let mut seen = BTreeSet::new();
    for (id, _) in manifest {
        if !seen.insert(*id) {
            return Err(Error::Plan(format!("batch {id} listed twice")));
        }
    }
    let m = manifest.len();
    if seen.iter().next_back() != Some(&(m - 1)) {
        return Err(Error::Plan(format!("batch ids are not dense in 0..{m}")));
    }
    let mut branches: Vec<Branch> = manifest
        .iter()
        .map(|(id, key)| Branch {
            batch_id: *id,
            batch_key: key.clone(),
        })
        .collect();
    branches.sort_by_key(|b| b.batch_id);
    Ok(FanoutPlan {
        total_batches: m,
        model_ref: model_key.to_string(),
        hyper,
        branches,
    })
}

/// Model blob: `arch_len u64 | arch JSON | version u64 | count u64 | f64 values`.
pub fn encode_model(model: &ModelParams) -> Vec<u8> {
    let arch = serde_json::to_vec(&model.arch).expect("arch serializes");
    let mut out = Vec::with_capacity(24 + arch.len() + model.values.len() * 8);
    out.extend_from_slice(&(arch.len() as u64).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&model.version.to_le_bytes());
    out.extend_from_slice(&(model.values.len() as u64).to_le_bytes());
    for v in &model.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Decode(format!("{what}: truncated")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().expect("8 bytes")))
}

fn take_f64s(bytes: &mut &[u8], n: usize, what: &str) -> Result<Vec<f64>> {
    let len = n
        .checked_mul(8)
        .ok_or_else(|| Error::Decode(format!("{what}: length overflows")))?;
    Ok(take(bytes, len, what)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn decode_model(mut bytes: &[u8]) -> Result<ModelParams> {
    let b = &mut bytes;
    let arch_len = take_u64(b, "model")? as usize;
    let arch: Arch = serde_json::from_slice(take(b, arch_len, "model")?)
        .map_err(|e| Error::Decode(format!("model architecture: {e}")))?;
    let version = take_u64(b, "model")?;
    let n = take_u64(b, "model")? as usize;
    let values = take_f64s(b, n, "model")?;
    if !b.is_empty() {
        return Err(Error::Decode("model blob has trailing bytes".into()));
    }
    ModelParams::new(arch, values, version).map_err(|e| Error::Decode(e.to_string()))
}

/// Gradient blob: `source_version u64 | batch_count u64 | count u64 | f64 values`.
pub fn encode_gradient(g: &GradientVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + g.len() * 8);
    out.extend_from_slice(&g.source_version.to_le_bytes());
    out.extend_from_slice(&(g.batch_count as u64).to_le_bytes());
    out.extend_from_slice(&(g.len() as u64).to_le_bytes());
    for v in &g.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_gradient(mut bytes: &[u8]) -> Result<GradientVector> {
    let b = &mut bytes;
    let source_version = take_u64(b, "gradient")?;
    let batch_count = take_u64(b, "gradient")? as usize;
    let n = take_u64(b, "gradient")? as usize;
    let values = take_f64s(b, n, "gradient")?;
    if !b.is_empty() {
        return Err(Error::Decode("gradient blob has trailing bytes".into()));
    }
    Ok(GradientVector {
        values,
        source_version,
        batch_count,
    })
}

/// Result of one fan-out.
#[derive(Clone, Debug)]
pub struct Execution {
    /// Ordered by batch id.
    pub grads: Vec<GradientVector>,
    pub records: Vec<InvocationRecord>,
    pub wall_time_s: f64,
    /// Highest number of branches observed running at once.
    pub peak_in_flight: usize,
}

impl Execution {
    /// Sum of branch durations; busy worker time for the CPU proxy.
    pub fn busy_time_s(&self) -> f64 {
        self.records.iter().map(|r| r.duration_s).sum()
    }
}

struct BranchRunner<'a> {
    plan: &'a FanoutPlan,
    config: &'a ExecutorConfig,
    store: &'a ObjectStore,
    t0: Instant,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl BranchRunner<'_> {
    fn attempt(&self, branch: &Branch) -> Result<String> {
        if self.config.mode == ExecutorMode::ServerlessParallel && self.config.invocation_overhead_ms > 0.0 {
            thread::sleep(Duration::from_secs_f64(self.config.invocation_overhead_ms / 1000.0));
        }
        let compute_start = Instant::now();
        let model = decode_model(&self.store.get(&self.plan.model_ref)?)?;
        let batch = load_batch(self.store, &branch.batch_key)?;
        if batch.batch_id != branch.batch_id {
            return Err(Error::Decode(format!(
                "key for batch {} holds batch {}",
                branch.batch_id, batch.batch_id
            )));
        }
        let grad = compute_batch_gradient(&model, &batch)?;
        let target = self.config.simulated_compute_s(batch.rows, model.values.len());
        let spent = compute_start.elapsed().as_secs_f64();
        if target > spent {
            thread::sleep(Duration::from_secs_f64(target - spent));
        }
        self.store.put(&encode_gradient(&grad))
    }

    fn run(&self, branch: &Branch) -> (Result<String>, InvocationRecord) {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let start = self.t0.elapsed().as_secs_f64();
        let mut result = self.attempt(branch);
        for _ in 0..self.config.retries {
            if result.is_ok() {
                break;
            }
            result = self.attempt(branch);
        }
        let duration_s = self.t0.elapsed().as_secs_f64() - start;
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        let billed_cost_usd = match self.config.mode {
            ExecutorMode::ServerlessParallel => duration_s * self.config.lambda_rate_usd_per_s,
            ExecutorMode::InstanceSequential => 0.0,
        };
        let record = InvocationRecord {
            batch_id: branch.batch_id,
            start_s: start,
            duration_s,
            memory_mb: self.config.lambda_memory_mb,
            billed_cost_usd,
            outcome: match &result {
                Ok(_) => Outcome::Ok,
                Err(e) => Outcome::Failed(e.to_string()),
            },
        };
        (result, record)
    }
}

/// Runs every branch of `plan` and returns gradients ordered by batch id.
/// Any failed branch fails the whole fan-out.
/// Stored gradient key, or the failure, with the invocation record.
type BranchOutcome = (Result<String>, InvocationRecord);

pub fn execute(plan: &FanoutPlan, config: &ExecutorConfig, store: &ObjectStore) -> Result<Execution> {
    config.validate()?;
    for key in std::iter::once(&plan.model_ref).chain(plan.branches.iter().map(|b| &b.batch_key)) {
        if !store.contains(key) {
            return Err(Error::NotFound(format!("plan references missing key {key}")));
        }
    }
    let m = plan.branches.len();
    let ctx = BranchRunner {
        plan,
        config,
        store,
        t0: Instant::now(),
        in_flight: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    };
    let slots: Vec<Mutex<Option<BranchOutcome>>> = (0..m).map(|_| Mutex::new(None)).collect();
    let workers = config.effective_concurrency().min(m);
    if workers <= 1 {
        for (i, branch) in plan.branches.iter().enumerate() {
            *slots[i].lock().expect("slot") = Some(ctx.run(branch));
        }
    } else {
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= m {
                        break;
                    }
                    let out = ctx.run(&plan.branches[i]);
                    *slots[i].lock().expect("slot") = Some(out);
                });
            }
        });
    }
    let wall_time_s = ctx.t0.elapsed().as_secs_f64();

    let mut keys = Vec::with_capacity(m);
    let mut records = Vec::with_capacity(m);
    let mut failed = Vec::new();
    let mut first_reason = None;
    for slot in slots {
        let (result, record) = slot.into_inner().expect("slot").expect("every branch ran");
        match result {
            Ok(key) => keys.push(key),
            Err(e) => {
                failed.push(record.batch_id);
                first_reason.get_or_insert_with(|| e.to_string());
            }
        }
        records.push(record);
    }
    if !failed.is_empty() {
        return Err(Error::Fanout {
            failed,
            reason: first_reason.unwrap_or_default(),
        });
    }
    let grads = keys
        .iter()
        .map(|k| decode_gradient(&store.get(k)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Execution {
        grads,
        records,
        wall_time_s,
        peak_in_flight: ctx.peak.load(Ordering::SeqCst),
    })
}

pub fn total_lambda_cost(records: &[InvocationRecord]) -> f64 {
    records.iter().map(|r| r.billed_cost_usd).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode_batch, partition_and_batch, store_batches, SampleSet};
    use crate::ml::init_model;

    fn record(duration_s: f64, rate: f64) -> InvocationRecord {
        InvocationRecord {
            batch_id: 0,
            start_s: 0.0,
            duration_s,
            memory_mb: 128,
            billed_cost_usd: duration_s * rate,
            outcome: Outcome::Ok,
        }
    }

    fn setup(n: usize, b: usize) -> (tempfile::TempDir, ObjectStore, FanoutPlan) {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let data = SampleSet {
            dim: 3,
            features: (0..n * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect(),
            labels: (0..n).map(|i| (i % 2) as u32).collect(),
        };
        let part = partition_and_batch(&data, 1, b, 5, 0).unwrap().remove(0);
        let manifest = store_batches(&store, &part).unwrap();
        let model = init_model(&Arch::mlp(&[3, 4, 2]), 2).unwrap();
        let model_key = store.put(&encode_model(&model)).unwrap();
        let plan = build_fanout_plan(&manifest, &model_key, Hyper::sgd(0.1)).unwrap();
        (dir, store, plan)
    }

    fn quick(mode: ExecutorMode) -> ExecutorConfig {
        ExecutorConfig {
            mode,
            max_concurrency: 8,
            invocation_overhead_ms: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn plan_cardinality() {
        let manifest: Vec<_> = (0..15).map(|i| (i, uuid::Uuid::new_v4().to_string())).collect();
        let plan = build_fanout_plan(&manifest, "m", Hyper::sgd(0.1)).unwrap();
        assert_eq!(plan.branches.len(), 15);
        let one = build_fanout_plan(&manifest[..1], "m", Hyper::sgd(0.1)).unwrap();
        assert_eq!(one.total_batches, 1);
    }

    #[test]
    fn plan_rejects_bad_manifests() {
        let dup = vec![(0, "a".to_string()), (0, "b".to_string())];
        assert!(matches!(build_fanout_plan(&dup, "m", Hyper::sgd(0.1)), Err(Error::Plan(_))));
        let gap = vec![(0, "a".to_string()), (2, "b".to_string())];
        assert!(matches!(build_fanout_plan(&gap, "m", Hyper::sgd(0.1)), Err(Error::Plan(_))));
        assert!(matches!(build_fanout_plan(&[], "m", Hyper::sgd(0.1)), Err(Error::Plan(_))));
    }

    #[test]
    fn plan_json_round_trip() {
        let (_d, _s, plan) = setup(30, 7);
        let json = plan.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["branches"].as_array().unwrap().len(), 5);
        assert_eq!(FanoutPlan::from_json(&json).unwrap(), plan);
    }

    #[test]
    fn modes_agree_bitwise() {
        let (_d, store, plan) = setup(40, 6);
        let a = execute(&plan, &quick(ExecutorMode::InstanceSequential), &store).unwrap();
        let b = execute(&plan, &quick(ExecutorMode::ServerlessParallel), &store).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.grads.len(), 7);
        assert!(a.records.iter().all(|r| r.billed_cost_usd == 0.0));
        for r in &b.records {
            assert!((r.billed_cost_usd - r.duration_s * 0.0000573).abs() < 1e-12);
        }
        assert_eq!(a.peak_in_flight, 1);
    }

    #[test]
    fn concurrency_is_bounded() {
        let (_d, store, plan) = setup(60, 4);
        let cfg = ExecutorConfig {
            max_concurrency: 3,
            simulated_speed_factor: ExecutorConfig::speed_factor_for(0.005, 4, &Arch::mlp(&[3, 4, 2])),
            ..quick(ExecutorMode::ServerlessParallel)
        };
        let run = execute(&plan, &cfg, &store).unwrap();
        assert!(run.peak_in_flight <= 3 && run.peak_in_flight >= 2, "{}", run.peak_in_flight);
    }

    #[test]
    fn missing_key_is_not_found() {
        let (_d, store, mut plan) = setup(20, 5);
        plan.branches[1].batch_key = uuid::Uuid::new_v4().to_string();
        assert!(matches!(
            execute(&plan, &quick(ExecutorMode::ServerlessParallel), &store),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn branch_failure_aborts_fanout() {
        let (_d, store, mut plan) = setup(20, 5);
        let mut blob = encode_batch(&crate::dataset::load_batch(&store, &plan.branches[2].batch_key).unwrap());
        blob.pop();
        plan.branches[2].batch_key = store.put(&blob).unwrap();
        match execute(&plan, &quick(ExecutorMode::ServerlessParallel), &store) {
            Err(Error::Fanout { failed, .. }) => assert_eq!(failed, vec![2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lambda_cost_sums() {
        let recs: Vec<_> = (0..15).map(|_| record(41.2, 0.0000573)).collect();
        assert!((total_lambda_cost(&recs) - 0.03541).abs() < 1e-5);
        assert_eq!(total_lambda_cost(&[]), 0.0);
        assert!((total_lambda_cost(&[record(2.0, 0.00001)]) - 0.00002).abs() < 1e-15);
    }

    #[test]
    fn blob_codecs() {
        let model = init_model(&Arch::mlp(&[2, 3, 2]), 1).unwrap();
        assert_eq!(decode_model(&encode_model(&model)).unwrap(), model);
        let g = GradientVector {
            values: vec![1.0, -0.5],
            source_version: 4,
            batch_count: 3,
        };
        let blob = encode_gradient(&g);
        assert_eq!(decode_gradient(&blob).unwrap(), g);
        assert!(matches!(decode_gradient(&blob[..blob.len() - 1]), Err(Error::Decode(_))));
    }
}
