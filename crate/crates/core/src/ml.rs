//! Models, cross-entropy loss, batch gradients and the SGD update.
//!
//! Parameters are stored flat. Each dense layer contributes its weight matrix
//! (row-major, `out x in`) followed by its bias vector, layers in order. A
//! logistic-regression model is the single-layer case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    LogisticRegression { features: usize, classes: usize },
    Mlp { layers: Vec<usize>, activation: Activation },
}

impl Arch {
    pub fn logistic(features: usize, classes: usize) -> Self {
        Arch::LogisticRegression { features, classes }
    }

    pub fn mlp(layers: &[usize]) -> Self {
        Arch::Mlp {
            layers: layers.to_vec(),
            activation: Activation::Tanh,
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        match self {
            Arch::LogisticRegression { features, classes } => vec![*features, *classes],
            Arch::Mlp { layers, .. } => layers.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs at least an input and an output layer, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!(
                "architecture has a zero-width layer: {widths:?}"
            )));
        }
        if self.num_classes() < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {}",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths()[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths().last().expect("non-empty widths")
    }

    /// `(fan_in, fan_out)` for every dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.widths().windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }
}

/// Trainable parameters plus the epoch counter of the last update.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub values: Vec<f64>,
    pub version: u64,
}

impl ModelParams {
    pub fn new(arch: Arch, values: Vec<f64>, version: u64) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameter values for an architecture with {} parameters",
                values.len(),
                arch.param_count()
            )));
        }
        ensure_finite(&values, "model parameters")?;
        Ok(Self {
            arch,
            values,
            version,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub source_version: u64,
    pub batch_count: usize,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, source_version: u64) -> Self {
        Self {
            values,
            source_version,
            batch_count: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A block of samples: `rows x dim` features (row-major) and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_id: usize,
    pub rows: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn new(batch_id: usize, dim: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let rows = labels.len();
        if features.len() != rows * dim {
            return Err(Error::Shape(format!(
                "batch {batch_id}: {} feature values for {rows} rows of width {dim}",
                features.len()
            )));
        }
        Ok(Self {
            batch_id,
            rows,
            dim,
            features,
            labels,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub sample_count: usize,
}

/// Draws every layer's weights and biases from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_model(arch: &Arch, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layer_dims() {
        let r = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out + fan_out {
            values.push(rng.random_range(-r..r));
        }
    }
    Ok(ModelParams {
        arch: arch.clone(),
        values,
        version: 0,
    })
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}

fn check_batch(model: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.dim != model.arch.input_dim() {
        return Err(Error::Shape(format!(
            "batch {} has {} features, model expects {}",
            batch.batch_id,
            batch.dim,
            model.arch.input_dim()
        )));
    }
    if model.values.len() != model.arch.param_count() {
        return Err(Error::Shape(format!(
            "model holds {} values, architecture needs {}",
            model.values.len(),
            model.arch.param_count()
        )));
    }
    let k = model.arch.num_classes() as u32;
    if let Some(bad) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!(
            "batch {} has label {bad} outside [0, {k})",
            batch.batch_id
        )));
    }
    Ok(())
}

/// Forward pass for one sample. Returns the post-activation output of every
/// layer (the input first, softmax probabilities last).
fn forward(dims: &[(usize, usize)], params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(dims.len() + 1);
    acts.push(x.to_vec());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let weights = &params[offset..offset + fan_in * fan_out];
        let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let input = acts.last().expect("input pushed");
        let mut z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + bias[o]
            })
            .collect();
        if l + 1 == dims.len() {
            softmax_in_place(&mut z);
        } else {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    acts
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Log-probability of class `y` computed from logits; more accurate than
/// `ln(softmax)` when the probability underflows.
fn log_prob(dims: &[(usize, usize)], params: &[f64], x: &[f64], y: usize) -> f64 {
    let (fan_in, fan_out) = *dims.last().expect("at least one layer");
    let acts = forward(dims, params, x);
    let hidden = &acts[acts.len() - 2];
    let offset = params.len() - (fan_in * fan_out + fan_out);
    let weights = &params[offset..offset + fan_in * fan_out];
    let bias = &params[offset + fan_in * fan_out..];
    let logits: Vec<f64> = (0..fan_out)
        .map(|o| {
            weights[o * fan_in..(o + 1) * fan_in]
                .iter()
                .zip(hidden)
                .map(|(w, a)| w * a)
                .sum::<f64>()
                + bias[o]
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

/// Mean cross-entropy of `model` over one batch.
pub fn batch_loss(model: &ModelParams, batch: &Batch) -> Result<f64> {
    check_batch(model, batch)?;
    let dims = model.arch.layer_dims();
    let total: f64 = (0..batch.rows)
        .map(|i| -log_prob(&dims, &model.values, batch.row(i), batch.labels[i] as usize))
        .sum();
    Ok(total / batch.rows.max(1) as f64)
}

/// Gradient of the mean cross-entropy over `batch` with respect to `model.values`.
pub fn compute_batch_gradient(model: &ModelParams, batch: &Batch) -> Result<GradientVector> {
    check_batch(model, batch)?;
    if batch.rows == 0 {
        return Err(Error::Precondition(format!(
            "batch {} is empty",
            batch.batch_id
        )));
    }
    ensure_finite(&model.values, "model parameters")?;

    let dims = model.arch.layer_dims();
    let params = &model.values;
    let mut offsets = Vec::with_capacity(dims.len());
    let mut acc = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(acc);
        acc += fan_in * fan_out + fan_out;
    }

    let mut grad = vec![0.0; params.len()];
    for i in 0..batch.rows {
        let acts = forward(&dims, params, batch.row(i));
        // dL/dz for the softmax layer is p - onehot(y).
        let mut delta = acts.last().expect("output layer").clone();
        delta[batch.labels[i] as usize] -= 1.0;

        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let input = &acts[l];
            let off = offsets[l];
            for o in 0..fan_out {
                let d = delta[o];
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let weights = &params[off..off + fan_in * fan_out];
                delta = (0..fan_in)
                    .map(|j| {
                        let back: f64 = (0..fan_out).map(|o| weights[o * fan_in + j] * delta[o]).sum();
                        back * (1.0 - input[j] * input[j])
                    })
                    .collect();
            }
        }
    }
    let n = batch.rows as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    ensure_finite(&grad, "gradient")?;
    Ok(GradientVector::new(grad, model.version))
}

/// Element-wise mean of batch gradients computed against the same model version.
pub fn average_batch_gradients(grads: &[GradientVector]) -> Result<GradientVector> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Precondition("no gradients to average".into()))?;
    let len = first.len();
    for g in grads {
        if g.len() != len {
            return Err(Error::Shape(format!(
                "gradient lengths differ: {} vs {len}",
                g.len()
            )));
        }
        if g.source_version != first.source_version {
            return Err(Error::Staleness(format!(
                "mixed source versions {} and {}",
                first.source_version, g.source_version
            )));
        }
    }
    let n = grads.len() as f64;
    let mut values = vec![0.0; len];
    for g in grads {
        for (acc, v) in values.iter_mut().zip(&g.values) {
            *acc += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= n);
    Ok(GradientVector {
        values,
        source_version: first.source_version,
        batch_count: grads.iter().map(|g| g.batch_count).sum(),
    })
}

/// One descent step: `values - lr * grad`.
pub fn apply_update(model: &ModelParams, grad: &GradientVector, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Precondition(format!("learning rate must be positive, got {lr}")));
    }
    if grad.len() != model.values.len() {
        return Err(Error::Shape(format!(
            "gradient has {} values, model has {}",
            grad.len(),
            model.values.len()
        )));
    }
    if grad.source_version != model.version {
        return Err(Error::Staleness(format!(
            "gradient computed at version {}, model is at version {}",
            grad.source_version, model.version
        )));
    }
    let values: Vec<f64> = model
        .values
        .iter()
        .zip(&grad.values)
        .map(|(w, g)| w - lr * g)
        .collect();
    ensure_finite(&values, "updated parameters")?;
    Ok(ModelParams {
        arch: model.arch.clone(),
        values,
        version: model.version + 1,
    })
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and top-1 accuracy over every sample in `dataset`.
pub fn evaluate(model: &ModelParams, dataset: &[Batch]) -> Result<(LossValue, f64)> {
    let samples: usize = dataset.iter().map(|b| b.rows).sum();
    if samples == 0 {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let dims = model.arch.layer_dims();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for batch in dataset {
        check_batch(model, batch)?;
        for i in 0..batch.rows {
            let x = batch.row(i);
            let y = batch.labels[i] as usize;
            loss -= log_prob(&dims, &model.values, x, y);
            let probs = forward(&dims, &model.values, x);
            if argmax(probs.last().expect("output layer")) == y {
                correct += 1;
            }
        }
    }
    Ok((
        LossValue {
            value: loss / samples as f64,
            sample_count: samples,
        },
        correct as f64 / samples as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: &[f64], y: u32) -> Batch {
        Batch::new(0, x.len(), x.to_vec(), vec![y]).unwrap()
    }

    fn random_batch(rows: usize, dim: usize, classes: u32, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(0, dim, features, labels).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let arch = Arch::logistic(4, 2);
        let a = init_model(&arch, 7).unwrap();
        let b = init_model(&arch, 7).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.version, 0);
    }

    #[test]
    fn mlp_parameter_count() {
        let m = init_model(&Arch::mlp(&[4, 8, 2]), 3).unwrap();
        assert_eq!(m.values.len(), 58);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = init_model(&Arch::mlp(&[16, 4, 3]), 11).unwrap();
        let (first, rest) = m.values.split_at(16 * 4 + 4);
        assert!(first.iter().all(|v| v.abs() < 0.25));
        assert!(rest.iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn init_weight_mean_is_centered() {
        let arch = Arch::logistic(1, 2);
        let mean: f64 = (0..1000u64)
            .map(|s| init_model(&arch, s).unwrap().values[0])
            .sum::<f64>()
            / 1000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn invalid_arch_rejected() {
        assert!(matches!(init_model(&Arch::logistic(0, 2), 1), Err(Error::Config(_))));
        assert!(matches!(init_model(&Arch::logistic(3, 1), 1), Err(Error::Config(_))));
        assert!(matches!(init_model(&Arch::mlp(&[3, 0, 2]), 1), Err(Error::Config(_))));
        assert!(matches!(init_model(&Arch::mlp(&[3]), 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_uniform_softmax_gradient() {
        let arch = Arch::logistic(1, 2);
        let model = ModelParams::new(arch, vec![0.0; 4], 0).unwrap();
        let g = compute_batch_gradient(&model, &single(&[1.0], 1)).unwrap();
        // layout: W[0,0], W[1,0], b[0], b[1]; p - onehot(1) = (0.5, -0.5)
        assert_eq!(g.values, vec![0.5, -0.5, 0.5, -0.5]);
        assert_eq!(g.batch_count, 1);
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let model = init_model(&Arch::mlp(&[3, 5, 3]), 4).unwrap();
        let x = [0.3, -1.2, 0.7];
        let one = compute_batch_gradient(&model, &single(&x, 2)).unwrap();
        let dup = Batch::new(0, 3, x.repeat(6), vec![2; 6]).unwrap();
        let many = compute_batch_gradient(&model, &dup).unwrap();
        for (a, b) in one.values.iter().zip(&many.values) {
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = init_model(&Arch::mlp(&[2, 3, 2]), 21).unwrap();
        let batch = random_batch(5, 2, 2, 99);
        let g = compute_batch_gradient(&model, &batch).unwrap();
        let h = 1e-5;
        for i in 0..model.values.len() {
            let mut plus = model.clone();
            plus.values[i] += h;
            let mut minus = model.clone();
            minus.values[i] -= h;
            let fd = (batch_loss(&plus, &batch).unwrap() - batch_loss(&minus, &batch).unwrap())
                / (2.0 * h);
            let rel = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-3);
            assert!(rel < 1e-6, "component {i}: analytic {} fd {fd}", g.values[i]);
        }
    }

    #[test]
    fn gradient_errors() {
        let model = init_model(&Arch::logistic(3, 2), 1).unwrap();
        let wrong = random_batch(4, 2, 2, 1);
        assert!(matches!(compute_batch_gradient(&model, &wrong), Err(Error::Shape(_))));
        let mut bad = model.clone();
        bad.values[0] = f64::NAN;
        assert!(matches!(
            compute_batch_gradient(&bad, &random_batch(4, 3, 2, 1)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn averaging_hand_examples() {
        let g = GradientVector::new(vec![1.5, -2.0], 0);
        let avg = average_batch_gradients(&[g.clone(), g.clone(), g.clone()]).unwrap();
        assert_eq!(avg.values, g.values);
        assert_eq!(avg.batch_count, 3);

        let avg = average_batch_gradients(&[
            GradientVector::new(vec![1.0, 2.0], 0),
            GradientVector::new(vec![3.0, 4.0], 0),
        ])
        .unwrap();
        assert_eq!(avg.values, vec![2.0, 3.0]);
    }

    #[test]
    fn averaging_errors() {
        assert!(matches!(average_batch_gradients(&[]), Err(Error::Precondition(_))));
        let mixed = [GradientVector::new(vec![1.0], 0), GradientVector::new(vec![1.0], 1)];
        assert!(matches!(average_batch_gradients(&mixed), Err(Error::Staleness(_))));
    }

    #[test]
    fn update_hand_examples() {
        let m = ModelParams::new(Arch::logistic(1, 2), vec![1.0, 1.0, 0.0, 0.0], 3).unwrap();
        let zero = GradientVector::new(vec![0.0; 4], 3);
        let same = apply_update(&m, &zero, 0.1).unwrap();
        assert_eq!(same.values, m.values);
        assert_eq!(same.version, 4);

        let g = GradientVector::new(vec![2.0, -2.0, 0.0, 0.0], 3);
        let next = apply_update(&m, &g, 0.5).unwrap();
        assert_eq!(&next.values[..2], &[0.0, 2.0]);

        let stale = GradientVector::new(vec![0.0; 4], 2);
        assert!(matches!(apply_update(&m, &stale, 0.1), Err(Error::Staleness(_))));
    }

    #[test]
    fn update_decreases_convex_loss() {
        let model = init_model(&Arch::logistic(3, 2), 5).unwrap();
        let batch = random_batch(64, 3, 2, 8);
        let g = compute_batch_gradient(&model, &batch).unwrap();
        let next = apply_update(&model, &g, 0.01).unwrap();
        assert!(batch_loss(&next, &batch).unwrap() < batch_loss(&model, &batch).unwrap());
    }

    #[test]
    fn uniform_model_loss_is_ln2() {
        let model = ModelParams::new(Arch::logistic(2, 2), vec![0.0; 6], 0).unwrap();
        let data = vec![random_batch(50, 2, 2, 3), random_batch(7, 2, 2, 4)];
        let (loss, _) = evaluate(&model, &data).unwrap();
        assert!((loss.value - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(loss.sample_count, 57);
    }

    #[test]
    fn separating_model_is_perfect() {
        // class 0 at x < 0, class 1 at x > 0
        let model = ModelParams::new(Arch::logistic(1, 2), vec![-10.0, 10.0, 0.0, 0.0], 0).unwrap();
        let batch = Batch::new(0, 1, vec![-3.0, -2.0, 2.0, 5.0], vec![0, 0, 1, 1]).unwrap();
        let (_, acc) = evaluate(&model, &[batch]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn random_model_on_random_labels_is_chance() {
        let model = init_model(&Arch::logistic(5, 2), 17).unwrap();
        let (_, acc) = evaluate(&model, &[random_batch(10_000, 5, 2, 18)]).unwrap();
        assert!((acc - 0.5).abs() <= 0.02, "accuracy {acc}");
    }

    #[test]
    fn empty_evaluation_rejected() {
        let model = init_model(&Arch::logistic(2, 2), 1).unwrap();
        assert!(matches!(evaluate(&model, &[]), Err(Error::Precondition(_))));
    }
}
