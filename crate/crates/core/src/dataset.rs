//! Dataset generation, preprocessing, per-peer partitioning and the batch
//! blob format used by the object store.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ml::Batch;
use crate::store::ObjectStore;

/// Fraction of samples held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocessing {
    #[default]
    None,
    MinMax,
    Standardize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Gaussian blobs with unit variance. Class `c` is centred at
    /// `±separation` on axis `(c / 2) mod features` (`+` for even `c`), so two
    /// classes sit `2 * separation` apart.
    SyntheticBlobs {
        classes: usize,
        features: usize,
        samples: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub preprocessing: Preprocessing,
    pub seed: u64,
}

/// Row-major samples with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    fn select(&self, indices: &[usize]) -> SampleSet {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        SampleSet {
            dim: self.dim,
            features,
            labels,
        }
    }

    fn batch(&self, batch_id: usize, indices: &[usize]) -> Batch {
        let s = self.select(indices);
        Batch {
            batch_id,
            rows: s.labels.len(),
            dim: s.dim,
            features: s.features,
            labels: s.labels,
        }
    }

    /// Cuts the set, in order, into batches of at most `size` rows.
    pub fn to_batches(&self, size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        order
            .chunks(size.max(1))
            .enumerate()
            .map(|(id, idx)| self.batch(id, idx))
            .collect()
    }
}

/// Train/validation pair produced by [`generate`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: SampleSet,
    pub validation: SampleSet,
}

/// splitmix64 finalizer; derives independent sub-seeds from a tuple.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn blobs(classes: usize, features: usize, samples: usize, separation: f64, seed: u64) -> Result<SampleSet> {
    if classes < 2 || features == 0 || samples == 0 {
        return Err(Error::Config(format!(
            "synthetic blobs need classes >= 2, features >= 1, samples >= 1 \
             (got {classes}, {features}, {samples})"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Config(format!("invalid class separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
    let mut data = Vec::with_capacity(samples * features);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % classes;
        let axis = (class / 2) % features;
        let sign = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
        for f in 0..features {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let centre = if f == axis { sign * separation } else { 0.0 };
            data.push(centre + noise);
        }
        labels.push(class as u32);
    }
    Ok(SampleSet {
        dim: features,
        features: data,
        labels,
    })
}

fn read_csv(path: &PathBuf, label_column: &str) -> Result<SampleSet> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Ingestion {
        row: 0,
        reason: format!("cannot open {}: {e}", path.display()),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingestion {
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Ingestion {
            row: 1,
            reason: format!("no label column named {label_column:?}"),
        })?;
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| Error::Ingestion {
            row: line,
            reason: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Ingestion {
                row: line,
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_idx {
                let label: u32 = field.parse().map_err(|_| Error::Ingestion {
                    row: line,
                    reason: format!("label {field:?} is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Ingestion {
                    row: line,
                    reason: format!("column {:?}: {field:?} is not numeric", &headers[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Ingestion {
                        row: line,
                        reason: format!("column {:?} is not finite", &headers[j]),
                    });
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Ingestion {
            row: 2,
            reason: "no data rows".into(),
        });
    }
    Ok(SampleSet {
        dim,
        features,
        labels,
    })
}

/// Applies column-wise preprocessing in place, fitted on `set` itself.
pub fn preprocess(set: &mut SampleSet, how: Preprocessing) {
    let n = set.len();
    if n == 0 || how == Preprocessing::None {
        return;
    }
    for col in 0..set.dim {
        let column = || (0..n).map(|i| set.features[i * set.dim + col]);
        let (a, b) = match how {
            Preprocessing::None => unreachable!(),
            Preprocessing::MinMax => {
                let lo = column().fold(f64::INFINITY, f64::min);
                let hi = column().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                if span > 0.0 {
                    (lo, span)
                } else {
                    (lo, f64::INFINITY)
                }
            }
            Preprocessing::Standardize => {
                let mean = column().sum::<f64>() / n as f64;
                let var = column().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                (mean, if sd > 0.0 { sd } else { f64::INFINITY })
            }
        };
        for i in 0..n {
            let v = &mut set.features[i * set.dim + col];
            *v = (*v - a) / b;
        }
    }
}

/// Builds the dataset described by `spec`, preprocesses it and splits it
/// 90/10 into train and validation after a seeded shuffle.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let mut all = match &spec.kind {
        DatasetKind::SyntheticBlobs {
            classes,
            features,
            samples,
            separation,
        } => blobs(*classes, *features, *samples, *separation, spec.seed)?,
        DatasetKind::Csv { path, label_column } => read_csv(path, label_column)?,
    };
    preprocess(&mut all, spec.preprocessing);

    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 2])));
    let n_val = (all.len() as f64 * VALIDATION_FRACTION).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok(Dataset {
        train: all.select(&train_idx),
        validation: all.select(&val_idx),
    })
}

/// One peer's share of the training set for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub peer_rank: usize,
    pub batches: Vec<Batch>,
    pub epoch_shuffle_seed: u64,
    /// Training-set indices in batch order.
    pub sample_indices: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Shuffles the training set with a seed keyed by `(seed, epoch)`, deals
/// samples round-robin to `peers` partitions, reshuffles each partition and
/// cuts it into `ceil(len / batch_size)` batches.
pub fn partition_and_batch(
    data: &SampleSet,
    peers: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Partition>> {
    if peers == 0 || batch_size == 0 {
        return Err(Error::Config(format!(
            "peer count and batch size must be >= 1 (got {peers}, {batch_size})"
        )));
    }
    if peers > data.len() {
        return Err(Error::Config(format!(
            "{peers} peers for only {} training samples",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 3, epoch])));

    (0..peers)
        .map(|rank| {
            let mut mine: Vec<usize> = order.iter().skip(rank).step_by(peers).copied().collect();
            let epoch_shuffle_seed = mix_seed(&[seed, 4, epoch, rank as u64]);
            mine.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_shuffle_seed));
            let batches = mine
                .chunks(batch_size)
                .enumerate()
                .map(|(id, idx)| data.batch(id, idx))
                .collect();
            Ok(Partition {
                peer_rank: rank,
                batches,
                epoch_shuffle_seed,
                sample_indices: mine,
            })
        })
        .collect()
}

const BATCH_HEADER: usize = 24;

/// Batch blob: `batch_id u64, rows u64, feature_dim u64` then `rows*dim`
/// f64 features then `rows` u32 labels, all little-endian.
pub fn encode_batch(batch: &Batch) -> Vec<u8> {
    let mut out = Vec::with_capacity(BATCH_HEADER + batch.features.len() * 8 + batch.rows * 4);
    out.extend_from_slice(&(batch.batch_id as u64).to_le_bytes());
    out.extend_from_slice(&(batch.rows as u64).to_le_bytes());
    out.extend_from_slice(&(batch.dim as u64).to_le_bytes());
    for v in &batch.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &batch.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<Batch> {
    if bytes.len() < BATCH_HEADER {
        return Err(Error::Decode(format!(
            "batch blob of {} bytes is shorter than its header",
            bytes.len()
        )));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
    let (batch_id, rows, dim) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let expected = rows
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(8))
        .and_then(|f| f.checked_add(rows.checked_mul(4)?))
        .and_then(|b| b.checked_add(BATCH_HEADER))
        .ok_or_else(|| Error::Decode("batch header overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Decode(format!(
            "batch {batch_id}: blob has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[BATCH_HEADER..];
    let (feat, labs) = body.split_at(rows * dim * 8);
    let features = feat
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = labs
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Batch {
        batch_id,
        rows,
        dim,
        features,
        labels,
    })
}

/// Uploads each batch under a fresh key and returns the `(batch_id, key)` manifest.
pub fn store_batches(store: &ObjectStore, partition: &Partition) -> Result<Vec<(usize, String)>> {
    partition
        .batches
        .iter()
        .map(|b| Ok((b.batch_id, store.put(&encode_batch(b))?)))
        .collect()
}

pub fn load_batch(store: &ObjectStore, key: &str) -> Result<Batch> {
    decode_batch(&store.get(key)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs_spec(n: usize, pre: Preprocessing) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::SyntheticBlobs {
                classes: 2,
                features: 2,
                samples: n,
                separation: 3.0,
            },
            preprocessing: pre,
            seed: 1,
        }
    }

    fn union(d: &Dataset) -> SampleSet {
        let mut s = d.train.clone();
        s.features.extend_from_slice(&d.validation.features);
        s.labels.extend_from_slice(&d.validation.labels);
        s
    }

    fn flat(n: usize) -> SampleSet {
        SampleSet {
            dim: 1,
            features: (0..n).map(|i| i as f64).collect(),
            labels: vec![0; n],
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&blobs_spec(1000, Preprocessing::None)).unwrap();
        let b = generate(&blobs_spec(1000, Preprocessing::None)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.train.len(), 900);
        assert_eq!(a.validation.len(), 100);
    }

    #[test]
    fn min_max_bounds() {
        let d = union(&generate(&blobs_spec(1000, Preprocessing::MinMax)).unwrap());
        for col in 0..d.dim {
            let vals: Vec<f64> = (0..d.len()).map(|i| d.row(i)[col]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() <= 1e-12 && (hi - 1.0).abs() <= 1e-12, "{lo} {hi}");
        }
    }

    #[test]
    fn standardized_moments() {
        let d = union(&generate(&blobs_spec(10_000, Preprocessing::Standardize)).unwrap());
        for col in 0..d.dim {
            let vals: Vec<f64> = (0..d.len()).map(|i| d.row(i)[col]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "{mean} {var}");
        }
    }

    #[test]
    fn csv_ingestion_and_row_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        std::fs::write(&good, "a,label,b\n1.0,0,2.0\n3.0,1,4.0\n5,1,6\n").unwrap();
        let spec = DatasetSpec {
            kind: DatasetKind::Csv {
                path: good,
                label_column: "label".into(),
            },
            preprocessing: Preprocessing::None,
            seed: 0,
        };
        let d = generate(&spec).unwrap();
        assert_eq!(d.train.len() + d.validation.len(), 3);
        assert_eq!(d.train.dim, 2);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,label\n1.0,0\nx,1\n").unwrap();
        let spec = DatasetSpec {
            kind: DatasetKind::Csv {
                path: bad,
                label_column: "label".into(),
            },
            ..spec
        };
        match generate(&spec) {
            Err(Error::Ingestion { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn even_split_arithmetic() {
        let parts = partition_and_batch(&flat(120), 4, 10, 9, 0).unwrap();
        for p in &parts {
            assert_eq!(p.len(), 30);
            assert_eq!(p.batches.len(), 3);
        }
    }

    #[test]
    fn uneven_last_batch() {
        let parts = partition_and_batch(&flat(100), 4, 8, 9, 0).unwrap();
        for p in &parts {
            let sizes: Vec<usize> = p.batches.iter().map(|b| b.rows).collect();
            assert_eq!(sizes, vec![8, 8, 8, 1]);
            let ids: Vec<usize> = p.batches.iter().map(|b| b.batch_id).collect();
            assert_eq!(ids, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn single_peer_gets_everything() {
        let parts = partition_and_batch(&flat(37), 1, 5, 2, 3).unwrap();
        assert_eq!(parts.len(), 1);
        let mut idx = parts[0].sample_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_peers() {
        assert!(matches!(partition_and_batch(&flat(3), 4, 1, 0, 0), Err(Error::Config(_))));
        assert!(matches!(partition_and_batch(&flat(3), 0, 1, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn epochs_shuffle_differently() {
        let a = partition_and_batch(&flat(50), 2, 5, 1, 0).unwrap();
        let b = partition_and_batch(&flat(50), 2, 5, 1, 1).unwrap();
        assert_ne!(a[0].sample_indices, b[0].sample_indices);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let parts = partition_and_batch(&flat(20), 1, 7, 1, 0).unwrap();
        let blob = encode_batch(&parts[0].batches[0]);
        assert_eq!(decode_batch(&blob).unwrap(), parts[0].batches[0]);
        assert!(matches!(decode_batch(&blob[..blob.len() - 1]), Err(Error::Decode(_))));
        assert!(matches!(decode_batch(&blob[..10]), Err(Error::Decode(_))));
    }

    #[test]
    fn store_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let parts = partition_and_batch(&flat(23), 1, 5, 1, 0).unwrap();
        let manifest = store_batches(&store, &parts[0]).unwrap();
        assert_eq!(manifest.len(), parts[0].batches.len());
        let keys: std::collections::HashSet<_> = manifest.iter().map(|(_, k)| k.clone()).collect();
        assert_eq!(keys.len(), manifest.len());
        for (id, key) in &manifest {
            assert_eq!(&load_batch(&store, key).unwrap(), &parts[0].batches[*id]);
        }
        let unknown = uuid::Uuid::new_v4().to_string();
        assert!(matches!(load_batch(&store, &unknown), Err(Error::NotFound(_))));
    }
}
