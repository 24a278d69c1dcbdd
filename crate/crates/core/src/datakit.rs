//! Dataset ingestion and the experimental protocol around it: CSV loading,
//! mapminmax normalization, Dirichlet label-skew partitioning, Gaussian noise
//! injection and k-fold splits.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::fnn::LabeledDataset;
use crate::seed::rng_for;
use crate::{Error, Result};

/// A parsed CSV: `D` numeric features plus one label column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub header: Option<Vec<String>>,
    /// Row-major `N x D`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Original label strings, indexed by dense label.
    pub label_names: Vec<String>,
    pub dim: usize,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.label_names.len()
    }
}

/// Parses comma-separated text. The last column is the label; labels are
/// mapped to dense indices in order of first appearance. A first row with a
/// non-numeric feature field is treated as a header.
pub fn parse_csv(text: &str, source: &str) -> Result<RawTable> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut header = None;
    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut vocab: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut first_row = true;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(parse_err(line_no, "expected at least one feature and a label".into()));
        }
        if first_row {
            first_row = false;
            width = Some(fields.len());
            let numeric = fields[..fields.len() - 1]
                .iter()
                .all(|f| f.parse::<f64>().is_ok());
            if !numeric {
                header = Some(fields.iter().map(|f| f.to_string()).collect());
                continue;
            }
        }
        let expected = width.unwrap();
        if fields.len() != expected {
            return Err(parse_err(
                line_no,
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        for (j, f) in fields[..expected - 1].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line_no, format!("column {}: non-numeric feature {f:?}", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("column {}: non-finite feature", j + 1)));
            }
            features.push(v);
        }
        let name = fields[expected - 1];
        let next = vocab.len();
        let label = *vocab.entry(name.to_string()).or_insert_with(|| {
            label_names.push(name.to_string());
            next
        });
        labels.push(label);
    }

    if labels.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }
    Ok(RawTable {
        header,
        features,
        labels,
        label_names,
        dim: width.unwrap() - 1,
    })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<RawTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, &path.display().to_string())
}

/// Maps every feature column linearly onto `[-1, 1]`; constant columns map to 0.
pub fn normalize_mapminmax(table: &RawTable) -> Result<LabeledDataset> {
    if table.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = table.dim;
    let mut features = table.features.clone();
    for j in 0..d {
        let column = features.iter().skip(j).step_by(d);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        for v in features.iter_mut().skip(j).step_by(d) {
            *v = if hi > lo {
                2.0 * (*v - lo) / (hi - lo) - 1.0
            } else {
                0.0
            };
        }
    }
    LabeledDataset::new(features, table.labels.clone(), d, table.classes())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub clients: usize,
    pub seed: u64,
}

/// Per class, a length-`clients` proportion vector drawn from `Dir(alpha 1)`.
pub fn dirichlet_proportions(classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<f64>>> {
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", spec.alpha)));
    }
    if spec.clients == 0 {
        return Err(Error::InvalidConfig("clients must be at least 1".into()));
    }
    let gamma = Gamma::new(spec.alpha, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("alpha {}: {e}", spec.alpha)))?;
    let mut rng = rng_for(spec.seed, &[]);
    Ok((0..classes)
        .map(|_| loop {
            let draws: Vec<f64> = (0..spec.clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 && total.is_finite() {
                break draws.into_iter().map(|g| g / total).collect();
            }
        })
        .collect())
}

/// Integer allocation of `total` items by largest remainder. Ties go to the
/// lower index.
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Sample indices per client given class proportions `[class][client]`.
///
/// Each class's samples are shuffled and cut by largest-remainder counts.
/// With `repair`, every empty client takes one sample from the currently
/// largest client.
pub fn partition_indices(
    dataset: &LabeledDataset,
    proportions: &[Vec<f64>],
    seed: u64,
    repair: bool,
) -> Result<Vec<Vec<usize>>> {
    let classes = dataset.classes();
    if proportions.len() != classes {
        return Err(Error::DimensionMismatch {
            what: "class proportions",
            expected: classes,
            actual: proportions.len(),
        });
    }
    let clients = proportions.first().map_or(0, Vec::len);
    let mut rng = rng_for(seed, &[]);
    let mut parts = vec![Vec::new(); clients];
    for (c, props) in proportions.iter().enumerate() {
        let mut members = dataset.class_indices(c);
        members.shuffle(&mut rng);
        let mut cursor = 0;
        for (q, n) in largest_remainder(members.len(), props).into_iter().enumerate() {
            parts[q].extend_from_slice(&members[cursor..cursor + n]);
            cursor += n;
        }
    }
    if repair {
        if dataset.len() < clients {
            return Err(Error::NotEnoughSamples {
                what: "clients",
                samples: dataset.len(),
                required: clients,
            });
        }
        for q in 0..clients {
            if parts[q].is_empty() {
                let donor = (0..clients).max_by_key(|&p| (parts[p].len(), usize::MAX - p)).unwrap();
                let moved = parts[donor].pop().unwrap();
                parts[q].push(moved);
            }
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    Ok(parts)
}

/// Label-skewed split of `dataset` into `spec.clients` disjoint partitions.
/// Returns the partitions and the class proportions that produced them.
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<(Vec<LabeledDataset>, Vec<Vec<f64>>)> {
    let proportions = dirichlet_proportions(dataset.classes(), spec)?;
    let seed = crate::seed::derive_seed(spec.seed, &[crate::seed::stream::PARTITION]);
    let parts = partition_indices(dataset, &proportions, seed, true)?;
    Ok((parts.iter().map(|ix| dataset.subset(ix)).collect(), proportions))
}

/// Adds standard-normal noise to every feature of a random `floor(level N)`
/// subset of samples. Labels are untouched.
pub fn inject_noise(dataset: &LabeledDataset, level: f64, seed: u64) -> Result<LabeledDataset> {
    Ok(inject_noise_with_rows(dataset, level, seed)?.0)
}

/// [`inject_noise`] that also reports which rows were perturbed (sorted).
pub fn inject_noise_with_rows(
    dataset: &LabeledDataset,
    level: f64,
    seed: u64,
) -> Result<(LabeledDataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidConfig(format!("uncertainty level must lie in [0, 1], got {level}")));
    }
    let n = dataset.len();
    // the epsilon absorbs representation error such as 0.7 * 10 = 7.000000000000001 or 6.9999...
    let count = ((level * n as f64) + 1e-9).floor() as usize;
    let count = count.min(n);
    let mut rng = rng_for(seed, &[]);
    let mut rows = index::sample(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    let mut out = dataset.clone();
    for &i in &rows {
        for v in out.sample_mut(i) {
            let z: f64 = rng.sample(StandardNormal);
            *v += z;
        }
    }
    Ok((out, rows))
}

/// Test-fold indices for `folds`-fold cross-validation. The first `N % folds`
/// folds get one extra sample.
pub fn kfold_indices(len: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("folds must be at least 2, got {folds}")));
    }
    if len < folds {
        return Err(Error::NotEnoughSamples {
            what: "folds",
            samples: len,
            required: folds,
        });
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(seed, &[]));
    let (base, extra) = (len / folds, len % folds);
    let mut cursor = 0;
    Ok((0..folds)
        .map(|f| {
            let size = base + usize::from(f < extra);
            let mut fold = order[cursor..cursor + size].to_vec();
            cursor += size;
            fold.sort_unstable();
            fold
        })
        .collect())
}

/// `(train, test)` pairs, one per fold.
pub fn kfold_split(
    dataset: &LabeledDataset,
    folds: usize,
    seed: u64,
) -> Result<Vec<(LabeledDataset, LabeledDataset)>> {
    let test_folds = kfold_indices(dataset.len(), folds, seed)?;
    Ok(test_folds
        .iter()
        .map(|test| {
            let mut in_test = vec![false; dataset.len()];
            test.iter().for_each(|&i| in_test[i] = true);
            let train: Vec<usize> = (0..dataset.len()).filter(|&i| !in_test[i]).collect();
            (dataset.subset(&train), dataset.subset(test))
        })
        .collect())
}
