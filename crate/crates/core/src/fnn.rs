//! Rule-masked Takagi-Sugeno fuzzy neural network: domain types and the
//! forward pass.
//!
//! A rule `k` owns Gaussian antecedents `(m_k, sigma_k)` over the `D` input
//! features and a first-order consequent `theta_k` of shape `(D+1) x C`
//! (bias row first). For an input `x` and a binary activation row `s`:
//!
//! ```text
//! phi_kj = exp(-((x_j - m_kj) / sigma_kj)^2)
//! h_k    = s_k exp(|phi_k|_2) / sum_j s_j exp(|phi_j|_2)
//! g_k    = [1; x]^T theta_k
//! y_hat  = softmax(sum_k h_k g_k)
//! ```
//!
//! Deactivated rules contribute nothing and their parameters are never read.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower bound applied to every membership spread.
pub const SIGMA_MIN: f64 = 1e-3;

/// Probability floor used inside the cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

/// One fuzzy rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: u64,
    /// Membership centers, length `D`.
    pub centers: Vec<f64>,
    /// Membership spreads, length `D`, each `>= SIGMA_MIN`.
    pub spreads: Vec<f64>,
    /// Consequent matrix, `(D+1) x C` row-major; row 0 is the bias row.
    pub consequent: Vec<f64>,
}

impl Rule {
    pub fn new(
        id: u64,
        centers: Vec<f64>,
        spreads: Vec<f64>,
        consequent: Vec<f64>,
        classes: usize,
    ) -> Result<Self> {
        let dim = centers.len();
        if spreads.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "rule spreads",
                expected: dim,
                actual: spreads.len(),
            });
        }
        if consequent.len() != (dim + 1) * classes {
            return Err(Error::DimensionMismatch {
                what: "rule consequent",
                expected: (dim + 1) * classes,
                actual: consequent.len(),
            });
        }
        let mut rule = Rule {
            id,
            centers,
            spreads,
            consequent,
        };
        rule.clamp_spreads();
        Ok(rule)
    }

    /// Centers ~ U(-1, 1), spreads = 1, consequents ~ U(-0.1, 0.1).
    pub fn random<R: Rng + ?Sized>(id: u64, dim: usize, classes: usize, rng: &mut R) -> Self {
        Rule {
            id,
            centers: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            spreads: vec![1.0; dim],
            consequent: (0..(dim + 1) * classes)
                .map(|_| rng.random_range(-0.1..0.1))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.centers.len()
    }

    pub fn clamp_spreads(&mut self) {
        for s in &mut self.spreads {
            if !(*s >= SIGMA_MIN) {
                *s = SIGMA_MIN;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.centers.len() + self.spreads.len() + self.consequent.len()
    }

    /// All trainable parameters in a fixed order: centers, spreads, consequent.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.centers
            .iter()
            .chain(self.spreads.iter())
            .chain(self.consequent.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.centers
            .iter_mut()
            .chain(self.spreads.iter_mut())
            .chain(self.consequent.iter_mut())
    }
}

/// The ordered global rule set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleBank {
    rules: Vec<Rule>,
    dim: usize,
    classes: usize,
    next_id: u64,
}

impl RuleBank {
    pub fn new(dim: usize, classes: usize, rules: Vec<Rule>) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for rule in &rules {
            if rule.dim() != dim || rule.spreads.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "rule dimension",
                    expected: dim,
                    actual: rule.dim(),
                });
            }
            if rule.consequent.len() != (dim + 1) * classes {
                return Err(Error::DimensionMismatch {
                    what: "rule consequent",
                    expected: (dim + 1) * classes,
                    actual: rule.consequent.len(),
                });
            }
            if !ids.insert(rule.id) {
                return Err(Error::InvalidConfig(format!("duplicate rule id {}", rule.id)));
            }
        }
        let next_id = rules.iter().map(|r| r.id + 1).max().unwrap_or(0);
        Ok(RuleBank {
            rules,
            dim,
            classes,
            next_id,
        })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, classes: usize, count: usize, rng: &mut R) -> Self {
        let rules = (0..count as u64)
            .map(|id| Rule::random(id, dim, classes, rng))
            .collect();
        RuleBank {
            rules,
            dim,
            classes,
            next_id: count as u64,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rules_mut(&mut self) -> &mut [Rule] {
        &mut self.rules
    }

    pub fn rule(&self, k: usize) -> &Rule {
        &self.rules[k]
    }

    pub fn ids(&self) -> Vec<u64> {
        self.rules.iter().map(|r| r.id).collect()
    }

    /// Appends a freshly initialized rule with a new id and returns its index.
    pub fn spawn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let rule = Rule::random(self.next_id, self.dim, self.classes, rng);
        self.next_id += 1;
        self.rules.push(rule);
        self.rules.len() - 1
    }

    /// Keeps rule `k` iff `keep[k]`; relative order is preserved.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.rules.len());
        let mut it = keep.iter();
        self.rules.retain(|_| *it.next().unwrap());
    }

    pub fn replace_rule(&mut self, k: usize, rule: Rule) {
        debug_assert_eq!(rule.id, self.rules[k].id);
        self.rules[k] = rule;
    }

    /// Total trainable parameter count of the bank.
    pub fn param_count(&self) -> usize {
        self.rules.iter().map(Rule::param_count).sum()
    }
}

/// Q x K binary rule statuses; entry `(q, k)` says whether client `q` uses rule `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    clients: usize,
    rules: usize,
    entries: Vec<bool>,
}

impl ActivationMatrix {
    pub fn filled(clients: usize, rules: usize, value: bool) -> Self {
        ActivationMatrix {
            clients,
            rules,
            entries: vec![value; clients * rules],
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let rules = rows.first().map_or(0, Vec::len);
        for row in &rows {
            if row.len() != rules {
                return Err(Error::DimensionMismatch {
                    what: "activation row",
                    expected: rules,
                    actual: row.len(),
                });
            }
        }
        Ok(ActivationMatrix {
            clients: rows.len(),
            rules,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    /// Bernoulli(0.5) per entry; rows that come out all-zero are redrawn.
    pub fn random<R: Rng + ?Sized>(clients: usize, rules: usize, rng: &mut R) -> Self {
        let mut entries = Vec::with_capacity(clients * rules);
        for _ in 0..clients {
            loop {
                let row: Vec<bool> = (0..rules).map(|_| rng.random_bool(0.5)).collect();
                if rules == 0 || row.iter().any(|&b| b) {
                    entries.extend(row);
                    break;
                }
            }
        }
        ActivationMatrix {
            clients,
            rules,
            entries,
        }
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn rules(&self) -> usize {
        self.rules
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.entries[q * self.rules + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.entries[q * self.rules + k] = value;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.entries[q * self.rules..(q + 1) * self.rules]
    }

    pub fn set_row(&mut self, q: usize, row: &[bool]) {
        assert_eq!(row.len(), self.rules);
        self.entries[q * self.rules..(q + 1) * self.rules].copy_from_slice(row);
    }

    pub fn column(&self, k: usize) -> Vec<bool> {
        (0..self.clients).map(|q| self.get(q, k)).collect()
    }

    pub fn column_sum(&self, k: usize) -> usize {
        (0..self.clients).filter(|&q| self.get(q, k)).count()
    }

    pub fn row_sum(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&b| b).count()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        (0..self.clients).map(move |q| self.row(q))
    }

    pub fn push_column(&mut self, column: &[bool]) {
        assert_eq!(column.len(), self.clients);
        let new_rules = self.rules + 1;
        let mut entries = Vec::with_capacity(self.clients * new_rules);
        for (q, &bit) in column.iter().enumerate() {
            entries.extend_from_slice(self.row(q));
            entries.push(bit);
        }
        self.entries = entries;
        self.rules = new_rules;
    }

    /// Keeps column `k` iff `keep[k]`.
    pub fn retain_columns(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.rules);
        let kept = keep.iter().filter(|&&b| b).count();
        let entries = (0..self.clients)
            .flat_map(|q| {
                self.row(q)
                    .iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(&b, _)| b)
                    .collect::<Vec<_>>()
            })
            .collect();
        self.entries = entries;
        self.rules = kept;
    }
}

/// Feature matrix plus integer class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl LabeledDataset {
    /// `features` is row-major `N x D`. An empty dataset is representable
    /// (client partitions and test folds may be empty) but most operations
    /// reject it.
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                what: "feature matrix",
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        one_hot(self.labels[i], self.classes)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .chunks(self.dim.max(1))
            .zip(self.labels.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            labels,
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Indices of every sample with label `c`, in dataset order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Max-shifted softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gaussian membership degree `exp(-((x - m) / sigma)^2)`.
pub fn membership_value(x: f64, center: f64, spread: f64) -> Result<f64> {
    if !(x.is_finite() && center.is_finite() && spread.is_finite()) {
        return Err(Error::NonFinite);
    }
    let u = (x - center) / spread.max(SIGMA_MIN);
    Ok((-u * u).exp())
}

/// Intermediate quantities of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub(crate) struct Forward {
    /// `K x D` membership degrees; zero rows for inactive rules.
    pub memberships: Vec<f64>,
    /// Euclidean norm of each rule's membership vector.
    pub norms: Vec<f64>,
    pub firing: Vec<f64>,
    /// `K x C` consequent outputs; zero rows for inactive rules.
    pub consequents: Vec<f64>,
    pub probs: Vec<f64>,
}

fn check_inputs(x: &[f64], bank: &RuleBank, active: &[bool]) -> Result<()> {
    if x.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            what: "input vector",
            expected: bank.dim(),
            actual: x.len(),
        });
    }
    if active.len() != bank.len() {
        return Err(Error::DimensionMismatch {
            what: "activation row",
            expected: bank.len(),
            actual: active.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if !active.iter().any(|&b| b) {
        return Err(Error::NoActiveRules);
    }
    Ok(())
}

fn rule_norm(x: &[f64], rule: &Rule, out: &mut [f64]) -> f64 {
    let mut sq = 0.0;
    for (j, slot) in out.iter_mut().enumerate() {
        let u = (x[j] - rule.centers[j]) / rule.spreads[j];
        let phi = (-u * u).exp();
        *slot = phi;
        sq += phi * phi;
    }
    sq.sqrt()
}

/// Normalized firing strengths over the active rules; inactive entries are 0.
fn normalize_firing(norms: &[f64], active: &[bool]) -> Vec<f64> {
    let max = norms
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(&n, _)| n)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut firing: Vec<f64> = norms
        .iter()
        .zip(active)
        .map(|(&n, &a)| if a { (n - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = firing.iter().sum();
    for h in &mut firing {
        *h /= total;
    }
    firing
}

pub(crate) fn forward(x: &[f64], bank: &RuleBank, active: &[bool]) -> Result<Forward> {
    check_inputs(x, bank, active)?;
    let (k_count, d, c) = (bank.len(), bank.dim(), bank.classes());
    let mut memberships = vec![0.0; k_count * d];
    let mut norms = vec![0.0; k_count];
    let mut consequents = vec![0.0; k_count * c];
    for (k, rule) in bank.rules().iter().enumerate() {
        if !active[k] {
            continue;
        }
        norms[k] = rule_norm(x, rule, &mut memberships[k * d..(k + 1) * d]);
        consequent_into(x, &rule.consequent, &mut consequents[k * c..(k + 1) * c]);
    }
    let firing = normalize_firing(&norms, active);
    let mut logits = vec![0.0; c];
    for k in (0..k_count).filter(|&k| active[k]) {
        for (t, g) in logits.iter_mut().zip(&consequents[k * c..(k + 1) * c]) {
            *t += firing[k] * g;
        }
    }
    let probs = softmax(&logits);
    Ok(Forward {
        memberships,
        norms,
        firing,
        consequents,
        probs,
    })
}

/// Firing strengths `h_k(x)` under activation row `active`.
pub fn firing_strengths(x: &[f64], bank: &RuleBank, active: &[bool]) -> Result<Vec<f64>> {
    check_inputs(x, bank, active)?;
    let mut scratch = vec![0.0; bank.dim()];
    let norms: Vec<f64> = bank
        .rules()
        .iter()
        .zip(active)
        .map(|(rule, &a)| if a { rule_norm(x, rule, &mut scratch) } else { 0.0 })
        .collect();
    Ok(normalize_firing(&norms, active))
}

fn consequent_into(x: &[f64], theta: &[f64], out: &mut [f64]) {
    let c = out.len();
    out.copy_from_slice(&theta[..c]);
    for (j, &xj) in x.iter().enumerate() {
        let row = &theta[(j + 1) * c..(j + 2) * c];
        for (o, &t) in out.iter_mut().zip(row) {
            *o += xj * t;
        }
    }
}

/// `[1; x]^T theta` for a row-major `(D+1) x C` consequent matrix.
pub fn consequent_output(x: &[f64], theta: &[f64], classes: usize) -> Result<Vec<f64>> {
    if theta.len() != (x.len() + 1) * classes {
        return Err(Error::DimensionMismatch {
            what: "consequent matrix",
            expected: (x.len() + 1) * classes,
            actual: theta.len(),
        });
    }
    let mut out = vec![0.0; classes];
    consequent_into(x, theta, &mut out);
    Ok(out)
}

/// Class probabilities of the masked network.
pub fn predict(x: &[f64], bank: &RuleBank, active: &[bool]) -> Result<Vec<f64>> {
    Ok(forward(x, bank, active)?.probs)
}

pub fn predict_class(x: &[f64], bank: &RuleBank, active: &[bool]) -> Result<usize> {
    let probs = predict(x, bank, active)?;
    Ok(argmax(&probs))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// `-sum_c y_c ln(max(y_hat_c, PROB_EPS))`.
pub fn cross_entropy_loss(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .filter(|(&y, _)| y != 0.0)
        .map(|(&y, &p)| -y * p.max(PROB_EPS).ln())
        .sum()
}

/// Mean per-sample cross-entropy over a dataset.
pub fn dataset_loss(dataset: &LabeledDataset, bank: &RuleBank, active: &[bool]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, y) in dataset.iter() {
        let probs = predict(x, bank, active)?;
        total -= probs[y].max(PROB_EPS).ln();
    }
    Ok(total / dataset.len() as f64)
}

/// Fraction of correctly classified samples, or `None` for an empty dataset.
pub fn accuracy(dataset: &LabeledDataset, bank: &RuleBank, active: &[bool]) -> Result<Option<f64>> {
    if dataset.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for (x, y) in dataset.iter() {
        if predict_class(x, bank, active)? == y {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / dataset.len() as f64))
}
