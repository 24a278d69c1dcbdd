//! Analytic gradients of the per-sample cross-entropy and a central-difference
//! oracle to check them.
//!
//! With `r_k = |phi_k|_2`, `delta = y_hat - y` and `a_k = g_k . delta`:
//!
//! ```text
//! dL/dtheta_k[i][c] = h_k [1; x]_i delta_c
//! dL/dr_k           = h_k (a_k - sum_j h_j a_j)
//! dL/dm_kj          = dL/dr_k * 2 u phi^2 / (r_k sigma_kj)
//! dL/dsigma_kj      = dL/dr_k * 2 u^2 phi^2 / (r_k sigma_kj)
//! ```
//!
//! where `u = (x_j - m_kj) / sigma_kj` and `phi = phi_kj`.

use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::fnn::{self, cross_entropy_loss, Rule, RuleBank, PROB_EPS};
use crate::{Error, Result};

/// Gradient of the loss with respect to one rule's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleGradient {
    pub centers: Vec<f64>,
    pub spreads: Vec<f64>,
    pub consequent: Vec<f64>,
}

impl RuleGradient {
    pub fn zeros_like(rule: &Rule) -> Self {
        RuleGradient {
            centers: vec![0.0; rule.centers.len()],
            spreads: vec![0.0; rule.spreads.len()],
            consequent: vec![0.0; rule.consequent.len()],
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.centers
            .iter()
            .chain(self.spreads.iter())
            .chain(self.consequent.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.centers
            .iter_mut()
            .chain(self.spreads.iter_mut())
            .chain(self.consequent.iter_mut())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }
}

/// Per-rule gradients aligned with the bank order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub rules: Vec<RuleGradient>,
}

impl GradientSet {
    pub fn zeros_like(bank: &RuleBank) -> Self {
        GradientSet {
            rules: bank.rules().iter().map(RuleGradient::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.rules.iter_mut().zip(&other.rules) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.rules {
            for v in g.values_mut() {
                *v *= factor;
            }
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.rules.iter().flat_map(RuleGradient::values)
    }

    /// Largest `|a - b| / max(1e-8, |a| + |b|)` over all components.
    pub fn max_relative_error(&self, other: &GradientSet) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(&a, &b)| (a - b).abs() / (a.abs() + b.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }
}

/// Loss and exact gradient for one sample.
pub fn backward(
    x: &[f64],
    target: &[f64],
    bank: &RuleBank,
    active: &[bool],
) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::zeros_like(bank);
    let loss = accumulate_backward(x, target, bank, active, &mut grads)?;
    Ok((loss, grads))
}

/// Adds the sample's gradient into `grads` and returns its loss.
pub fn accumulate_backward(
    x: &[f64],
    target: &[f64],
    bank: &RuleBank,
    active: &[bool],
    grads: &mut GradientSet,
) -> Result<f64> {
    if target.len() != bank.classes() {
        return Err(Error::DimensionMismatch {
            what: "target vector",
            expected: bank.classes(),
            actual: target.len(),
        });
    }
    let fwd = fnn::forward(x, bank, active)?;
    let loss = cross_entropy_loss(target, &fwd.probs);
    let (d, c) = (bank.dim(), bank.classes());

    let delta: Vec<f64> = fwd.probs.iter().zip(target).map(|(p, y)| p - y).collect();
    let agreement: Vec<f64> = (0..bank.len())
        .map(|k| {
            fwd.consequents[k * c..(k + 1) * c]
                .iter()
                .zip(&delta)
                .map(|(g, e)| g * e)
                .sum()
        })
        .collect();
    let mean_agreement: f64 = fwd.firing.iter().zip(&agreement).map(|(h, a)| h * a).sum();

    for (k, (rule, grad)) in bank.rules().iter().zip(&mut grads.rules).enumerate() {
        if !active[k] {
            continue;
        }
        let h = fwd.firing[k];

        for (i, row) in grad.consequent.chunks_mut(c).enumerate() {
            let xi = if i == 0 { 1.0 } else { x[i - 1] };
            for (g, e) in row.iter_mut().zip(&delta) {
                *g += h * xi * e;
            }
        }

        let d_norm = h * (agreement[k] - mean_agreement);
        let r = fwd.norms[k];
        if r <= 0.0 {
            // every membership underflowed; the rule has no antecedent sensitivity
            continue;
        }
        let phis = &fwd.memberships[k * d..(k + 1) * d];
        for j in 0..d {
            let sigma = rule.spreads[j];
            let u = (x[j] - rule.centers[j]) / sigma;
            let common = d_norm * 2.0 * u * phis[j] * phis[j] / (r * sigma);
            grad.centers[j] += common;
            grad.spreads[j] += common * u;
        }
    }
    Ok(loss)
}

/// Mean loss and mean gradient over a set of samples.
pub fn batch_backward<'a, I>(samples: I, bank: &RuleBank, active: &[bool]) -> Result<(f64, GradientSet)>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let mut total = GradientSet::zeros_like(bank);
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut target = vec![0.0; bank.classes()];
    for (x, y) in samples {
        target[y] = 1.0;
        loss += accumulate_backward(x, &target, bank, active, &mut total)?;
        target[y] = 0.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    total.scale(1.0 / count as f64);
    Ok((loss / count as f64, total))
}

/// `exp` in double-double precision. The library's own version can lose
/// about four digits, too much for the oracle below.
fn dd_exp(a: TwoFloat) -> TwoFloat {
    if a.hi() < -745.0 {
        return TwoFloat::from(0.0);
    }
    // a = k ln2 + r, then exp(r) = exp(r / 1024)^1024
    let k = (a.hi() / std::f64::consts::LN_2).round();
    let r = (a - twofloat::consts::LN_2 * k) / 1024.0;
    let mut term = TwoFloat::from(1.0);
    let mut sum = TwoFloat::from(1.0);
    for n in 1..=14 {
        term = term * r / n as f64;
        sum += term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

/// Double-double quotient with one correction step; the library's operator
/// is only accurate to about `f64` precision.
fn dd_div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q = a / b;
    q + (a - q * b) / b.hi()
}

/// `ln` in double-double precision: one Newton step from the `f64` value.
fn dd_ln(a: TwoFloat) -> TwoFloat {
    let y = TwoFloat::from(a.hi().ln());
    y + a * dd_exp(-y) - 1.0
}

/// Per-sample loss in double-double arithmetic with parameter `p` of rule
/// `k` shifted by `offset`. Differencing an `f64` loss of order one has a
/// rounding floor near `1e-11` at `step = 1e-5`, which swamps gradient
/// components close to zero; the extra precision pushes that floor down to
/// about `1e-25`.
fn shifted_loss(x: &[f64], target: &[f64], bank: &RuleBank, active: &[bool], k: usize, p: usize, offset: TwoFloat) -> TwoFloat {
    let (d, c) = (bank.dim(), bank.classes());
    let value = |j: usize, index: usize, raw: f64| {
        let v = TwoFloat::from(raw);
        if j == k && index == p {
            v + offset
        } else {
            v
        }
    };

    let mut norms = Vec::new();
    let mut outputs = Vec::new();
    for (j, rule) in bank.rules().iter().enumerate().filter(|(j, _)| active[*j]) {
        let mut squared = TwoFloat::from(0.0);
        for i in 0..d {
            let m = value(j, i, rule.centers[i]);
            let sigma = value(j, d + i, rule.spreads[i]);
            let u = dd_div(TwoFloat::from(x[i]) - m, sigma);
            let phi = dd_exp(-(u * u));
            squared += phi * phi;
        }
        norms.push(squared.sqrt());
        let theta = |row: usize, class: usize| value(j, 2 * d + row * c + class, rule.consequent[row * c + class]);
        outputs.push(
            (0..c)
                .map(|class| (0..d).fold(theta(0, class), |acc, i| acc + TwoFloat::from(x[i]) * theta(i + 1, class)))
                .collect::<Vec<_>>(),
        );
    }

    let top = norms.iter().copied().fold(norms[0], |a, b| if b > a { b } else { a });
    let weights: Vec<TwoFloat> = norms.iter().map(|&r| dd_exp(r - top)).collect();
    let total = weights.iter().fold(TwoFloat::from(0.0), |acc, &w| acc + w);
    let logits: Vec<TwoFloat> = (0..c)
        .map(|class| {
            weights
                .iter()
                .zip(&outputs)
                .fold(TwoFloat::from(0.0), |acc, (&w, g)| acc + dd_div(w, total) * g[class])
        })
        .collect();

    let ceiling = TwoFloat::from(-PROB_EPS.ln());
    let mut loss = TwoFloat::from(0.0);
    for (i, (&y, &z)) in target.iter().zip(&logits).enumerate() {
        if y == 0.0 {
            continue;
        }
        // -ln p_i = ln(1 + sum_{j != i} exp(z_j - z_i)) stays accurate as p_i -> 1
        let rest = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(TwoFloat::from(0.0), |acc, (_, &zj)| acc + dd_exp(zj - z));
        let nll = dd_ln(TwoFloat::from(1.0) + rest);
        loss += TwoFloat::from(y) * if nll > ceiling { ceiling } else { nll };
    }
    loss
}

/// Central differences `(L(w + step) - L(w - step)) / (2 step)` per scalar
/// parameter, with the loss evaluated in double-double precision. Spreads
/// are perturbed without clamping.
pub fn finite_difference_gradient(
    x: &[f64],
    target: &[f64],
    bank: &RuleBank,
    active: &[bool],
    step: f64,
) -> Result<GradientSet> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {step}")));
    }
    // validates shapes, finiteness and that some rule is active
    fnn::predict(x, bank, active)?;
    let h = TwoFloat::from(step);
    let mut grads = GradientSet::zeros_like(bank);
    for (k, rule) in grads.rules.iter_mut().enumerate() {
        if !active[k] {
            continue;
        }
        for (p, g) in rule.values_mut().enumerate() {
            let up = shifted_loss(x, target, bank, active, k, p, h);
            let down = shifted_loss(x, target, bank, active, k, p, -h);
            *g = f64::from(dd_div(up - down, h * 2.0));
        }
    }
    Ok(grads)
}
