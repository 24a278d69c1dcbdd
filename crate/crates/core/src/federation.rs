//! The federated server and the evolutionary rule learning loop.
//!
//! One ERL iteration is `coop_rounds` cooperation rounds (broadcast, local
//! training, activation-weighted rule averaging) followed by one evolution
//! stage (status update from contribution factors, rule spawning, pruning).
//!
//! Server-side operations only see what clients report: trained rule banks,
//! sample counts, losses and contribution factors. Raw samples stay inside
//! [`ClientState`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fnn::{self, accuracy, firing_strengths, ActivationMatrix, LabeledDataset, Rule, RuleBank};
use crate::seed::{derive_seed, rng_for, stream};
use crate::trainer::{local_train, TrainConfig};
use crate::{Error, Result};

/// Hyperparameters of one federated experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub initial_rules: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Cooperation rounds per ERL iteration.
    pub coop_rounds: usize,
    pub erl_iterations: usize,
    pub beta: f64,
    /// Dirichlet concentration for label skew.
    pub alpha: f64,
    /// Fraction of samples perturbed with Gaussian noise.
    pub uncertainty: f64,
    pub seed: u64,
    pub folds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            clients: 5,
            initial_rules: 15,
            epochs: 1,
            learning_rate: 0.05,
            batch_size: 64,
            coop_rounds: 10,
            erl_iterations: 15,
            beta: 0.7,
            alpha: 0.5,
            uncertainty: 0.1,
            seed: 0,
            folds: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.clients < 1 {
            return fail("clients must be at least 1".into());
        }
        if self.initial_rules < 1 {
            return fail("rules must be at least 1".into());
        }
        if self.coop_rounds < 1 {
            return fail("coop-rounds must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch must be at least 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.uncertainty) {
            return fail(format!("uncertainty must lie in [0, 1], got {}", self.uncertainty));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.folds < 2 {
            return fail("folds must be at least 2".into());
        }
        Ok(())
    }
}

/// Which parts of ERL are switched on. [`Variant::fedfnn`] is the full method;
/// [`Variant::fedavg`] freezes every status at 1 and never evolves, which turns
/// activation-weighted averaging into size-weighted FedAvg.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub all_active_init: bool,
    pub evolution: bool,
    pub spawning: bool,
}

impl Variant {
    pub fn fedfnn() -> Self {
        Variant {
            all_active_init: false,
            evolution: true,
            spawning: true,
        }
    }

    pub fn fedavg() -> Self {
        Variant {
            all_active_init: true,
            evolution: false,
            spawning: false,
        }
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub bank: RuleBank,
    pub loss: f64,
    pub samples: usize,
}

/// A client: private data plus its per-round training-loss history.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    dataset: LabeledDataset,
    pub loss_history: Vec<f64>,
}

impl ClientState {
    pub fn new(id: usize, dataset: LabeledDataset) -> Self {
        ClientState {
            id,
            dataset,
            loss_history: Vec::new(),
        }
    }

    pub fn samples(&self) -> usize {
        self.dataset.len()
    }

    pub fn train(&self, bank: &RuleBank, active: &[bool], cfg: &TrainConfig) -> Result<ClientUpdate> {
        let (bank, loss) = local_train(&self.dataset, bank, active, cfg)?;
        Ok(ClientUpdate {
            bank,
            loss,
            samples: self.dataset.len(),
        })
    }

    /// Mean firing strength of every rule over this client's samples.
    pub fn contribution_factors(&self, bank: &RuleBank, active: &[bool]) -> Result<Vec<f64>> {
        contribution_factors(&self.dataset, bank, active)
    }
}

pub fn contribution_factors(dataset: &LabeledDataset, bank: &RuleBank, active: &[bool]) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pi = vec![0.0; bank.len()];
    for (x, _) in dataset.iter() {
        for (p, h) in pi.iter_mut().zip(firing_strengths(x, bank, active)?) {
            *p += h;
        }
    }
    let n = dataset.len() as f64;
    pi.iter_mut().for_each(|p| *p /= n);
    Ok(pi)
}

/// Activation-weighted average of rule `k` across the clients that use it.
///
/// Weights are `N^q s_k^q / sum_q N^q s_k^q`. When no client uses the rule,
/// `previous` is returned unchanged.
pub fn aggregate_rule(
    k: usize,
    local_banks: &[&RuleBank],
    activation_column: &[bool],
    sizes: &[usize],
    previous: &Rule,
) -> Rule {
    assert_eq!(local_banks.len(), activation_column.len());
    assert_eq!(local_banks.len(), sizes.len());
    let gamma: usize = sizes
        .iter()
        .zip(activation_column)
        .filter(|(_, &a)| a)
        .map(|(&n, _)| n)
        .sum();
    if gamma == 0 {
        return previous.clone();
    }
    let mut out = previous.clone();
    out.params_mut().for_each(|w| *w = 0.0);
    for ((bank, &active), &n) in local_banks.iter().zip(activation_column).zip(sizes) {
        if !active || n == 0 {
            continue;
        }
        let weight = n as f64 / gamma as f64;
        for (w, v) in out.params_mut().zip(bank.rule(k).params()) {
            *w += weight * v;
        }
    }
    out.clamp_spreads();
    out
}

/// `beta * sum_k s_k pi_k / K^q`.
pub fn activation_threshold(pi: &[f64], active: &[bool], beta: f64) -> Result<f64> {
    let active_count = active.iter().filter(|&&a| a).count();
    if active_count == 0 {
        return Err(Error::NoActiveRules);
    }
    let mass: f64 = pi.iter().zip(active).filter(|(_, &a)| a).map(|(p, _)| p).sum();
    Ok(beta * mass / active_count as f64)
}

/// `s_k = 1` iff `pi_k > threshold`.
pub fn update_statuses(pi: &[f64], threshold: f64) -> Vec<bool> {
    pi.iter().map(|&p| p > threshold).collect()
}

/// Mean loss increment over the last `window` rounds, summed term by term.
/// `None` when the history holds fewer than `window + 1` entries.
pub fn mean_loss_increment(history: &[f64], window: usize) -> Option<f64> {
    if window == 0 || history.len() < window + 1 {
        return None;
    }
    let t = history.len() - 1;
    let sum: f64 = (1..=window)
        .map(|l| (history[t + 1 - l] - history[t - l]) / window as f64)
        .sum();
    Some(sum)
}

/// Same quantity as [`mean_loss_increment`] via telescoping: `(l(t) - l(t-L)) / L`.
pub fn mean_loss_increment_telescoped(history: &[f64], window: usize) -> Option<f64> {
    if window == 0 || history.len() < window + 1 {
        return None;
    }
    let t = history.len() - 1;
    Some((history[t] - history[t - window]) / window as f64)
}

/// Self-evaluation: the loss trend over the last `window` rounds is upward.
pub fn stagnation_check(history: &[f64], window: usize) -> bool {
    mean_loss_increment(history, window).is_some_and(|inc| inc > 0.0)
}

/// Peer evaluation: this client's loss is strictly above the mean.
pub fn underperformance_check(client_loss: f64, all_losses: &[f64]) -> bool {
    if all_losses.is_empty() {
        return false;
    }
    let mean = all_losses.iter().sum::<f64>() / all_losses.len() as f64;
    client_loss - mean > 0.0
}

/// What the server learns from client `q` before an evolution stage.
#[derive(Clone, Debug)]
pub struct EvolutionReport {
    pub contributions: Vec<f64>,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionOutcome {
    /// `(client, rule id)` pairs switched off.
    pub deactivated: Vec<(usize, u64)>,
    /// `(client, new rule id)` pairs.
    pub spawned: Vec<(usize, u64)>,
    pub pruned: Vec<u64>,
}

/// Global rules, statuses and round counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub bank: RuleBank,
    pub activation: ActivationMatrix,
    pub round: usize,
    pub beta: f64,
    pub coop_rounds: usize,
    pub seed: u64,
}

impl ServerState {
    pub fn new(bank: RuleBank, activation: ActivationMatrix, beta: f64, coop_rounds: usize, seed: u64) -> Result<Self> {
        if activation.rules() != bank.len() {
            return Err(Error::DimensionMismatch {
                what: "activation columns",
                expected: bank.len(),
                actual: activation.rules(),
            });
        }
        Ok(ServerState {
            bank,
            activation,
            round: 0,
            beta,
            coop_rounds,
            seed,
        })
    }

    pub fn clients(&self) -> usize {
        self.activation.clients()
    }

    /// Replaces every global rule by its activation-weighted average.
    pub fn aggregate(&mut self, updates: &[ClientUpdate]) {
        let banks: Vec<&RuleBank> = updates.iter().map(|u| &u.bank).collect();
        let sizes: Vec<usize> = updates.iter().map(|u| u.samples).collect();
        for k in 0..self.bank.len() {
            let column = self.activation.column(k);
            let rule = aggregate_rule(k, &banks, &column, &sizes, self.bank.rule(k));
            self.bank.replace_rule(k, rule);
        }
    }

    /// Adds a randomly initialized rule that only client `q` uses.
    pub fn spawn_rule(&mut self, q: usize) -> u64 {
        let mut rng = rng_for(self.seed, &[stream::SPAWN, self.round as u64, q as u64]);
        let k = self.bank.spawn(&mut rng);
        let mut column = vec![false; self.clients()];
        column[q] = true;
        self.activation.push_column(&column);
        self.bank.rule(k).id
    }

    /// Drops every rule no client uses; returns the removed ids.
    pub fn prune_rules(&mut self) -> Result<Vec<u64>> {
        let keep: Vec<bool> = (0..self.bank.len())
            .map(|k| self.activation.column_sum(k) > 0)
            .collect();
        if !keep.iter().any(|&b| b) {
            return Err(Error::EmptyRuleBank);
        }
        let removed = self
            .bank
            .rules()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| !k)
            .map(|(r, _)| r.id)
            .collect();
        self.bank.retain_mask(&keep);
        self.activation.retain_columns(&keep);
        Ok(removed)
    }

    /// Status update for every client, then spawning, then global pruning.
    pub fn evolve(&mut self, reports: &[EvolutionReport], spawning: bool) -> Result<EvolutionOutcome> {
        assert_eq!(reports.len(), self.clients());
        let mut outcome = EvolutionOutcome::default();
        let latest: Vec<f64> = reports
            .iter()
            .map(|r| r.loss_history.last().copied().unwrap_or(f64::NAN))
            .collect();

        for (q, report) in reports.iter().enumerate() {
            let row = self.activation.row(q).to_vec();
            let k_before = report.contributions.len();
            let threshold = activation_threshold(&report.contributions, &row[..k_before], self.beta)?;
            let statuses = update_statuses(&report.contributions, threshold);
            for (k, (&old, &new)) in row.iter().zip(&statuses).enumerate() {
                if old && !new {
                    outcome.deactivated.push((q, self.bank.rule(k).id));
                }
                self.activation.set(q, k, new);
            }

            let stagnating = stagnation_check(&report.loss_history, self.coop_rounds);
            let lagging = underperformance_check(latest[q], &latest);
            let starved = self.activation.row_sum(q) == 0;
            if starved || (spawning && stagnating && lagging) {
                let id = self.spawn_rule(q);
                outcome.spawned.push((q, id));
            }
        }

        outcome.pruned = self.prune_rules()?;
        Ok(outcome)
    }
}

/// Server plus clients.
#[derive(Clone, Debug)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub config: ExperimentConfig,
    pub variant: Variant,
}

impl Federation {
    pub fn new(config: &ExperimentConfig, variant: Variant, datasets: Vec<LabeledDataset>) -> Result<Self> {
        config.validate()?;
        if datasets.len() != config.clients {
            return Err(Error::DimensionMismatch {
                what: "client datasets",
                expected: config.clients,
                actual: datasets.len(),
            });
        }
        let first = &datasets[0];
        let (dim, classes) = (first.dim(), first.classes());
        for ds in &datasets {
            if ds.is_empty() {
                return Err(Error::EmptyDataset);
            }
            if ds.dim() != dim || ds.classes() != classes {
                return Err(Error::DimensionMismatch {
                    what: "client dataset shape",
                    expected: dim,
                    actual: ds.dim(),
                });
            }
        }
        let bank = RuleBank::random(
            dim,
            classes,
            config.initial_rules,
            &mut rng_for(config.seed, &[stream::INIT_RULES]),
        );
        let activation = if variant.all_active_init {
            ActivationMatrix::filled(config.clients, config.initial_rules, true)
        } else {
            ActivationMatrix::random(
                config.clients,
                config.initial_rules,
                &mut rng_for(config.seed, &[stream::INIT_ACTIVATION]),
            )
        };
        let server = ServerState::new(bank, activation, config.beta, config.coop_rounds, config.seed)?;
        let clients = datasets
            .into_iter()
            .enumerate()
            .map(|(q, ds)| ClientState::new(q, ds))
            .collect();
        Ok(Federation {
            server,
            clients,
            config: config.clone(),
            variant,
        })
    }

    fn train_config(&self, q: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.config.epochs,
            learning_rate: self.config.learning_rate,
            batch_size: self.config.batch_size,
            seed: derive_seed(
                self.config.seed,
                &[stream::CLIENT_TRAIN, q as u64, self.server.round as u64],
            ),
        }
    }

    /// Broadcast, train every client in parallel, record losses, aggregate.
    /// Returns the clients' round-end training losses.
    pub fn cooperation_round(&mut self) -> Result<Vec<f64>> {
        let round = self.server.round;
        let server = &self.server;
        let updates: Vec<ClientUpdate> = self
            .clients
            .par_iter()
            .map(|client| {
                client
                    .train(&server.bank, server.activation.row(client.id), &self.train_config(client.id))
                    .map_err(|e| Error::Client {
                        client: client.id,
                        round,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        let losses: Vec<f64> = updates.iter().map(|u| u.loss).collect();
        for (client, &loss) in self.clients.iter_mut().zip(&losses) {
            client.loss_history.push(loss);
        }
        self.server.aggregate(&updates);
        self.server.round += 1;
        Ok(losses)
    }

    pub fn evolution_reports(&self) -> Result<Vec<EvolutionReport>> {
        let server = &self.server;
        self.clients
            .par_iter()
            .map(|client| {
                Ok(EvolutionReport {
                    contributions: client.contribution_factors(&server.bank, server.activation.row(client.id))?,
                    loss_history: client.loss_history.clone(),
                })
            })
            .collect()
    }

    pub fn evolution_stage(&mut self) -> Result<EvolutionOutcome> {
        let reports = self.evolution_reports()?;
        self.server.evolve(&reports, self.variant.spawning)
    }

    /// Per-client test accuracy of each client's personalized model.
    pub fn evaluate(&self, tests: &[LabeledDataset]) -> Result<Vec<Option<f64>>> {
        assert_eq!(tests.len(), self.clients.len());
        tests
            .par_iter()
            .enumerate()
            .map(|(q, ds)| accuracy(ds, &self.server.bank, self.server.activation.row(q)))
            .collect()
    }

    /// Per-class accuracy over the union of the clients' test sets, each
    /// sample judged by its own client's model. `None` for absent classes.
    pub fn per_class_accuracy(&self, tests: &[LabeledDataset]) -> Result<Vec<Option<f64>>> {
        let classes = self.server.bank.classes();
        let mut hits = vec![0usize; classes];
        let mut totals = vec![0usize; classes];
        for (q, ds) in tests.iter().enumerate() {
            let row = self.server.activation.row(q);
            for (x, y) in ds.iter() {
                totals[y] += 1;
                if fnn::predict_class(x, &self.server.bank, row)? == y {
                    hits[y] += 1;
                }
            }
        }
        Ok(hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect())
    }
}

/// Metrics recorded after each cooperation round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub erl_iteration: usize,
    pub rules: usize,
    pub active_rules: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub test_accuracy: Vec<Option<f64>>,
    pub mean_accuracy: Option<f64>,
    #[serde(skip)]
    pub activation: Option<ActivationMatrix>,
}

/// Mean over the clients that have a test accuracy.
pub fn mean_accuracy(accuracies: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = accuracies.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ErlRun {
    pub federation: Federation,
    pub rounds: Vec<RoundRecord>,
    pub evolutions: Vec<EvolutionOutcome>,
}

/// Full ERL: `erl_iterations` x (`coop_rounds` cooperation rounds + one
/// evolution stage). With `tests`, every round also records per-client test
/// accuracy.
pub fn erl_run(
    config: &ExperimentConfig,
    variant: Variant,
    train_sets: Vec<LabeledDataset>,
    tests: Option<&[LabeledDataset]>,
) -> Result<ErlRun> {
    let mut federation = Federation::new(config, variant, train_sets)?;
    if let Some(tests) = tests {
        if tests.len() != config.clients {
            return Err(Error::DimensionMismatch {
                what: "client test sets",
                expected: config.clients,
                actual: tests.len(),
            });
        }
    }
    let mut rounds = Vec::new();
    let mut evolutions = Vec::new();
    for iteration in 0..config.erl_iterations {
        for _ in 0..config.coop_rounds {
            let train_loss = federation.cooperation_round()?;
            let test_accuracy = match tests {
                Some(tests) => federation.evaluate(tests)?,
                None => vec![None; config.clients],
            };
            let activation = &federation.server.activation;
            rounds.push(RoundRecord {
                round: federation.server.round - 1,
                erl_iteration: iteration,
                rules: federation.server.bank.len(),
                active_rules: (0..config.clients).map(|q| activation.row_sum(q)).collect(),
                mean_accuracy: mean_accuracy(&test_accuracy),
                train_loss,
                test_accuracy,
                activation: Some(activation.clone()),
            });
        }
        if variant.evolution {
            evolutions.push(federation.evolution_stage()?);
        }
    }
    Ok(ErlRun {
        federation,
        rounds,
        evolutions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rule_with(id: u64, value: f64) -> Rule {
        Rule::new(id, vec![value; 2], vec![value; 2], vec![value; 6], 2).unwrap()
    }

    fn bank_of(values: &[f64]) -> RuleBank {
        RuleBank::new(
            2,
            2,
            values.iter().enumerate().map(|(k, &v)| rule_with(k as u64, v)).collect(),
        )
        .unwrap()
    }

    fn blobs(seed: u64, n: usize, classes: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % classes;
            let centre = -0.8 + 1.6 * c as f64 / (classes.max(2) - 1) as f64;
            features.push(centre + rng.random_range(-0.2..0.2));
            features.push(-centre + rng.random_range(-0.2..0.2));
            labels.push(c);
        }
        LabeledDataset::new(features, labels, 2, classes).unwrap()
    }

    fn small_config(clients: usize) -> ExperimentConfig {
        ExperimentConfig {
            clients,
            initial_rules: 3,
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 8,
            coop_rounds: 2,
            erl_iterations: 2,
            beta: 0.7,
            seed: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn aggregate_examples() {
        let prev = bank_of(&[9.0]);
        let a = bank_of(&[1.0]);
        let b = bank_of(&[2.0]);
        let out = aggregate_rule(0, &[&a, &b], &[false, true], &[100, 300], prev.rule(0));
        assert_eq!(&out, b.rule(0));

        let out = aggregate_rule(0, &[&a, &b], &[true, true], &[100, 300], prev.rule(0));
        for w in out.params() {
            assert!((w - 1.75).abs() < 1e-15);
        }

        let out = aggregate_rule(0, &[&a, &b], &[false, false], &[100, 300], prev.rule(0));
        assert_eq!(&out, prev.rule(0));
    }

    #[test]
    fn threshold_and_status_examples() {
        let t = activation_threshold(&[0.6, 0.4, 0.0], &[true, true, false], 0.7).unwrap();
        assert!((t - 0.35).abs() < 1e-15);
        assert_eq!(activation_threshold(&[0.6, 0.4], &[true, true], 0.0).unwrap(), 0.0);
        let single = activation_threshold(&[1.0], &[true], 0.7).unwrap();
        assert!((single - 0.7).abs() < 1e-15);
        assert_eq!(update_statuses(&[1.0], single), vec![true]);
        assert!(activation_threshold(&[0.5, 0.5], &[false, false], 0.7).is_err());

        assert_eq!(update_statuses(&[0.6, 0.4], 0.35), vec![true, true]);
        assert_eq!(update_statuses(&[0.2, 0.8], 0.35), vec![false, true]);
        assert_eq!(update_statuses(&[0.35], 0.35), vec![false]);
    }

    #[test]
    fn stagnation_examples() {
        assert!(stagnation_check(&[0.5, 0.6], 1));
        assert!(!stagnation_check(&[0.6, 0.5], 1));
        assert!(stagnation_check(&[0.5, 0.55, 0.6], 2));
        let inc = mean_loss_increment(&[0.5, 0.55, 0.6], 2).unwrap();
        assert!((inc - 0.05).abs() < 1e-12);
        assert!(!stagnation_check(&[0.5, 0.9], 2));
        assert!(!stagnation_check(&[], 1));
    }

    #[test]
    fn underperformance_examples() {
        let losses = [0.2, 0.4, 0.6, 0.8, 1.0];
        assert!(underperformance_check(1.0, &losses));
        assert!(!underperformance_check(0.2, &losses));
        let flat = [0.3; 4];
        assert!(flat.iter().all(|&l| !underperformance_check(l, &flat)));
    }

    fn server(rows: Vec<Vec<bool>>) -> ServerState {
        let k = rows[0].len();
        let bank = RuleBank::random(2, 2, k, &mut ChaCha8Rng::seed_from_u64(1));
        ServerState::new(bank, ActivationMatrix::from_rows(rows).unwrap(), 0.7, 2, 42).unwrap()
    }

    #[test]
    fn spawn_examples() {
        let mut s = server(vec![vec![true, false], vec![false, true], vec![true, true]]);
        let id = s.spawn_rule(0);
        assert_eq!(s.bank.len(), 3);
        assert_eq!(s.activation.column(2), vec![true, false, false]);
        assert_eq!(s.bank.rule(2).id, id);
        s.spawn_rule(2);
        assert_eq!(s.activation.column(3), vec![false, false, true]);
        assert_ne!(s.bank.rule(3).id, id);

        let mut a = server(vec![vec![true]]);
        let mut b = server(vec![vec![true]]);
        a.spawn_rule(0);
        b.spawn_rule(0);
        assert_eq!(a.bank, b.bank);
    }

    #[test]
    fn prune_examples() {
        let mut s = server(vec![vec![true, false, false], vec![false, false, true]]);
        let ids = s.bank.ids();
        let removed = s.prune_rules().unwrap();
        assert_eq!(removed, vec![ids[1]]);
        assert_eq!(s.bank.ids(), vec![ids[0], ids[2]]);
        assert_eq!(s.activation.rules(), 2);

        let before = s.clone();
        assert!(s.prune_rules().unwrap().is_empty());
        assert_eq!(s, before);

        let mut dead = server(vec![vec![false, false]]);
        assert!(matches!(dead.prune_rules(), Err(Error::EmptyRuleBank)));
    }

    #[test]
    fn zero_row_spawns_exactly_once() {
        let mut s = server(vec![vec![true, true], vec![true, true]]);
        s.beta = 1.0;
        let reports = vec![
            EvolutionReport {
                contributions: vec![0.5, 0.5],
                loss_history: vec![0.4],
            },
            EvolutionReport {
                contributions: vec![0.7, 0.3],
                loss_history: vec![0.4],
            },
        ];
        let out = s.evolve(&reports, true).unwrap();
        assert_eq!(out.spawned.len(), 1);
        assert_eq!(out.spawned[0].0, 0);
        assert_eq!(s.activation.row_sum(0), 1);
        assert_eq!(s.activation.rules(), s.bank.len());
    }

    #[test]
    fn decreasing_losses_never_grow_the_bank() {
        let data: Vec<LabeledDataset> = (0..3).map(|q| blobs(q, 30, 2)).collect();
        let mut fed = Federation::new(&small_config(3), Variant::fedfnn(), data).unwrap();
        for _ in 0..2 {
            fed.cooperation_round().unwrap();
        }
        for (i, c) in fed.clients.iter_mut().enumerate() {
            c.loss_history = vec![1.0 + i as f64, 0.9 + i as f64, 0.8 + i as f64];
        }
        let k_before = fed.server.bank.len();
        let out = fed.evolution_stage().unwrap();
        assert!(out.spawned.is_empty());
        assert!(fed.server.bank.len() <= k_before);
    }

    #[test]
    fn deactivated_rule_has_zero_contribution() {
        let ds = blobs(3, 20, 2);
        let bank = RuleBank::random(2, 2, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let active = [true, false, true, true];
        let pi = contribution_factors(&ds, &bank, &active).unwrap();
        assert_eq!(pi[1], 0.0);
        // masked pi can never clear a positive threshold
        let thr = activation_threshold(&pi, &active, 0.7).unwrap();
        assert!(!update_statuses(&pi, thr)[1]);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contribution_examples() {
        let ds = blobs(4, 10, 2);
        let single = RuleBank::random(2, 2, 1, &mut ChaCha8Rng::seed_from_u64(3));
        let pi = contribution_factors(&ds, &single, &[true]).unwrap();
        assert!((pi[0] - 1.0).abs() < 1e-15);

        let twin = bank_of(&[0.7, 0.7]);
        let pi = contribution_factors(&ds, &twin, &[true, true]).unwrap();
        assert_eq!(pi, vec![0.5, 0.5]);

        let bank = RuleBank::random(2, 2, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let active = [true, true, false];
        let pi = contribution_factors(&ds, &bank, &active).unwrap();
        let mut brute = [0.0; 3];
        for i in 0..ds.len() {
            let h = firing_strengths(ds.sample(i), &bank, &active).unwrap();
            for k in 0..3 {
                brute[k] += h[k] / ds.len() as f64;
            }
        }
        for k in 0..3 {
            assert!((pi[k] - brute[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_round_adopts_local_bank() {
        let ds = blobs(5, 40, 2);
        let mut fed = Federation::new(&small_config(1), Variant::fedfnn(), vec![ds]).unwrap();
        let cfg = fed.train_config(0);
        let local = fed.clients[0]
            .train(&fed.server.bank, fed.server.activation.row(0), &cfg)
            .unwrap();
        fed.cooperation_round().unwrap();
        assert_eq!(fed.server.bank, local.bank);
        assert_eq!(fed.clients[0].loss_history, vec![local.loss]);
        assert_eq!(fed.server.round, 1);
    }

    #[test]
    fn two_client_round_matches_weighted_mean() {
        let data = vec![blobs(6, 30, 2), blobs(7, 50, 2)];
        let mut fed = Federation::new(&small_config(2), Variant::fedfnn(), data).unwrap();
        let before = fed.server.bank.clone();
        let updates: Vec<ClientUpdate> = (0..2)
            .map(|q| {
                fed.clients[q]
                    .train(&before, fed.server.activation.row(q), &fed.train_config(q))
                    .unwrap()
            })
            .collect();
        fed.cooperation_round().unwrap();
        for k in 0..before.len() {
            let col = fed.server.activation.column(k);
            let gamma: f64 = (0..2).filter(|&q| col[q]).map(|q| updates[q].samples as f64).sum();
            let params: Vec<f64> = if gamma == 0.0 {
                before.rule(k).params().copied().collect()
            } else {
                let n = before.rule(k).param_count();
                (0..n)
                    .map(|p| {
                        (0..2)
                            .filter(|&q| col[q])
                            .map(|q| {
                                updates[q].samples as f64 / gamma
                                    * updates[q].bank.rule(k).params().nth(p).unwrap()
                            })
                            .sum()
                    })
                    .collect()
            };
            for (a, b) in fed.server.bank.rule(k).params().zip(&params) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_clients_agree_with_each_one() {
        let ds = blobs(8, 30, 2);
        let mut cfg = small_config(3);
        cfg.seed = 9;
        let mut fed = Federation::new(&cfg, Variant::fedavg(), vec![ds.clone(), ds.clone(), ds]).unwrap();
        let bank0 = fed.server.bank.clone();
        // identical seeds for every client so their local runs coincide
        let shared = TrainConfig {
            seed: 1,
            ..fed.train_config(0)
        };
        let local = fed.clients[0].train(&bank0, fed.server.activation.row(0), &shared).unwrap();
        let updates: Vec<ClientUpdate> = (0..3)
            .map(|q| fed.clients[q].train(&bank0, fed.server.activation.row(q), &shared).unwrap())
            .collect();
        fed.server.aggregate(&updates);
        for (a, b) in fed.server.bank.rules().iter().zip(local.bank.rules()) {
            for (x, y) in a.params().zip(b.params()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn erl_run_counts_rounds_and_keeps_lockstep() {
        let data: Vec<LabeledDataset> = (0..3).map(|q| blobs(10 + q, 40, 3)).collect();
        let cfg = small_config(3);
        let run = erl_run(&cfg, Variant::fedfnn(), data, None).unwrap();
        assert_eq!(run.rounds.len(), cfg.erl_iterations * cfg.coop_rounds);
        assert_eq!(run.federation.server.round, cfg.erl_iterations * cfg.coop_rounds);
        assert_eq!(run.evolutions.len(), cfg.erl_iterations);
        let s = &run.federation.server;
        assert_eq!(s.activation.rules(), s.bank.len());
        for q in 0..3 {
            assert!(s.activation.row_sum(q) >= 1);
            assert_eq!(run.federation.clients[q].loss_history.len(), 4);
        }
        for k in 0..s.bank.len() {
            assert!(s.activation.column_sum(k) >= 1);
        }
        for (i, r) in run.rounds.iter().enumerate() {
            assert_eq!(r.round, i);
        }
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let data: Vec<LabeledDataset> = (0..2).map(|q| blobs(q, 20, 2)).collect();
        let mut cfg = small_config(2);
        cfg.erl_iterations = 0;
        let fresh = Federation::new(&cfg, Variant::fedfnn(), data.clone()).unwrap();
        let run = erl_run(&cfg, Variant::fedfnn(), data, None).unwrap();
        assert!(run.rounds.is_empty());
        assert_eq!(run.federation.server, fresh.server);
    }

    #[test]
    fn degenerate_run_is_centralized_sgd() {
        let ds = blobs(12, 40, 2);
        let mut cfg = small_config(1);
        cfg.coop_rounds = 1;
        cfg.erl_iterations = 1;
        cfg.beta = 0.0;
        let variant = Variant {
            all_active_init: true,
            ..Variant::fedfnn()
        };
        let fresh = Federation::new(&cfg, variant, vec![ds.clone()]).unwrap();
        let expected = local_train(
            &ds,
            &fresh.server.bank,
            fresh.server.activation.row(0),
            &fresh.train_config(0),
        )
        .unwrap();
        let run = erl_run(&cfg, variant, vec![ds], None).unwrap();
        assert!(run.evolutions[0].spawned.is_empty());
        assert_eq!(run.federation.server.bank, expected.0);
        assert_eq!(run.federation.server.activation, fresh.server.activation);
    }

    #[test]
    fn erl_run_is_reproducible() {
        let data: Vec<LabeledDataset> = (0..3).map(|q| blobs(20 + q, 30, 3)).collect();
        let cfg = small_config(3);
        let a = erl_run(&cfg, Variant::fedfnn(), data.clone(), Some(&data)).unwrap();
        let b = erl_run(&cfg, Variant::fedfnn(), data.clone(), Some(&data)).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.federation.server, b.federation.server);
    }

    #[test]
    fn fedavg_never_changes_structure() {
        let data: Vec<LabeledDataset> = (0..3).map(|q| blobs(30 + q, 30, 2)).collect();
        let cfg = small_config(3);
        let run = erl_run(&cfg, Variant::fedavg(), data, None).unwrap();
        assert!(run.rounds.iter().all(|r| r.rules == cfg.initial_rules));
        assert!(run.rounds.iter().all(|r| r.active_rules.iter().all(|&a| a == cfg.initial_rules)));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        for bad in [
            ExperimentConfig { clients: 0, ..Default::default() },
            ExperimentConfig { initial_rules: 0, ..Default::default() },
            ExperimentConfig { coop_rounds: 0, ..Default::default() },
            ExperimentConfig { alpha: 0.0, ..Default::default() },
            ExperimentConfig { uncertainty: 1.5, ..Default::default() },
            ExperimentConfig { beta: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
