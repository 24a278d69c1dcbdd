//! Experiment runner: configuration, the cross-validated pipeline, the FedAvg
//! baseline, parameter counts and metrics files.
//!
//! Pipeline per repeat: normalize, inject noise, k-fold split; per fold:
//! Dirichlet-partition the training split, assign test samples to clients with
//! the same class proportions, run ERL (and optionally FedAvg) and record
//! per-client test accuracy after every cooperation round.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datakit::{
    self, dirichlet_partition, inject_noise, kfold_split, normalize_mapminmax, partition_indices, PartitionSpec,
    RawTable,
};
use crate::federation::{erl_run, mean_accuracy, ErlRun, ExperimentConfig, RoundRecord, Variant};
use crate::fnn::{ActivationMatrix, LabeledDataset};
use crate::seed::{derive_seed, rng_for, stream};
use crate::{Error, Result};

/// Number of trainable parameters of a `K`-rule bank: `K (2D + (D+1) C)`.
pub fn param_count(dim: usize, classes: usize, rules: usize) -> usize {
    rules * (2 * dim + (dim + 1) * classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    None,
    FedAvg,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "fedavg" => Ok(Baseline::FedAvg),
            other => Err(Error::InvalidConfig(format!(
                "baseline must be fedavg or none, got {other:?}"
            ))),
        }
    }
}

/// Everything a `run` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub dataset: Option<PathBuf>,
    pub repeats: usize,
    pub baseline: Baseline,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: ExperimentConfig::default(),
            dataset: None,
            repeats: 1,
            baseline: Baseline::None,
            out: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Sets one key. Keys match the CLI flag names; `_` and `-` are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key_norm = key.trim().replace('_', "-");
        let value = value.trim();
        let e = &mut self.experiment;
        match key_norm.as_str() {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "alpha" => e.alpha = parse_value(key, value)?,
            "uncertainty" => e.uncertainty = parse_value(key, value)?,
            "clients" => e.clients = parse_value(key, value)?,
            "rules" => e.initial_rules = parse_value(key, value)?,
            "erl-iters" => e.erl_iterations = parse_value(key, value)?,
            "coop-rounds" => e.coop_rounds = parse_value(key, value)?,
            "beta" => e.beta = parse_value(key, value)?,
            "lr" => e.learning_rate = parse_value(key, value)?,
            "epochs" => e.epochs = parse_value(key, value)?,
            "batch" => e.batch_size = parse_value(key, value)?,
            "folds" => e.folds = parse_value(key, value)?,
            "seed" => e.seed = parse_value(key, value)?,
            "repeats" => self.repeats = parse_value(key, value)?,
            "baseline" => self.baseline = value.parse()?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            cfg.set(key, value).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        // relative dataset paths resolve against the config file's directory
        if let (Some(ds), Some(dir)) = (cfg.dataset.as_mut(), path.parent()) {
            if ds.is_relative() && !ds.exists() {
                *ds = dir.join(&*ds);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if self.repeats < 1 {
            return Err(Error::InvalidConfig("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// One (mode, repeat, fold) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub mode: String,
    pub repeat: usize,
    pub fold: usize,
    pub failed: bool,
    pub error: Option<String>,
    /// Mean per-client test accuracy after the last cooperation round.
    pub final_accuracy: Option<f64>,
    /// Mean per-client test accuracy at the end of each ERL iteration.
    pub iteration_accuracy: Vec<Option<f64>>,
    pub final_client_accuracy: Vec<Option<f64>>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub final_rules: usize,
    pub final_params: usize,
    pub train_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    #[serde(skip)]
    pub rounds: Vec<RoundRecord>,
    #[serde(skip)]
    pub final_activation: Option<ActivationMatrix>,
    #[serde(skip)]
    pub rule_ids: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_final_rules: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: RunConfig,
    pub dim: usize,
    pub classes: usize,
    pub runs: Vec<FoldRun>,
    pub summary: BTreeMap<String, ModeSummary>,
    /// Not written to disk, so metrics files stay byte-reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunMetrics {
    pub fn mode_runs<'a>(&'a self, mode: &'a str) -> impl Iterator<Item = &'a FoldRun> + 'a {
        self.runs.iter().filter(move |r| r.mode == mode)
    }
}

pub const FEDFNN: &str = "fedfnn";
pub const FEDAVG: &str = "fedavg";

/// FedAvg over the same FNN: every status fixed to 1, no evolution.
pub fn fedavg_baseline(
    config: &ExperimentConfig,
    client_datasets: Vec<LabeledDataset>,
    tests: Option<&[LabeledDataset]>,
) -> Result<ErlRun> {
    erl_run(config, Variant::fedavg(), client_datasets, tests)
}

fn summarize(runs: &[FoldRun]) -> ModeSummary {
    let ok: Vec<&FoldRun> = runs.iter().filter(|r| !r.failed).collect();
    let accs: Vec<f64> = ok.iter().filter_map(|r| r.final_accuracy).collect();
    let mean = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
    let std = mean.map(|m| {
        if accs.len() < 2 {
            0.0
        } else {
            (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
        }
    });
    ModeSummary {
        runs: runs.len(),
        failed: runs.len() - ok.len(),
        mean_accuracy: mean,
        std_accuracy: std,
        mean_final_rules: (!ok.is_empty())
            .then(|| ok.iter().map(|r| r.final_rules as f64).sum::<f64>() / ok.len() as f64),
    }
}

fn fold_run(
    mode: &str,
    repeat: usize,
    fold: usize,
    outcome: Result<ErlRun>,
    tests: &[LabeledDataset],
    train_sizes: Vec<usize>,
    coop_rounds: usize,
) -> Result<FoldRun> {
    let mut run = FoldRun {
        mode: mode.to_string(),
        repeat,
        fold,
        failed: false,
        error: None,
        final_accuracy: None,
        iteration_accuracy: Vec::new(),
        final_client_accuracy: Vec::new(),
        per_class_accuracy: Vec::new(),
        final_rules: 0,
        final_params: 0,
        train_sizes,
        test_sizes: tests.iter().map(LabeledDataset::len).collect(),
        rounds: Vec::new(),
        final_activation: None,
        rule_ids: Vec::new(),
    };
    match outcome {
        Ok(erl) => {
            let server = &erl.federation.server;
            run.final_accuracy = erl.rounds.last().and_then(|r| r.mean_accuracy);
            run.final_client_accuracy = erl
                .rounds
                .last()
                .map(|r| r.test_accuracy.clone())
                .unwrap_or_default();
            run.iteration_accuracy = erl
                .rounds
                .chunks(coop_rounds)
                .map(|it| it.last().and_then(|r| r.mean_accuracy))
                .collect();
            run.per_class_accuracy = erl.federation.per_class_accuracy(tests)?;
            run.final_rules = server.bank.len();
            run.final_params = server.bank.param_count();
            run.final_activation = Some(server.activation.clone());
            run.rule_ids = server.bank.ids();
            run.rounds = erl.rounds;
        }
        Err(e) if e.is_divergence() => {
            eprintln!("warning: {mode} repeat {repeat} fold {fold} diverged and is excluded: {e}");
            run.failed = true;
            run.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(run)
}

/// Runs the full cross-validated protocol on an already normalized dataset.
pub fn run_on_dataset(cfg: &RunConfig, dataset: &LabeledDataset) -> Result<RunMetrics> {
    cfg.validate()?;
    let started = Instant::now();
    let exp = &cfg.experiment;
    let mut runs = Vec::new();
    for repeat in 0..cfg.repeats {
        let repeat_seed = derive_seed(exp.seed, &[stream::REPEAT, repeat as u64]);
        let noisy = inject_noise(dataset, exp.uncertainty, derive_seed(repeat_seed, &[stream::NOISE]))?;
        let splits = kfold_split(&noisy, exp.folds, derive_seed(repeat_seed, &[stream::KFOLD]))?;
        for (fold, (train, test)) in splits.into_iter().enumerate() {
            let fold_seed = derive_seed(repeat_seed, &[stream::FOLD, fold as u64]);
            let spec = PartitionSpec {
                alpha: exp.alpha,
                clients: exp.clients,
                seed: derive_seed(fold_seed, &[stream::PARTITION]),
            };
            let (train_sets, proportions) = dirichlet_partition(&train, &spec)?;
            let test_sets: Vec<LabeledDataset> = partition_indices(
                &test,
                &proportions,
                derive_seed(fold_seed, &[stream::TEST_PARTITION]),
                false,
            )?
            .iter()
            .map(|ix| test.subset(ix))
            .collect();
            let train_sizes: Vec<usize> = train_sets.iter().map(LabeledDataset::len).collect();
            let run_cfg = ExperimentConfig {
                seed: fold_seed,
                ..exp.clone()
            };

            let erl = erl_run(&run_cfg, Variant::fedfnn(), train_sets.clone(), Some(&test_sets));
            runs.push(fold_run(
                FEDFNN,
                repeat,
                fold,
                erl,
                &test_sets,
                train_sizes.clone(),
                exp.coop_rounds,
            )?);
            if cfg.baseline == Baseline::FedAvg {
                let base = fedavg_baseline(&run_cfg, train_sets, Some(&test_sets));
                runs.push(fold_run(FEDAVG, repeat, fold, base, &test_sets, train_sizes, exp.coop_rounds)?);
            }
        }
    }
    let mut summary = BTreeMap::new();
    for mode in [FEDFNN, FEDAVG] {
        let mode_runs: Vec<FoldRun> = runs.iter().filter(|r| r.mode == mode).cloned().collect();
        if !mode_runs.is_empty() {
            summary.insert(mode.to_string(), summarize(&mode_runs));
        }
    }
    Ok(RunMetrics {
        config: cfg.clone(),
        dim: dataset.dim(),
        classes: dataset.classes(),
        runs,
        summary,
        wall_time: started.elapsed(),
    })
}

/// Loads the configured CSV, normalizes it and runs the protocol.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no dataset given (set `dataset` or pass --dataset)".into()))?;
    let table = datakit::load_csv(path)?;
    let dataset = normalize_mapminmax(&table)?;
    run_on_dataset(cfg, &dataset)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `summary.json`, `rounds.csv` and one `activation_<mode>_r<repeat>_f<fold>.csv`
/// per successful run. Returns the written paths.
pub fn emit_metrics(metrics: &RunMetrics, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    let mut json = serde_json::to_string_pretty(metrics)?;
    json.push('\n');
    write("summary.json".into(), json)?;

    let mut rounds = String::from("mode,repeat,fold,round,erl_iteration,client,rules,active_rules,train_loss,test_accuracy\n");
    for run in &metrics.runs {
        for r in &run.rounds {
            for q in 0..r.train_loss.len() {
                let _ = writeln!(
                    rounds,
                    "{},{},{},{},{},{},{},{},{},{}",
                    run.mode,
                    run.repeat,
                    run.fold,
                    r.round,
                    r.erl_iteration,
                    q,
                    r.rules,
                    r.active_rules[q],
                    r.train_loss[q],
                    fmt_opt(r.test_accuracy.get(q).copied().flatten()),
                );
            }
        }
    }
    write("rounds.csv".into(), rounds)?;

    for run in &metrics.runs {
        let Some(act) = &run.final_activation else { continue };
        let mut body = String::from("client");
        for id in &run.rule_ids {
            let _ = write!(body, ",rule_{id}");
        }
        body.push('\n');
        for (q, row) in act.rows().enumerate() {
            let _ = write!(body, "{q}");
            for &bit in row {
                body.push_str(if bit { ",1" } else { ",0" });
            }
            body.push('\n');
        }
        write(
            format!("activation_{}_r{}_f{}.csv", run.mode, run.repeat, run.fold),
            body,
        )?;
    }
    Ok(written)
}

/// Isotropic Gaussian blobs with centers drawn uniformly from `[-spread, spread]^D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub center_spread: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Synthetic labelled table; samples are assigned to classes round-robin.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<RawTable> {
    use rand::Rng;
    if spec.classes == 0 || spec.dim == 0 || spec.samples == 0 {
        return Err(Error::InvalidConfig("blobs need samples, dim and classes >= 1".into()));
    }
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::InvalidConfig(format!("noise std {}: {e}", spec.noise_std)))?;
    let mut rng = rng_for(spec.seed, &[]);
    let centers: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| rng.random_range(-spec.center_spread..=spec.center_spread))
        .collect();
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        for j in 0..spec.dim {
            features.push(centers[c * spec.dim + j] + noise.sample(&mut rng));
        }
        labels.push(c);
    }
    Ok(RawTable {
        header: None,
        features,
        labels,
        label_names: (0..spec.classes).map(|c| c.to_string()).collect(),
        dim: spec.dim,
    })
}

/// CSV text for a [`RawTable`], label names in the last column.
pub fn table_to_csv(table: &RawTable) -> String {
    let mut out = String::new();
    for (row, &y) in table.features.chunks(table.dim).zip(&table.labels) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        out.push_str(&table.label_names[y]);
        out.push('\n');
    }
    out
}

/// Mean of the final accuracies of every run of `mode`.
pub fn mean_final_accuracy(metrics: &RunMetrics, mode: &str) -> Option<f64> {
    let accs: Vec<Option<f64>> = metrics.mode_runs(mode).map(|r| r.final_accuracy).collect();
    mean_accuracy(&accs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(7, 4, 15), 690);
        assert_eq!(param_count(128, 6, 15), 15_450);
        assert_eq!(param_count(10, 2, 15), 630);
    }

    #[test]
    fn config_parsing_and_overrides() {
        let text = "# demo\nclients = 3\nrules=4\nerl_iters = 2 # inline\ncoop-rounds = 5\nbaseline = fedavg\nlr = 0.1\n";
        let mut cfg = RunConfig::parse(text, "c.cfg").unwrap();
        assert_eq!(cfg.experiment.clients, 3);
        assert_eq!(cfg.experiment.initial_rules, 4);
        assert_eq!(cfg.experiment.erl_iterations, 2);
        assert_eq!(cfg.experiment.coop_rounds, 5);
        assert_eq!(cfg.baseline, Baseline::FedAvg);
        assert_eq!(cfg.experiment.beta, 0.7);
        cfg.set("beta", "0.5").unwrap();
        assert_eq!(cfg.experiment.beta, 0.5);

        let err = RunConfig::parse("clients = x\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:1"), "{err}");
        assert!(RunConfig::parse("mystery = 1\n", "c").is_err());
        assert!(RunConfig::parse("no equals sign\n", "c").is_err());
        assert!(RunConfig::parse("baseline = moon\n", "c").is_err());
    }

    #[test]
    fn defaults_follow_experimental_protocol() {
        let cfg = RunConfig::default();
        let e = &cfg.experiment;
        assert_eq!(
            (e.clients, e.initial_rules, e.erl_iterations, e.coop_rounds, e.folds),
            (5, 15, 15, 10, 5)
        );
        assert_eq!(e.beta, 0.7);
    }

    #[test]
    fn blobs_are_reproducible_and_balanced() {
        let spec = BlobSpec {
            samples: 60,
            dim: 3,
            classes: 4,
            center_spread: 1.0,
            noise_std: 0.5,
            seed: 2,
        };
        let a = gaussian_blobs(&spec).unwrap();
        assert_eq!(a, gaussian_blobs(&spec).unwrap());
        let counts = normalize_mapminmax(&a).unwrap().class_counts();
        assert_eq!(counts, vec![15, 15, 15, 15]);
        let round_trip = datakit::parse_csv(&table_to_csv(&a), "mem").unwrap();
        assert_eq!(round_trip.labels, a.labels);
        assert_eq!(round_trip.features, a.features);
    }
}
