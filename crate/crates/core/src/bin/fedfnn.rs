use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedfnn::harness::{self, BlobSpec, RunConfig};

#[derive(Parser)]
#[command(name = "fedfnn", version, about = "Federated fuzzy neural networks with evolutionary rule learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cross-validated federated experiment.
    Run(RunArgs),
    /// Print the parameter count of a K-rule bank.
    Params {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        c: usize,
        #[arg(long)]
        k: usize,
    },
    /// Write a synthetic Gaussian-blob CSV.
    Synth {
        #[arg(long, default_value_t = 3000)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 1.0)]
        center_spread: f64,
        #[arg(long, default_value_t = 0.6)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    uncertainty: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    rules: Option<String>,
    #[arg(long = "erl-iters")]
    erl_iters: Option<String>,
    #[arg(long = "coop-rounds")]
    coop_rounds: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_parser = ["fedavg", "none"])]
    baseline: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        [
            ("dataset", &self.dataset),
            ("alpha", &self.alpha),
            ("uncertainty", &self.uncertainty),
            ("clients", &self.clients),
            ("rules", &self.rules),
            ("erl-iters", &self.erl_iters),
            ("coop-rounds", &self.coop_rounds),
            ("beta", &self.beta),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("folds", &self.folds),
            ("repeats", &self.repeats),
            ("seed", &self.seed),
            ("baseline", &self.baseline),
            ("out", &self.out),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }
}

fn run(args: RunArgs) -> fedfnn::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (key, value) in args.overrides() {
        cfg.set(key, value)?;
    }
    let metrics = harness::run_experiment(&cfg)?;
    for (mode, s) in &metrics.summary {
        println!(
            "{mode}: accuracy {:.4} +/- {:.4} over {} runs ({} failed), mean final rules {:.2}",
            s.mean_accuracy.unwrap_or(f64::NAN),
            s.std_accuracy.unwrap_or(f64::NAN),
            s.runs,
            s.failed,
            s.mean_final_rules.unwrap_or(f64::NAN),
        );
    }
    println!("wall time {:.2}s", metrics.wall_time.as_secs_f64());
    if let Some(out) = &cfg.out {
        let files = harness::emit_metrics(&metrics, out)?;
        println!("wrote {} files to {}", files.len(), out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Params { d, c, k } => {
            println!("{}", harness::param_count(d, c, k));
            Ok(())
        }
        Command::Synth {
            samples,
            dim,
            classes,
            center_spread,
            noise_std,
            seed,
            out,
        } => harness::gaussian_blobs(&BlobSpec {
            samples,
            dim,
            classes,
            center_spread,
            noise_std,
            seed,
        })
        .and_then(|table| {
            std::fs::write(&out, harness::table_to_csv(&table)).map_err(|e| fedfnn::Error::Io {
                path: out.clone(),
                source: e,
            })
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
