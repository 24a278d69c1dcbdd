//! FedFNN vs. FedAvg on label-skewed synthetic Gaussian blobs.
//!
//! cargo run --release --example paired_benchmark -- [seeds] [noise_std] [folds] [lr] [epochs] [batch]

use fedfnn::datakit::normalize_mapminmax;
use fedfnn::harness::{gaussian_blobs, mean_final_accuracy, run_on_dataset, Baseline, BlobSpec, RunConfig, FEDAVG, FEDFNN};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> fedfnn::Result<()> {
    let seeds: u64 = arg(1, 10);
    let noise_std: f64 = arg(2, 0.6);
    let folds: usize = arg(3, 5);
    let started = std::time::Instant::now();
    let mut gaps = Vec::new();
    for seed in 0..seeds {
        let table = gaussian_blobs(&BlobSpec {
            samples: 3000,
            dim: 4,
            classes: 6,
            center_spread: 1.0,
            noise_std,
            seed,
        })?;
        let dataset = normalize_mapminmax(&table)?;
        let mut cfg = RunConfig {
            baseline: Baseline::FedAvg,
            ..RunConfig::default()
        };
        cfg.experiment.seed = seed;
        cfg.experiment.folds = folds;
        cfg.experiment.learning_rate = arg(4, cfg.experiment.learning_rate);
        cfg.experiment.epochs = arg(5, cfg.experiment.epochs);
        cfg.experiment.batch_size = arg(6, cfg.experiment.batch_size);
        let metrics = run_on_dataset(&cfg, &dataset)?;
        let fnn = mean_final_accuracy(&metrics, FEDFNN).unwrap_or(f64::NAN);
        let avg = mean_final_accuracy(&metrics, FEDAVG).unwrap_or(f64::NAN);
        let rules = metrics.summary[FEDFNN].mean_final_rules.unwrap_or(f64::NAN);
        let first: Vec<f64> = metrics
            .mode_runs(FEDFNN)
            .filter_map(|r| r.iteration_accuracy.first().copied().flatten())
            .collect();
        let first = first.iter().sum::<f64>() / first.len() as f64;
        println!("seed {seed}: fedfnn {fnn:.4} (iter1 {first:.4}, rules {rules:.1}) fedavg {avg:.4} gap {:+.4}", fnn - avg);
        gaps.push(fnn - avg);
    }
    println!(
        "mean gap {:+.4} in {:.1}s",
        gaps.iter().sum::<f64>() / gaps.len() as f64,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
