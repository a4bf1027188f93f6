//! `icdm` — seeded interference-cancellation experiments from the command line.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use icdm_harness::{
    channel_name, derive_seed, fmt_f64, order_accuracy_experiment, run_point, run_sweep,
    run_trial, trial_rows, write_csv, write_order_csv, ExperimentConfig, TRIAL_HEADER,
};

#[derive(Parser)]
#[command(
    name = "icdm",
    about = "Interference-cancellation diffusion sampling experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each one overrides the config-file key
/// of the same name.
#[derive(Args, Clone)]
struct Overrides {
    /// Flat key = value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channel: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    snr_db: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sinr_db: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    prior_x_mean: Option<f64>,
    #[arg(long)]
    prior_x_var: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    prior_z_mean: Option<f64>,
    #[arg(long)]
    prior_z_var: Option<f64>,
    /// icdm | icdm_exact | dps | gdm | projection | none
    #[arg(long)]
    guidance: Option<String>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma_hat2: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho_max: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path (default: <subcommand>.csv under $ICDM_OUT_DIR or cwd).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn build(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path).with_context(|| format!("config {}", path.display()))?;
        }
        macro_rules! apply {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        apply!(channel, "channel");
        apply!(k, "k");
        apply!(snr_db, "snr_db");
        apply!(sinr_db, "sinr_db");
        apply!(prior_x_mean, "prior_x_mean");
        apply!(prior_x_var, "prior_x_var");
        apply!(prior_z_mean, "prior_z_mean");
        apply!(prior_z_var, "prior_z_var");
        apply!(guidance, "guidance");
        apply!(order, "order");
        apply!(steps, "steps");
        apply!(beta, "beta");
        apply!(gamma, "gamma");
        apply!(sigma_hat2, "sigma_hat2");
        apply!(rho_min, "rho_min");
        apply!(rho_max, "rho_max");
        apply!(trials, "trials");
        apply!(seed, "seed");
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run N seeded trials at one operating point and write per-trial rows.
    Trial(Overrides),
    /// Sweep a SINR grid, aggregating mean/stddev per point.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        sinr_min: f64,
        #[arg(long, default_value_t = 7.0, allow_negative_numbers = true)]
        sinr_max: f64,
        #[arg(long, default_value_t = 1.0)]
        sinr_step: f64,
    },
    /// Convergence-order study on the unconditional Gaussian flow.
    OrderCheck {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated sampler orders.
        #[arg(long, default_value = "1,2")]
        orders: String,
        /// Comma-separated step counts.
        #[arg(long, default_value = "10,20,40,80")]
        step_counts: String,
    },
    /// Train the affine score model with denoising score matching and save
    /// its (t, D_t, c_t) table.
    TrainScore {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 50_000)]
        iters: usize,
        #[arg(long, default_value_t = 4e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// Mean of the N(mean, var) training data.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        data_mean: f64,
        #[arg(long, default_value_t = 1.0)]
        data_var: f64,
    },
    /// Check the estimation-error bound for the closed-form MAP solution.
    BoundCheck(Overrides),
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} entry '{p}'")))
        .collect()
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Trial(overrides) => {
            let cfg = overrides.build()?;
            let results = run_point(&cfg, cfg.sinr_db, 0)?;
            let path = cfg.out_path("trial.csv");
            write_csv(&path, &TRIAL_HEADER, &trial_rows(&results))?;
            let ok: Vec<&_> = results.iter().filter(|r| !r.diverged).collect();
            let mean = ok.iter().map(|r| r.mse_x_db).sum::<f64>() / ok.len().max(1) as f64;
            println!(
                "{} trials ({} diverged), channel {}, guidance {}: mean mse_x = {:.3} dB -> {}",
                results.len(),
                results.len() - ok.len(),
                channel_name(cfg.channel),
                cfg.guidance.as_str(),
                mean,
                path.display()
            );
        }
        Command::Sweep { overrides, sinr_min, sinr_max, sinr_step } => {
            let cfg = overrides.build()?;
            if !(sinr_step > 0.0) || sinr_max < sinr_min {
                bail!("need sinr_min <= sinr_max and sinr_step > 0");
            }
            let mut grid = Vec::new();
            let mut v = sinr_min;
            while v <= sinr_max + 1e-9 {
                grid.push(v);
                v += sinr_step;
            }
            let path = cfg.out_path("sweep.csv");
            let rows = run_sweep(&cfg, &grid, &path)?;
            for r in &rows {
                println!(
                    "sinr {:+5.1} dB: mse_x {:.3} +/- {:.3} dB ({} trials, {} diverged)",
                    r.sinr_db, r.mean_mse_x_db, r.std_mse_x_db, r.trials, r.diverged
                );
            }
            println!("wrote {}", path.display());
        }
        Command::OrderCheck { overrides, orders, step_counts } => {
            let cfg = overrides.build()?;
            let orders: Vec<usize> = parse_list(&orders, "order")?;
            let steps: Vec<usize> = parse_list(&step_counts, "step count")?;
            let rows = order_accuracy_experiment(&orders, &steps, cfg.trials, cfg.seed)?;
            let path = cfg.out_path("order_check.csv");
            write_order_csv(&rows, &path)?;
            for r in &rows {
                println!(
                    "p={} T={:3}: median error {:.3e} (slope {:+.3})",
                    r.order, r.steps, r.median_error, r.fitted_slope
                );
            }
            println!("wrote {}", path.display());
        }
        Command::TrainScore { overrides, iters, lr, batch, data_mean, data_var } => {
            let cfg = overrides.build()?;
            let sched = icdm_core::NoiseSchedule::new(cfg.steps, cfg.rho_min, cfg.rho_max)?;
            let dim = 2 * cfg.k;
            let mut model = icdm_core::AffineScoreModel::zeros(cfg.steps, dim);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 0));
            let report = icdm_core::dsm_train(
                &mut model,
                |r: &mut ChaCha8Rng| {
                    (0..dim)
                        .map(|_| {
                            data_mean
                                + data_var.sqrt()
                                    * rand::Rng::sample::<f64, _>(r, rand_distr::StandardNormal)
                        })
                        .collect()
                },
                &sched,
                iters,
                lr,
                batch,
                &mut rng,
            )?;
            let path = cfg.out_path("score_model.tsv");
            std::fs::write(&path, model.to_table())
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "trained {iters} iterations (final loss {}), model table -> {}",
                fmt_f64(report.final_loss),
                path.display()
            );
        }
        Command::BoundCheck(overrides) => {
            let mut cfg = overrides.build()?;
            cfg.bound_check = true;
            let results: Vec<_> = (0..cfg.trials as u64)
                .map(|i| run_trial(&cfg, derive_seed(cfg.seed, 0, i)))
                .collect::<icdm_core::Result<_>>()?;
            let path = cfg.out_path("bound_check.csv");
            write_csv(&path, &TRIAL_HEADER, &trial_rows(&results))?;
            let holds = results
                .iter()
                .filter(|r| r.bound.as_ref().map(|b| b.holds).unwrap_or(false))
                .count();
            println!(
                "bound held in {}/{} trials, lambda_min >= {:.2e} -> {}",
                holds,
                results.len(),
                results
                    .iter()
                    .filter_map(|r| r.bound.as_ref().map(|b| b.lambda_min))
                    .fold(f64::INFINITY, f64::min),
                path.display()
            );
        }
    }
    Ok(())
}
