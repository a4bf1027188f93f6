//! Experiment harness: configuration, metrics, seeded Monte-Carlo runners and
//! CSV output for the interference-cancellation library.

pub mod config;
pub mod csv;
pub mod metrics;
pub mod runner;

pub use config::{channel_name, ExperimentConfig, PriorSpec};
pub use csv::{fmt_f64, write_csv};
pub use metrics::{mse_db, sinr_to_powers, MSE_FLOOR_DB};
pub use runner::{
    aggregate, derive_seed, draw_scene, dsm_criterion, langevin_vs_map,
    order_accuracy_experiment, run_point,
    run_sweep, run_trial, splitmix64, trial_rows, write_order_csv, OrderRow, SweepRow,
    TrialResult, TrialScene, TRIAL_HEADER,
};
