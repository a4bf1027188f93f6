//! Interference cancellation with score-based diffusion sampling.
//!
//! The crate simulates a complex baseband channel with additive interference,
//! MMSE-equalizes it into the real-valued effective model
//! `y = √P_x·W_s·x + √P_z·W_z·z + W_n·n`, and recovers the transmitted signal
//! and the interference jointly by solving the two coupled probability-flow
//! ODEs with a p-order joint predictor-corrector driven by per-step score
//! models and channel-likelihood guidance gradients. Closed-form Gaussian MAP
//! solutions, an error-bound checker and finite-difference gradients are
//! provided as verification oracles.
//!
//! Time convention: `t = 0` is pure noise, `t = T` is clean data. All modules
//! follow it.

pub mod channel;
pub mod error;
pub mod guidance;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use channel::{
    build_effective_matrices, complex_to_real, effective_interference, real_to_complex,
    sample_channel, transmit_and_equalize, ChannelKind, ChannelParams, ChannelRealization,
    EffectiveMatrices, EqualizedObservation, WhichMatrix,
};
pub use num_complex::Complex64;
// Re-exported because dense debug paths expose matrix types.
pub use nalgebra;
pub use error::{Error, Result};
pub use guidance::{
    dps_guidance, exact_gaussian_guidance, gdm_guidance, icdm_guidance, predict_clean,
    projection_guidance, zeta, GuidanceContext, GuidanceMethod,
};
pub use oracle::{
    finite_diff_gradient, gaussian_flow_map, gaussian_map_solve, gaussian_map_solve_dense,
    lambda_min, theorem_bound_check, BoundReport, MapSolution,
};
pub use sampler::{
    icdm_sample, icdm_sample_from, jcg, langevin_solve, pc_correct, pc_predict, unipc_coeffs,
    CoeffSystem, JointGradients, SamplerConfig, SamplerHistory, ScoreSource,
};
pub use schedule::{epsilon_to_score, forward_diffuse, score_to_epsilon, NoiseSchedule};
pub use score::{
    dsm_train, gaussian_epsilon, gmm_epsilon, AffineScoreModel, DsmReport, GaussianMixturePrior,
    GaussianPrior, GaussianScoreModel, GmmScoreModel, ScoreModel,
};
