//! Experiment configuration: defaults, a flat `key = value` file format, and
//! validation. No nesting; every key can also be overridden from the CLI.

use std::path::{Path, PathBuf};

use icdm_core::{ChannelKind, Error, GuidanceMethod, Result};

/// Per-component Gaussian prior used by the synthetic testbed; expanded to a
/// 2k-component prior at run time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub mean: f64,
    pub var: f64,
}

/// Everything one experiment needs. See `README.md` for the config-file keys.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub channel: ChannelKind,
    pub k: usize,
    pub snr_db: f64,
    pub sinr_db: f64,
    pub prior_x: PriorSpec,
    pub prior_z: PriorSpec,
    pub guidance: GuidanceMethod,
    pub order: usize,
    pub steps: usize,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_hat2: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Check the estimation-error bound per trial; ground truth is then pinned to the
    /// prior means (the regime the bound covers) and the MAP solution is the
    /// checked estimate.
    pub bound_check: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            channel: ChannelKind::Rayleigh,
            k: 64,
            snr_db: 20.0,
            sinr_db: 0.0,
            prior_x: PriorSpec { mean: 0.7, var: 0.01 },
            prior_z: PriorSpec { mean: 0.7, var: 0.01 },
            guidance: GuidanceMethod::Icdm,
            order: 2,
            steps: 40,
            beta: 1.0,
            gamma: 1.0,
            sigma_hat2: 1.0,
            rho_min: -6.0,
            rho_max: 6.0,
            trials: 100,
            seed: 1,
            out: None,
            bound_check: false,
        }
    }
}

fn parse_channel(s: &str) -> Result<ChannelKind> {
    match s.to_ascii_lowercase().as_str() {
        "awgn" => Ok(ChannelKind::Awgn),
        "rayleigh" => Ok(ChannelKind::Rayleigh),
        other => Err(Error::Range(format!("unknown channel '{other}' (awgn|rayleigh)"))),
    }
}

pub fn channel_name(kind: ChannelKind) -> &'static str {
    match kind {
        ChannelKind::Awgn => "awgn",
        ChannelKind::Rayleigh => "rayleigh",
    }
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Range(format!("config key {key}: bad {what} '{v}'"));
        match key {
            "channel" => self.channel = parse_channel(v)?,
            "k" => self.k = v.parse().map_err(|_| bad("integer"))?,
            "snr_db" => self.snr_db = v.parse().map_err(|_| bad("float"))?,
            "sinr_db" => self.sinr_db = v.parse().map_err(|_| bad("float"))?,
            "prior_x_mean" => self.prior_x.mean = v.parse().map_err(|_| bad("float"))?,
            "prior_x_var" => self.prior_x.var = v.parse().map_err(|_| bad("float"))?,
            "prior_z_mean" => self.prior_z.mean = v.parse().map_err(|_| bad("float"))?,
            "prior_z_var" => self.prior_z.var = v.parse().map_err(|_| bad("float"))?,
            "guidance" => self.guidance = GuidanceMethod::parse(v)?,
            "order" => self.order = v.parse().map_err(|_| bad("integer"))?,
            "steps" => self.steps = v.parse().map_err(|_| bad("integer"))?,
            "beta" => self.beta = v.parse().map_err(|_| bad("float"))?,
            "gamma" => self.gamma = v.parse().map_err(|_| bad("float"))?,
            "sigma_hat2" => self.sigma_hat2 = v.parse().map_err(|_| bad("float"))?,
            "rho_min" => self.rho_min = v.parse().map_err(|_| bad("float"))?,
            "rho_max" => self.rho_max = v.parse().map_err(|_| bad("float"))?,
            "trials" => self.trials = v.parse().map_err(|_| bad("integer"))?,
            "seed" => self.seed = v.parse().map_err(|_| bad("integer"))?,
            "out" => self.out = Some(PathBuf::from(v)),
            "bound_check" => {
                self.bound_check = v.parse().map_err(|_| bad("bool (true|false)"))?
            }
            other => return Err(Error::Range(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Range(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Range(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Range("trials must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Dimension("k must be >= 1".into()));
        }
        if !self.snr_db.is_finite() || !self.sinr_db.is_finite() {
            return Err(Error::Range("snr_db and sinr_db must be finite".into()));
        }
        if !(self.prior_x.var > 0.0) || !(self.prior_z.var > 0.0) {
            return Err(Error::Range("prior variances must be > 0".into()));
        }
        if self.order < 1 || self.order > 4 || self.steps < self.order {
            return Err(Error::Range(format!(
                "need 1 <= order <= 4 and steps >= order, got order {} steps {}",
                self.order, self.steps
            )));
        }
        Ok(())
    }

    /// Output path: explicit key, else `$ICDM_OUT_DIR/<name>`, else `./<name>`.
    pub fn out_path(&self, default_name: &str) -> PathBuf {
        if let Some(p) = &self.out {
            return p.clone();
        }
        match std::env::var_os("ICDM_OUT_DIR") {
            Some(dir) => PathBuf::from(dir).join(default_name),
            None => PathBuf::from(default_name),
        }
    }
}
