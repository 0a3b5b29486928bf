//! Run configuration files.
//!
//! A config is a TOML document. Every section is optional and falls back to
//! its defaults; unknown keys are rejected.
//!
//! ```toml
//! method = "eqp"          # hdm | rom | eqp
//! seed = 7                # overrides testbed.seed
//! output = "out/eqp"      # overridden by --out
//!
//! [testbed]               # BurgersConfig
//! n_cells = 128
//!
//! [auglag]                # tau0, scale_a, pi_star, omega_star, max_major_iters
//! [trustregion]           # delta0, eta1, eta2, gamma1, gamma2, delta_max, max_iters, kappa_hat
//! [eqp]                   # preset, kappa1..kappa6, fixed deltas, pod_max, inherit_snapshots, ...
//! [report]                # reference run used for S_i
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auglag::AuglagConfig;
use crate::burgers::BurgersConfig;
use crate::eqpbtr::{EqpConfig, Method, ToleranceSchedule};
use crate::error::{Error, Result};
use crate::trustregion::TrConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Run a tightly converged full-order reference to obtain j⋆.
    pub reference: bool,
    pub reference_omega: f64,
    pub reference_pi: f64,
    pub reference_max_majors: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { reference: true, reference_omega: 1e-10, reference_pi: 1e-10, reference_max_majors: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub testbed: BurgersConfig,
    pub auglag: AuglagConfig,
    pub trustregion: TrConfig,
    pub eqp: EqpConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.testbed.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.testbed.validate().map_err(wrap)?;
        self.auglag.validate().map_err(wrap)?;
        self.trustregion.validate().map_err(wrap)?;
        ToleranceSchedule::new(&self.eqp, self.trustregion.kappa_hat).map_err(wrap)?;
        let r = &self.report;
        if !(r.reference_omega > 0.0 && r.reference_pi > 0.0) || r.reference_max_majors == 0 {
            return Err(Error::Config("reference tolerances must be positive".into()));
        }
        Ok(())
    }

    /// The tightly converged full-order configuration used for j⋆.
    pub fn reference(&self) -> RunConfig {
        let mut r = self.clone();
        r.method = Method::Hdm;
        r.auglag.omega_star = self.report.reference_omega;
        r.auglag.pi_star = self.report.reference_pi;
        r.auglag.max_major_iters = self.report.reference_max_majors;
        r.report.reference = false;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.method, Method::Eqp);
    }

    #[test]
    fn sections_and_seed_override() {
        let c = RunConfig::from_toml_str(
            "method = \"hdm\"\nseed = 3\n[testbed]\nn_cells = 64\n[auglag]\ntau0 = 25.0\n[eqp]\npreset = \"convergence\"\n",
        )
        .unwrap();
        assert_eq!(c.method, Method::Hdm);
        assert_eq!(c.testbed.seed, 3);
        assert_eq!(c.testbed.n_cells, 64);
        assert_eq!(c.auglag.tau0, 25.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for bad in [
            "bogus = 1",
            "[auglag]\ntau = 3.0",
            "[trustregion]\neta1 = 0.9",
            "[auglag]\nscale_a = 0.5",
            "method = \"magic\"",
            "[testbed\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
