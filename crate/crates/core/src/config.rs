use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{InterDomainConfig, KernelConfig, Weighting};
use crate::consistency::ConsistencyMode;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    Voting,
    Spl,
}

/// Every knob of one experiment. Serialized as the run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub kernel: KernelConfig,
    /// Cluster-level weight inside the inter-domain loss.
    pub lambda: f64,
    /// Inter-domain loss weight; 0.4 is the hard-task profile.
    pub alpha: f64,
    /// Consistency loss weight.
    pub beta: f64,
    /// Pseudo-label loss weight.
    pub gamma: f64,
    /// Reliability threshold for alignment participation.
    pub epsilon: f64,
    /// Voting confidence threshold.
    pub tau: f64,
    pub consistency_mode: ConsistencyMode,
    pub pseudo_mode: PseudoMode,
    /// Hardness weights inside the alignment terms; `false` gives plain MMD weights.
    pub hardness_weighting: bool,
    /// Apply the `epsilon` filter to alignment terms.
    pub reliability_filter: bool,
    pub lr0: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub schedule_a: f64,
    pub schedule_b: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Target-eval accuracy is logged every this many iterations (0: only at the end).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            kernel: KernelConfig::default(),
            lambda: 0.02,
            alpha: 0.1,
            beta: 0.5,
            gamma: 0.1,
            epsilon: 0.4,
            tau: 0.9,
            consistency_mode: ConsistencyMode::Mcc,
            pseudo_mode: PseudoMode::Voting,
            hardness_weighting: true,
            reliability_filter: true,
            lr0: 0.01,
            batch_size: 32,
            total_iters: 2000,
            seed: 0,
            schedule_a: 10.0,
            schedule_b: 0.75,
            momentum: 0.9,
            weight_decay: 5e-4,
            eval_every: 0,
        }
    }
}

impl RunConfig {
    /// Batch size 128 and 20k iterations.
    pub fn full_scale() -> Self {
        RunConfig {
            batch_size: 128,
            total_iters: 20_000,
            ..RunConfig::default()
        }
    }

    /// `alpha = 0.4`, used for the hardest targets.
    pub fn hard_task(mut self) -> Self {
        self.alpha = 0.4;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.data.validate(self.arch.num_classes)?;
        self.kernel.validate()?;
        for (field, v) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a finite non-negative number"));
            }
        }
        for (field, v) in [("epsilon", self.epsilon), ("tau", self.tau)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field, "must lie in (0, 1]"));
            }
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        for (field, v) in [("schedule_a", self.schedule_a), ("schedule_b", self.schedule_b)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    pub fn inter_domain(&self) -> InterDomainConfig {
        InterDomainConfig {
            lambda: self.lambda,
            epsilon: self.reliability_filter.then_some(self.epsilon),
            weighting: if self.hardness_weighting {
                Weighting::Hardness
            } else {
                Weighting::Uniform
            },
            kernel: self.kernel.clone(),
            num_classes: self.arch.num_classes,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
