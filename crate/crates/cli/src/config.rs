//! `RunConfig`: the TOML file that fixes every knob of a batch run.
//!
//! ```toml
//! input = "faces"            # directory, single file, or glob pattern
//! output = "protected"
//! # bundle = "bundle.toml"   # surrogate manifest; built-in reference if unset
//! seed = 0
//! jobs = 1
//!
//! [budget]
//! epsilon = 0.047058823529411764   # 12/255
//! alpha = 0.00392156862745098      # 1/255
//! iterations = 30
//!
//! [loss]
//! lambda_loc = -1.0
//! lambda_id = -1.0
//! lambda_attn = 0.01
//! lambda_feat = 0.01
//! margin = 0.6
//! tau_p = 0.5
//! straight_through = true
//!
//! [adaptive]
//! enabled = true
//! q = 0.5
//! gamma = 0.3
//! sigma = 3.0
//! map_on_projected = true
//!
//! [timesteps]
//! mode = "uniform"           # or: mode = "fixed", timestep = 4
//!
//! [evaluate]
//! # protected = "protected"  # defaults to `output`
//! # targets = "targets"
//! jpeg_qualities = [50, 70, 90]
//! bit_depths = [3, 5, 8]
//! resize_factors = [0.5, 0.75]
//!
//! [dump]
//! masks = false
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voidkit::evaluation::TransformSuite;
use voidkit::losses::{LossSettings, TimestepPolicy};
use voidkit::optimizer::{AdaptiveConfig, RunOptions};
use voidkit::types::{LossWeights, PerturbationBudget};
use voidkit::victim::BundleManifest;

/// Environment variable consulted for the bundle manifest when neither
/// the flag nor the config file names one.
pub const BUNDLE_ENV: &str = "VOIDKIT_BUNDLE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: String,
    pub output: PathBuf,
    pub bundle: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub budget: BudgetConfig,
    pub loss: LossConfig,
    pub adaptive: AdaptiveSection,
    pub timesteps: TimestepPolicy,
    pub evaluate: EvaluateConfig,
    pub dump: DumpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: "input".into(),
            output: PathBuf::from("output"),
            bundle: None,
            seed: 0,
            jobs: 1,
            budget: BudgetConfig::default(),
            loss: LossConfig::default(),
            adaptive: AdaptiveSection::default(),
            timesteps: TimestepPolicy::Uniform,
            evaluate: EvaluateConfig::default(),
            dump: DumpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        let b = PerturbationBudget::default();
        Self {
            epsilon: b.epsilon,
            alpha: b.alpha,
            iterations: b.iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_loc: f64,
    pub lambda_id: f64,
    pub lambda_attn: f64,
    pub lambda_feat: f64,
    pub margin: f64,
    pub tau_p: f64,
    pub straight_through: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let s = LossSettings::default();
        Self {
            lambda_loc: w.lambda_loc,
            lambda_id: w.lambda_id,
            lambda_attn: w.lambda_attn,
            lambda_feat: w.lambda_feat,
            margin: s.margin,
            tau_p: s.tau_p,
            straight_through: s.straight_through,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSection {
    pub enabled: bool,
    pub q: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub map_on_projected: bool,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        let a = AdaptiveConfig::default();
        Self {
            enabled: a.enabled,
            q: a.q,
            gamma: a.gamma,
            sigma: a.sigma,
            map_on_projected: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub protected: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub jpeg_qualities: Vec<u8>,
    pub bit_depths: Vec<u8>,
    pub resize_factors: Vec<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        let s = TransformSuite::default();
        Self {
            protected: None,
            targets: None,
            jpeg_qualities: s.jpeg_qualities,
            bit_depths: s.bit_depths,
            resize_factors: s.resize_factors,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpConfig {
    pub masks: bool,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub input: Option<String>,
    pub output: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub iterations: Option<usize>,
    pub no_adaptive: bool,
    pub dump_masks: bool,
}

fn field_error(section: &str, e: voidkit::Error) -> anyhow::Error {
    match e {
        voidkit::Error::InvalidParameter { field, reason } => {
            anyhow::anyhow!("config field `{section}.{field}`: {reason}")
        }
        other => anyhow::anyhow!("config section `{section}`: {other}"),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid config file")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).with_context(|| format!("writing config {}", path.display()))
    }

    /// Layers flag values over `self`; unset flags leave the file value.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.input {
            self.input = v.clone();
        }
        if let Some(v) = &o.output {
            self.output = v.clone();
        }
        if let Some(v) = &o.bundle {
            self.bundle = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = o.epsilon {
            self.budget.epsilon = v;
        }
        if let Some(v) = o.alpha {
            self.budget.alpha = v;
        }
        if let Some(v) = o.iterations {
            self.budget.iterations = v;
        }
        if o.no_adaptive {
            self.adaptive.enabled = false;
        }
        if o.dump_masks {
            self.dump.masks = true;
        }
    }

    /// Default, then file, then flags.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            bail!("config field `jobs`: must be at least 1");
        }
        self.budget().map_err(|e| field_error("budget", e))?;
        self.weights().map_err(|e| field_error("loss", e))?;
        if !(self.loss.margin > 0.0 && self.loss.margin <= 2.0) {
            bail!("config field `loss.margin`: must lie in (0, 2]");
        }
        if !(0.0..=1.0).contains(&self.loss.tau_p) {
            bail!("config field `loss.tau_p`: must lie in [0, 1]");
        }
        self.adaptive_config().validate().map_err(|e| field_error("adaptive", e))?;
        if self.evaluate.jpeg_qualities.iter().any(|&q| q == 0 || q > 100) {
            bail!("config field `evaluate.jpeg_qualities`: qualities must lie in 1..=100");
        }
        if self.evaluate.bit_depths.iter().any(|&b| b == 0 || b > 8) {
            bail!("config field `evaluate.bit_depths`: depths must lie in 1..=8");
        }
        if self.evaluate.resize_factors.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            bail!("config field `evaluate.resize_factors`: factors must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn budget(&self) -> voidkit::Result<PerturbationBudget> {
        PerturbationBudget::new(self.budget.epsilon, self.budget.alpha, self.budget.iterations)
    }

    pub fn weights(&self) -> voidkit::Result<LossWeights> {
        let l = &self.loss;
        LossWeights::new(l.lambda_loc, l.lambda_id, l.lambda_attn, l.lambda_feat)
    }

    pub fn adaptive_config(&self) -> AdaptiveConfig {
        AdaptiveConfig {
            q: self.adaptive.q,
            gamma: self.adaptive.gamma,
            sigma: self.adaptive.sigma,
            enabled: self.adaptive.enabled,
        }
    }

    pub fn loss_settings(&self) -> Result<LossSettings> {
        Ok(LossSettings {
            weights: self.weights()?,
            margin: self.loss.margin,
            tau_p: self.loss.tau_p,
            epsilon: self.budget.epsilon,
            straight_through: self.loss.straight_through,
            enabled: [true; 4],
        })
    }

    /// Run options for the image at `index` in the sorted input list.
    pub fn run_options(&self, index: usize) -> Result<RunOptions> {
        Ok(RunOptions {
            budget: self.budget()?,
            adaptive: self.adaptive_config(),
            timesteps: self.timesteps,
            seed: image_seed(self.seed, index),
            map_on_projected: self.adaptive.map_on_projected,
            record_maps: self.dump.masks,
            record_trajectory: false,
        })
    }

    pub fn suite(&self) -> TransformSuite {
        TransformSuite {
            jpeg_qualities: self.evaluate.jpeg_qualities.clone(),
            bit_depths: self.evaluate.bit_depths.clone(),
            resize_factors: self.evaluate.resize_factors.clone(),
        }
    }

    /// Manifest path from the config, else from `VOIDKIT_BUNDLE`; `None`
    /// selects the built-in reference surrogate.
    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.bundle
            .clone()
            .or_else(|| std::env::var_os(BUNDLE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    pub fn manifest(&self) -> Result<BundleManifest> {
        match self.manifest_path() {
            Some(p) => BundleManifest::load(&p).with_context(|| format!("bundle manifest {}", p.display())),
            None => Ok(BundleManifest::default()),
        }
    }

    pub fn protected_dir(&self) -> PathBuf {
        self.evaluate.protected.clone().unwrap_or_else(|| self.output.clone())
    }
}

/// Per-image seed: a SplitMix64 finalizer over the global seed and the
/// image's index, so runs are independent of scheduling.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parses a decimal or an `a/b` fraction such as `12/255`.
pub fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
            if b == 0.0 {
                return Err(format!("zero denominator in `{s}`"));
            }
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?,
    };
    if !value.is_finite() {
        return Err(format!("`{s}` is not finite"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_library() {
        let c = RunConfig::default();
        assert_eq!(c.budget().unwrap(), PerturbationBudget::default());
        assert_eq!(c.weights().unwrap(), LossWeights::default());
        assert_eq!(c.adaptive_config(), AdaptiveConfig::default());
        assert_eq!(c.suite(), TransformSuite::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_is_field_exact() {
        let mut c = RunConfig::default();
        c.bundle = Some("m.toml".into());
        c.timesteps = TimestepPolicy::Fixed(3);
        c.evaluate.targets = Some("t".into());
        c.budget.epsilon = 8.0 / 255.0;
        c.adaptive.sigma = 0.1 + 0.2;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("[budget]\niterations = 5\n").unwrap();
        assert_eq!(c.budget.iterations, 5);
        assert_eq!(c.budget.epsilon, 12.0 / 255.0);
        assert_eq!(c.loss, LossConfig::default());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let mut c = RunConfig::from_toml("seed = 9\n[budget]\nalpha = 0.002\n").unwrap();
        c.apply(&Overrides {
            seed: Some(4),
            ..Overrides::default()
        });
        assert_eq!(c.seed, 4);
        assert_eq!(c.budget.alpha, 0.002);
        assert_eq!(c.budget.epsilon, 12.0 / 255.0);
    }

    #[test]
    fn validation_names_fields() {
        let mut c = RunConfig::default();
        c.budget.alpha = 0.5;
        assert!(c.validate().unwrap_err().to_string().contains("budget.alpha"));
        let mut c = RunConfig::default();
        c.loss.lambda_id = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("loss.lambda_id"));
        let mut c = RunConfig::default();
        c.adaptive.q = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("adaptive.q"));
        assert!(RunConfig::from_toml("[budget]\nepsilonn = 1\n").is_err());
    }

    #[test]
    fn fractions_parse() {
        assert_eq!(parse_fraction("12/255").unwrap(), 12.0 / 255.0);
        assert_eq!(parse_fraction("0.5").unwrap(), 0.5);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("x").is_err());
    }

    #[test]
    fn image_seeds_differ() {
        assert_ne!(image_seed(0, 0), image_seed(0, 1));
        assert_ne!(image_seed(0, 0), image_seed(1, 0));
        assert_eq!(image_seed(7, 3), image_seed(7, 3));
    }
}
