//! Central finite-difference checks of the objective's latent gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageTensor;
use crate::losses::{LossSettings, Objective, Term};
use crate::types::LatentCode;
use crate::victim::VictimBundle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    /// Magnitude floor of the relative-error denominator.
    pub floor: f64,
    /// Half-width of the uniform offset applied to `encode(x_src)`.
    pub perturbation: f64,
    pub timestep: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coordinates: 20,
            tolerance: 1e-2,
            floor: 1e-6,
            perturbation: 0.05,
            timestep: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub terms: Vec<TermCheck>,
    /// Coordinates passed over because their stencil changed which pixels
    /// the projection clamps.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    /// `loc`, `id`, `attn`, `feat` or `total`.
    pub name: String,
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks the gradient of every term and of the weighted total at a
/// seeded random point near `encode(x_src)`, with the exact projection
/// derivative so both sides differentiate the same function.
///
/// Coordinates are drawn in seeded random order; one is used only if its
/// `±step` stencil leaves the projection's active set unchanged, since a
/// difference quotient across a clamp kink measures neither one-sided
/// derivative.
pub fn check_objective_gradients(
    bundle: &VictimBundle,
    x_src: &ImageTensor,
    settings: LossSettings,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let settings = LossSettings {
        straight_through: false,
        ..settings
    };
    let objective = Objective::new(bundle, x_src, settings, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x67ad_c4ec);
    let base = objective.initial_latent();
    let mut z = base.into_tensor();
    for v in z.data_mut() {
        *v += rng.random_range(-cfg.perturbation..=cfg.perturbation);
    }
    let z = LatentCode::new(z)?;
    let n = z.tensor().len();
    let shifted_latent = |i: usize, delta: f64| -> Result<LatentCode> {
        let mut t = z.tensor().clone();
        t.data_mut()[i] += delta;
        LatentCode::new(t)
    };
    let active = objective.projection_active_set(&z)?;
    let mut coords = Vec::with_capacity(cfg.coordinates);
    let mut skipped = 0;
    for i in sample(&mut rng, n, n).into_iter() {
        if coords.len() == cfg.coordinates {
            break;
        }
        let stable = objective.projection_active_set(&shifted_latent(i, cfg.step)?)? == active
            && objective.projection_active_set(&shifted_latent(i, -cfg.step)?)? == active;
        if stable {
            coords.push(i);
        } else {
            skipped += 1;
        }
    }

    let mut targets: Vec<(String, [f64; 4])> = Term::ALL
        .iter()
        .filter(|t| objective.enabled()[t.index()])
        .map(|t| {
            let mut unit = [0.0; 4];
            unit[t.index()] = 1.0;
            (t.name().to_string(), unit)
        })
        .collect();
    targets.push(("total".into(), settings.weights.as_array()));

    let mut numeric = vec![[0.0; 4]; coords.len()];
    for (k, &i) in coords.iter().enumerate() {
        let shifted = |delta: f64| -> Result<[f64; 4]> {
            Ok(objective.evaluate(&shifted_latent(i, delta)?, cfg.timestep)?.terms())
        };
        let plus = shifted(cfg.step)?;
        let minus = shifted(-cfg.step)?;
        for j in 0..4 {
            numeric[k][j] = (plus[j] - minus[j]) / (2.0 * cfg.step);
        }
    }

    let mut out = Vec::with_capacity(targets.len());
    for (name, coefficients) in targets {
        let (_, grad) = objective.gradient_with(&z, cfg.timestep, coefficients)?;
        let samples: Vec<GradSample> = coords
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let fd: f64 = (0..4).map(|j| coefficients[j] * numeric[k][j]).sum();
                let ad = grad.data()[i];
                GradSample {
                    coordinate: i,
                    analytic: ad,
                    numeric: fd,
                    rel_error: relative_error(ad, fd, cfg.floor),
                }
            })
            .collect();
        let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
        out.push(TermCheck {
            name,
            passed: max_rel_error < cfg.tolerance,
            max_rel_error,
            samples,
        });
    }
    Ok(GradCheckReport { terms: out, skipped })
}
