//! Perceptual-adaptive signed-gradient ascent in latent space.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{max_byte_deviation, quantize_u8, ImageTensor};
use crate::losses::{LossReport, LossSettings, Objective, TimestepPolicy};
use crate::resample::gaussian_blur;
use crate::saliency::downsample_mask;
use crate::tensor::Tensor;
use crate::types::{LatentCode, MaskKind, PerturbationBudget, SpatialMask};
use crate::victim::{PerceptualDistance, VictimBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub q: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub enabled: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            gamma: 0.3,
            sigma: 3.0,
            enabled: true,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_q(self.q)?;
        check_gamma(self.gamma)?;
        check_sigma(self.sigma)
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::param("q", "must lie in (0, 1)"));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param("gamma", "must lie in [0, 1]"));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", "must be positive"));
    }
    Ok(())
}

/// `S = 1 − d(x_i, x_src)` per pixel.
pub fn perceptual_map_step(
    x_i: &ImageTensor,
    x_src: &ImageTensor,
    perceptual: &dyn PerceptualDistance,
) -> Result<SpatialMask> {
    let (_, d) = perceptual.distance_map(x_i, x_src)?;
    let (h, w) = d.dims();
    let s = d.data().iter().map(|v| (1.0 - v).clamp(0.0, 1.0)).collect();
    SpatialMask::new(h, w, s, MaskKind::Field)
}

/// The `q`-quantile by linear interpolation between order statistics.
pub fn quantile_linear(values: &[f64], q: f64) -> Result<f64> {
    check_q(q)?;
    if values.is_empty() {
        return Err(Error::param("values", "must be non-empty"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("quantile input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// `M = 1[S > Quantile(S, q)]`.
pub fn binarize_quantile(s: &SpatialMask, q: f64) -> Result<SpatialMask> {
    let threshold = quantile_linear(s.data(), q)?;
    let data: Vec<f64> = s
        .data()
        .iter()
        .map(|&v| if v > threshold { 1.0 } else { 0.0 })
        .collect();
    if data.iter().all(|&v| v == 0.0) {
        log::debug!("perceptual map is flat; binary map is empty");
    }
    let (h, w) = s.dims();
    SpatialMask::new(h, w, data, MaskKind::PerceptualBinary)
}

/// `P = G_σ(M + γ(1 − M))`, clamped to `[γ, 1]` against rounding.
pub fn smooth_map(m: &SpatialMask, gamma: f64, sigma: f64) -> Result<SpatialMask> {
    check_gamma(gamma)?;
    check_sigma(sigma)?;
    let (h, w) = m.dims();
    let lifted: Vec<f64> = m.data().iter().map(|&v| v + gamma * (1.0 - v)).collect();
    let p = gaussian_blur(&lifted, h, w, sigma)
        .into_iter()
        .map(|v| v.clamp(gamma, 1.0))
        .collect();
    SpatialMask::new(h, w, p, MaskKind::PerceptualSmooth)
}

/// `P` area-averaged to the latent grid and broadcast over latent channels.
pub fn latent_modulation(p: &SpatialMask, latent: &LatentCode) -> Result<Tensor> {
    let (h, w, c) = latent.geometry();
    Ok(downsample_mask(p, (h, w))?.broadcast(c))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `z + α · P ⊙ sign(g)`, or `z + α · sign(g)` without modulation.
pub fn signed_update(z: &Tensor, grad: &Tensor, modulation: Option<&Tensor>, alpha: f64) -> Result<Tensor> {
    if z.shape() != grad.shape() {
        return Err(Error::ShapeMismatch(format!("latent {:?} vs gradient {:?}", z.shape(), grad.shape())));
    }
    Ok(match modulation {
        Some(p) => {
            if p.shape() != z.shape() {
                return Err(Error::ShapeMismatch(format!("latent {:?} vs modulation {:?}", z.shape(), p.shape())));
            }
            let step = grad.zip_map(p, |g, m| alpha * m * sign(g));
            z.zip_map(&step, |a, b| a + b)
        }
        None => z.zip_map(grad, |a, g| a + alpha * sign(g)),
    })
}

/// Knobs of a protection run beyond the loss settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub budget: PerturbationBudget,
    pub adaptive: AdaptiveConfig,
    pub timesteps: TimestepPolicy,
    pub seed: u64,
    /// Compute the perceptual map on the projected decode rather than the raw one.
    pub map_on_projected: bool,
    pub record_maps: bool,
    pub record_trajectory: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            budget: PerturbationBudget::default(),
            adaptive: AdaptiveConfig::default(),
            timesteps: TimestepPolicy::Uniform,
            seed: 0,
            map_on_projected: true,
            record_maps: false,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub timestep: usize,
    /// Losses at the iterate the gradient was taken on.
    pub report: LossReport,
    /// `(min P, max P, fraction of ones in M)` when adaptation is enabled.
    pub map_stats: Option<(f64, f64, f64)>,
    pub maps: Option<(SpatialMask, SpatialMask)>,
}

/// One protection run in progress.
#[derive(Debug)]
pub struct RunState<'b> {
    objective: Objective<'b>,
    options: RunOptions,
    z: LatentCode,
    iteration: usize,
    rng: ChaCha8Rng,
    history: Vec<IterationRecord>,
    trajectory: Vec<LatentCode>,
}

impl<'b> RunState<'b> {
    pub fn new(
        bundle: &'b VictimBundle,
        x_src: &ImageTensor,
        settings: LossSettings,
        options: RunOptions,
    ) -> Result<Self> {
        options.budget.validate()?;
        options.adaptive.validate()?;
        let settings = LossSettings {
            epsilon: options.budget.epsilon,
            ..settings
        };
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let noise_seed: u64 = rng.random();
        let objective = Objective::new(bundle, x_src, settings, noise_seed)?;
        if let TimestepPolicy::Fixed(t) = options.timesteps {
            if t >= objective.timestep_count() {
                return Err(Error::TimestepOutOfRange {
                    timestep: t,
                    count: objective.timestep_count(),
                });
            }
        }
        let z = objective.initial_latent();
        let trajectory = if options.record_trajectory { vec![z.clone()] } else { Vec::new() };
        Ok(Self {
            objective,
            options,
            z,
            iteration: 0,
            rng,
            history: Vec::new(),
            trajectory,
        })
    }

    pub fn objective(&self) -> &Objective<'b> {
        &self.objective
    }

    pub fn options(&self) -> &RunOptions {
        &self.options
    }

    pub fn latent(&self) -> &LatentCode {
        &self.z
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    /// Latent after each completed iteration, starting with `z⁰`.
    pub fn trajectory(&self) -> &[LatentCode] {
        &self.trajectory
    }

    /// Current projected image.
    pub fn current_image(&self) -> Result<ImageTensor> {
        self.objective.project_decode(&self.z)
    }

    fn next_timestep(&mut self) -> usize {
        match self.options.timesteps {
            TimestepPolicy::Fixed(t) => t,
            TimestepPolicy::Uniform => self.rng.random_range(0..self.objective.timestep_count()),
        }
    }

    /// Adaptive maps `(M, P)` for the current iterate.
    pub fn adaptive_maps(&self) -> Result<(SpatialMask, SpatialMask)> {
        let cfg = self.options.adaptive;
        let x = if self.options.map_on_projected {
            self.current_image()?
        } else {
            self.objective.bundle().codec.decode(&self.z)?
        };
        let s = perceptual_map_step(&x, &self.objective.cache().x_src, self.objective.bundle().perceptual.as_ref())?;
        let m = binarize_quantile(&s, cfg.q)?;
        let p = smooth_map(&m, cfg.gamma, cfg.sigma)?;
        Ok((m, p))
    }

    pub fn step(&mut self) -> Result<&IterationRecord> {
        let timestep = self.next_timestep();
        let (report, grad) = self.objective.gradient(&self.z, timestep)?;
        let (modulation, map_stats, maps) = if self.options.adaptive.enabled {
            let (m, p) = self.adaptive_maps()?;
            let stats = (p.min(), p.max(), m.fraction_ones());
            let modulation = latent_modulation(&p, &self.z)?;
            let maps = self.options.record_maps.then_some((m, p));
            (Some(modulation), Some(stats), maps)
        } else {
            (None, None, None)
        };
        let next = signed_update(self.z.tensor(), &grad, modulation.as_ref(), self.options.budget.alpha)?;
        self.z = LatentCode::new(next)?;
        if self.options.record_trajectory {
            self.trajectory.push(self.z.clone());
        }
        self.history.push(IterationRecord {
            iteration: self.iteration,
            timestep,
            report,
            map_stats,
            maps,
        });
        self.iteration += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Mean `L_total` over every timestep of the frozen noise set.
    pub fn expected_total(&self, z: &LatentCode) -> Result<f64> {
        let n = self.objective.timestep_count();
        let mut acc = 0.0;
        for t in 0..n {
            acc += self.objective.evaluate(z, t)?.l_total;
        }
        Ok(acc / n as f64)
    }
}

/// Run-level summary record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub linf_bytes: u8,
    pub iterations: usize,
    pub wall_time_secs: f64,
    /// Timestep-averaged `L_total` at `z⁰` and at the final latent.
    pub l_total_initial: f64,
    pub l_total_final: f64,
    pub localization_enabled: bool,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ProtectOutcome {
    pub image: ImageTensor,
    pub latent: LatentCode,
    pub history: Vec<IterationRecord>,
    pub trajectory: Vec<LatentCode>,
    pub summary: RunSummary,
}

/// Runs `N` steps from `encode(x_src)` and returns
/// `quantize(project(decode(z_N)))`. A non-finite gradient stops the run
/// early; the partial result is returned with `summary.aborted` set.
pub fn protect(
    x_src: &ImageTensor,
    bundle: &VictimBundle,
    settings: LossSettings,
    options: RunOptions,
) -> Result<ProtectOutcome> {
    protect_steps(x_src, bundle, settings, options, options.budget.iterations)
}

/// [`protect`] with an explicit step count, which may be zero.
pub fn protect_steps(
    x_src: &ImageTensor,
    bundle: &VictimBundle,
    settings: LossSettings,
    options: RunOptions,
    steps: usize,
) -> Result<ProtectOutcome> {
    let start = Instant::now();
    let mut run = RunState::new(bundle, x_src, settings, options)?;
    let z0 = run.latent().clone();
    let mut aborted = None;
    for _ in 0..steps {
        match run.step() {
            Ok(_) => {}
            Err(e @ Error::NonFiniteGradient(_)) => {
                log::error!("run aborted at iteration {}: {e}", run.iteration());
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let image = run.current_image()?.quantized();
    let linf_bytes = max_byte_deviation(&quantize_u8(&image), &quantize_u8(x_src));
    let l_total_initial = run.expected_total(&z0)?;
    let l_total_final = run.expected_total(run.latent())?;
    let summary = RunSummary {
        linf_bytes,
        iterations: run.iteration(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        l_total_initial,
        l_total_final,
        localization_enabled: run.objective().enabled()[0],
        aborted,
    };
    Ok(ProtectOutcome {
        image,
        latent: run.latent().clone(),
        history: run.history,
        trajectory: run.trajectory,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_face;
    use proptest::prelude::*;

    fn field(h: usize, w: usize, data: Vec<f64>) -> SpatialMask {
        SpatialMask::new(h, w, data, MaskKind::Field).unwrap()
    }

    #[test]
    fn quantile_examples() {
        let s = field(1, 10, (1..=10).map(|i| i as f64 / 10.0).collect());
        let m = binarize_quantile(&s, 0.5).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let m = binarize_quantile(&field(2, 2, vec![0.4; 4]), 0.5).unwrap();
        assert_eq!(m.fraction_ones(), 0.0);
        let m = binarize_quantile(&s, 1e-9).unwrap();
        assert_eq!(m.data()[0], 0.0);
        assert!(m.data()[1..].iter().all(|&v| v == 1.0));
        assert!(binarize_quantile(&s, 0.0).is_err());
        assert!(binarize_quantile(&s, 1.0).is_err());
        assert_eq!(quantile_linear(&[3.0, 1.0, 2.0, 4.0], 0.5).unwrap(), 2.5);
    }

    #[test]
    fn smooth_examples() {
        let ones = SpatialMask::filled(9, 9, 1.0, MaskKind::PerceptualBinary).unwrap();
        assert!(smooth_map(&ones, 0.3, 3.0).unwrap().data().iter().all(|&v| v == 1.0));
        let zeros = SpatialMask::filled(9, 9, 0.0, MaskKind::PerceptualBinary).unwrap();
        for v in smooth_map(&zeros, 0.3, 3.0).unwrap().data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
        assert!(smooth_map(&ones, 1.5, 3.0).is_err());
        assert!(smooth_map(&ones, 0.3, 0.0).is_err());
    }

    #[test]
    fn update_examples() {
        let z = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 2.0]);
        let g = Tensor::new(&[1, 1, 3], vec![0.5, 0.0, -2.0]);
        let p = Tensor::new(&[1, 1, 3], vec![0.5, 0.5, 1.0]);
        assert_eq!(signed_update(&z, &g, Some(&p), 0.1).unwrap().data(), &[0.05, 1.0, 1.9]);
        assert_eq!(signed_update(&z, &g, None, 0.0).unwrap(), z);
        let ones = Tensor::filled(&[1, 1, 3], 1.0);
        assert_eq!(
            signed_update(&z, &g, Some(&ones), 0.1).unwrap(),
            signed_update(&z, &g, None, 0.1).unwrap()
        );
    }

    #[test]
    fn identical_images_give_all_ones_map() {
        let bundle = VictimBundle::surrogate_seeded(1);
        let x = synthetic_face(3, 64);
        let s = perceptual_map_step(&x, &x, bundle.perceptual.as_ref()).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn short_run_respects_budget_and_is_deterministic() {
        let bundle = VictimBundle::surrogate_seeded(2);
        let x = synthetic_face(8, 64);
        let options = RunOptions {
            budget: PerturbationBudget::new(12.0 / 255.0, 1.0 / 255.0, 3).unwrap(),
            record_maps: true,
            seed: 4,
            ..RunOptions::default()
        };
        let a = protect(&x, &bundle, LossSettings::default(), options).unwrap();
        let b = protect(&x, &bundle, LossSettings::default(), options).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.summary.linf_bytes <= 12);
        assert_eq!(a.history.len(), 3);
        for rec in &a.history {
            let (lo, hi, _) = rec.map_stats.unwrap();
            assert!(lo >= 0.3 && hi <= 1.0);
        }
    }

    #[test]
    fn zero_iterations_is_projected_round_trip() {
        let bundle = VictimBundle::surrogate_seeded(2);
        let x = synthetic_face(9, 64);
        let out = protect_steps(&x, &bundle, LossSettings::default(), RunOptions::default(), 0).unwrap();
        assert!(out.history.is_empty());
        let expected = crate::image::project_linf(
            &bundle.codec.decode(&bundle.codec.encode(&x).unwrap()).unwrap(),
            &x,
            12.0 / 255.0,
        )
        .unwrap()
        .quantized();
        assert_eq!(out.image, expected);
    }

    proptest! {
        #[test]
        fn binarize_matches_sort_oracle(v in prop::collection::vec(0.0f64..1.0, 1..64), q in 0.01f64..0.99) {
            let n = v.len();
            let m = binarize_quantile(&field(1, n, v.clone()), q).unwrap();
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = s[lo] + (pos - lo as f64) * (s[hi] - s[lo]);
            for (x, b) in v.iter().zip(m.data()) {
                prop_assert_eq!(*b == 1.0, *x > t);
            }
        }

        #[test]
        fn smooth_stays_in_band(bits in prop::collection::vec(any::<bool>(), 100), gamma in 0.0f64..=1.0) {
            let m = SpatialMask::new(10, 10, bits.iter().map(|&b| b as u8 as f64).collect(), MaskKind::PerceptualBinary).unwrap();
            let p = smooth_map(&m, gamma, 2.0).unwrap();
            prop_assert!(p.min() >= gamma && p.max() <= 1.0);
        }
    }
}
