//! Invariant checks run by `voidkit selftest` on a seeded surrogate bundle.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voidkit::evaluation::{bit_reduce, metric_ism, metric_l2, metric_psnr, psnr_from_l2};
use voidkit::gradcheck::{check_objective_gradients, GradCheckConfig};
use voidkit::image::{quantize_u8, ImageTensor};
use voidkit::losses::{LossSettings, Objective, TimestepPolicy};
use voidkit::optimizer::{binarize_quantile, protect, AdaptiveConfig, RunOptions, RunState};
use voidkit::saliency::MaskSet;
use voidkit::synth::synthetic_face;
use voidkit::types::{LatentCode, MaskKind, PerturbationBudget, SpatialMask};
use voidkit::victim::VictimBundle;

const TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} {}", self.name, self.detail)
    }
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

fn failure(name: &str, e: impl fmt::Display) -> CheckResult {
    check(name, false, format!("error: {e}"))
}

/// `q`-quantile by sorting and linear interpolation between order
/// statistics, then `1[v > quantile]`.
pub fn sort_oracle_binarize(values: &[f64], q: f64) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let threshold = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    values.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect()
}

fn gradients(bundle: &VictimBundle, x: &ImageTensor, seed: u64) -> Vec<CheckResult> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    match check_objective_gradients(bundle, x, LossSettings::default(), &cfg) {
        Err(e) => vec![failure("gradient", e)],
        Ok(report) => report
            .terms
            .iter()
            .map(|t| {
                check(
                    &format!("gradient/{}", t.name),
                    t.passed && t.samples.len() == cfg.coordinates,
                    format!(
                        "{} coords, max rel err {:.2e} (skipped {})",
                        t.samples.len(),
                        t.max_rel_error,
                        report.skipped
                    ),
                )
            })
            .collect(),
    }
}

fn identity_case(bundle: &VictimBundle, faces: &[ImageTensor]) -> CheckResult {
    let name = "losses/identity_case";
    let settings = LossSettings::default();
    let mut worst = 0.0f64;
    for (k, x) in faces.iter().enumerate() {
        let objective = match Objective::new(bundle, x, settings, k as u64) {
            Ok(o) => o,
            Err(e) => return failure(name, e),
        };
        for t in 0..objective.timestep_count() {
            let r = match objective.evaluate_image(x, t) {
                Ok(r) => r,
                Err(e) => return failure(name, e),
            };
            let loc = if objective.enabled()[0] { (r.l_loc - 1.0).abs() } else { 0.0 };
            worst = worst
                .max(loc)
                .max(r.l_attn.abs())
                .max(r.l_feat.abs())
                .max((r.l_id_hinge - settings.margin).abs());
        }
    }
    check(name, worst <= TOL, format!("max deviation {worst:.1e}"))
}

fn masks(bundle: &VictimBundle, faces: &[ImageTensor]) -> Vec<CheckResult> {
    let mut anchor_ok = true;
    let mut semantic_ok = true;
    let mut cam_ok = true;
    let mut layers_ok = true;
    for x in faces {
        let m = match MaskSet::build(x, bundle, LossSettings::default().tau_p) {
            Ok(m) => m,
            Err(e) => return vec![failure("masks", e)],
        };
        anchor_ok &= m.anchor.kind() == MaskKind::Anchor && m.anchor.data().iter().all(|&v| v == 0.0 || v == 1.0);
        semantic_ok &= m.semantic.min() >= 0.0 && m.semantic.max() <= 1.0 && m.semantic.mean() > 0.0;
        cam_ok &= m.cam.min() >= 0.0 && m.cam.max() <= 1.0;
        layers_ok &= m.per_layer.len() == 2
            && m.per_layer
                .values()
                .all(|l| l.cam.min() >= 0.0 && l.cam.max() <= 1.0 && l.semantic.min() >= 0.0 && l.semantic.max() <= 1.0);
    }
    vec![
        check("masks/anchor_binary", anchor_ok, "values in {0, 1}"),
        check("masks/semantic_range", semantic_ok, "values in [0, 1], non-empty"),
        check("masks/cam_range", cam_ok, "values in [0, 1]"),
        check("masks/layer_downsample", layers_ok, "two tap layers, values in [0, 1]"),
    ]
}

fn quantile_oracle(seed: u64, trials: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact = true;
    let mut fraction_ok = true;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let h = rng.random_range(1..=16usize);
        let w = rng.random_range(1..=16usize);
        let n = h * w;
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let q = rng.random_range(0.01..0.99);
        let s = match SpatialMask::new(h, w, values.clone(), MaskKind::Field) {
            Ok(s) => s,
            Err(e) => return vec![failure("adaptive/quantile_oracle", e)],
        };
        let m = match binarize_quantile(&s, q) {
            Ok(m) => m,
            Err(e) => return vec![failure("adaptive/quantile_oracle", e)],
        };
        exact &= m.data() == sort_oracle_binarize(&values, q).as_slice();
        let dev = (m.fraction_ones() - (1.0 - q)).abs();
        worst = worst.max(dev * n as f64);
        fraction_ok &= dev <= 2.0 / n as f64;
    }
    vec![
        check("adaptive/quantile_oracle", exact, format!("{trials} random arrays match the sort oracle")),
        check(
            "adaptive/fraction_ones",
            fraction_ok,
            format!("max |frac - (1-q)| = {worst:.2}/(HW)"),
        ),
    ]
}

fn adaptive_band(bundle: &VictimBundle, x: &ImageTensor) -> CheckResult {
    let name = "adaptive/p_band";
    let adaptive = AdaptiveConfig::default();
    let options = RunOptions {
        budget: PerturbationBudget {
            iterations: 4,
            ..PerturbationBudget::default()
        },
        record_maps: true,
        ..RunOptions::default()
    };
    let mut run = match RunState::new(bundle, x, LossSettings::default(), options) {
        Ok(r) => r,
        Err(e) => return failure(name, e),
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..options.budget.iterations {
        match run.step() {
            Ok(rec) => {
                let (_, p) = rec.maps.as_ref().expect("maps recorded");
                lo = lo.min(p.min());
                hi = hi.max(p.max());
            }
            Err(e) => return failure(name, e),
        }
    }
    let ok = lo >= adaptive.gamma && hi <= 1.0;
    check(name, ok, format!("P in [{lo:.4}, {hi:.4}] over 4 iterations"))
}

fn budget(bundle: &VictimBundle, faces: &[ImageTensor], seed: u64) -> CheckResult {
    let name = "optimizer/linf_budget";
    let mut worst = 0u8;
    for (k, x) in faces.iter().enumerate() {
        let options = RunOptions {
            budget: PerturbationBudget {
                iterations: 6,
                ..PerturbationBudget::default()
            },
            seed: seed + k as u64,
            ..RunOptions::default()
        };
        let out = match protect(x, bundle, LossSettings::default(), options) {
            Ok(o) => o,
            Err(e) => return failure(name, e),
        };
        let a = quantize_u8(&out.image);
        let b = quantize_u8(x);
        let dev = a.iter().zip(&b).map(|(p, q)| p.abs_diff(*q)).max().unwrap_or(0);
        worst = worst.max(dev);
    }
    check(name, worst <= 12, format!("max byte deviation {worst} (limit 12)"))
}

fn degeneracy(bundle: &VictimBundle, x: &ImageTensor, seed: u64) -> CheckResult {
    let name = "optimizer/plain_degeneracy";
    let iterations = 5;
    let options = RunOptions {
        budget: PerturbationBudget {
            iterations,
            ..PerturbationBudget::default()
        },
        adaptive: AdaptiveConfig {
            enabled: false,
            ..AdaptiveConfig::default()
        },
        timesteps: TimestepPolicy::Uniform,
        seed,
        record_trajectory: true,
        ..RunOptions::default()
    };
    let mut run = match RunState::new(bundle, x, LossSettings::default(), options) {
        Ok(r) => r,
        Err(e) => return failure(name, e),
    };
    for _ in 0..iterations {
        if let Err(e) = run.step() {
            return failure(name, e);
        }
    }
    let mut z = run.trajectory()[0].clone();
    for (k, rec) in run.history().iter().enumerate() {
        let (_, g) = match run.objective().gradient(&z, rec.timestep) {
            Ok(v) => v,
            Err(e) => return failure(name, e),
        };
        let mut next = z.tensor().clone();
        for (v, &gi) in next.data_mut().iter_mut().zip(g.data()) {
            let s = if gi > 0.0 {
                1.0
            } else if gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v += options.budget.alpha * s;
        }
        z = LatentCode::new(next).expect("finite update");
        if z != run.trajectory()[k + 1] {
            return check(name, false, format!("trajectory diverges at iteration {k}"));
        }
    }
    check(name, true, format!("{iterations} iterations bit-identical to plain signed ascent"))
}

fn metrics(bundle: &VictimBundle, faces: &[ImageTensor]) -> CheckResult {
    let name = "metrics/self_consistency";
    let (a, b) = (&faces[0], &faces[1]);
    let result = (|| -> voidkit::Result<(f64, f64, f64, f64, bool)> {
        let l2 = metric_l2(a, b)?;
        let psnr_gap = (metric_psnr(a, b)? - psnr_from_l2(l2)).abs();
        let ism_self = metric_ism(a, a, bundle.evaluation_encoder())?;
        let l2_self = metric_l2(a, a)?;
        let bits8 = bit_reduce(&a.quantized(), 8)? == a.quantized();
        Ok((l2, psnr_gap, ism_self, l2_self, bits8))
    })();
    match result {
        Err(e) => failure(name, e),
        Ok((l2, gap, ism, l2_self, bits8)) => check(
            name,
            l2 > 0.0 && gap <= TOL && (ism - 1.0).abs() <= 1e-12 && l2_self == 0.0 && bits8,
            format!("psnr gap {gap:.1e}, ISM(x,x) = {ism:.12}, L2(x,x) = {l2_self}, bits_8 identity {bits8}"),
        ),
    }
}

fn determinism(bundle: &VictimBundle, x: &ImageTensor, seed: u64) -> CheckResult {
    let name = "optimizer/determinism";
    let options = RunOptions {
        budget: PerturbationBudget {
            iterations: 3,
            ..PerturbationBudget::default()
        },
        seed,
        ..RunOptions::default()
    };
    let run = || protect(x, bundle, LossSettings::default(), options);
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let same = quantize_u8(&a.image) == quantize_u8(&b.image) && a.history == b.history;
            check(name, same, "repeated seeded runs are byte-identical")
        }
        (Err(e), _) | (_, Err(e)) => failure(name, e),
    }
}

/// Runs every invariant check; the order and names are fixed.
pub fn run_selftest(bundle: &VictimBundle, seed: u64) -> Vec<CheckResult> {
    let (size, _) = bundle.image_dims();
    let faces: Vec<ImageTensor> = (0..3).map(|k| synthetic_face(seed.wrapping_add(100 + k), size)).collect();
    let mut out = gradients(bundle, &faces[0], seed);
    out.push(identity_case(bundle, &faces));
    out.extend(masks(bundle, &faces));
    out.extend(quantile_oracle(seed, 200));
    out.push(adaptive_band(bundle, &faces[1]));
    out.push(budget(bundle, &faces[..2], seed));
    out.push(degeneracy(bundle, &faces[2], seed));
    out.push(metrics(bundle, &faces));
    out.push(determinism(bundle, &faces[0], seed));
    out
}

/// Runs the checks, printing one line per check, and reports overall
/// success.
pub fn run_and_print(bundle: &VictimBundle, seed: u64) -> bool {
    let start = Instant::now();
    let results = run_selftest(bundle, seed);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} checks passed in {:.1}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    failed == 0
}
