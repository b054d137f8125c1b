//! Acceptance criteria 1 to 10 on seeded surrogate bundles. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voidkit::evaluation::{
    bit_reduce, metric_ism, metric_l2, swap_and_score, MetricRow, RowStatus, TransformSuite, PSNR_CAP,
};
use voidkit::gradcheck::{check_objective_gradients, GradCheckConfig};
use voidkit::image::ImageTensor;
use voidkit::losses::{LossSettings, Objective, TimestepPolicy};
use voidkit::optimizer::{
    binarize_quantile, perceptual_map_step, protect, AdaptiveConfig, ProtectOutcome, RunOptions, RunState,
};
use voidkit::synth::synthetic_face;
use voidkit::types::{LatentCode, MaskKind, PerturbationBudget, SpatialMask};
use voidkit::victim::VictimBundle;
use voidkit_cli::config::RunConfig;
use voidkit_cli::io::{read_csv, write_metrics, SummaryRecord};
use voidkit_cli::selftest::run_selftest;

const GRAD_STEP: f64 = 1e-4;
const GRAD_COORDS: usize = 20;
const GRAD_TOL: f64 = 1e-2;
const GRAD_TIME: Duration = Duration::from_secs(30);
const IDENTITY_TOL: f64 = 1e-9;
const IDENTITY_SEEDS: u64 = 10;
const BUDGET_RUNS: u64 = 100;
const BUDGET_BYTES: u8 = 12;
const ORACLE_ARRAYS: usize = 1000;
const ORACLE_MAX_LEN: usize = 256;
const DEGENERACY_SEEDS: u64 = 5;
const DEGENERACY_ITERS: usize = 30;
const PAIRS: u64 = 20;
const INCREASE_SHARE: f64 = 0.95;
const PAIRS_TIME: Duration = Duration::from_secs(300);
const PSNR_TOL: f64 = 1e-9;
const SELFTEST_TIME: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn face(seed: u64) -> ImageTensor {
    synthetic_face(seed, 64)
}

fn c1_gradients() -> Outcome {
    let bundle = VictimBundle::surrogate_seeded(0);
    let cfg = GradCheckConfig {
        step: GRAD_STEP,
        coordinates: GRAD_COORDS,
        tolerance: GRAD_TOL,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let report = check_objective_gradients(&bundle, &face(17), LossSettings::default(), &cfg).map_err(e)?;
    let elapsed = start.elapsed();
    let names: Vec<&str> = report.terms.iter().map(|t| t.name.as_str()).collect();
    ensure(names == ["loc", "id", "attn", "feat", "total"], || format!("terms checked: {names:?}"))?;
    let mut worst = 0.0f64;
    for t in &report.terms {
        ensure(t.samples.len() == GRAD_COORDS, || format!("{}: {} coords", t.name, t.samples.len()))?;
        ensure(t.max_rel_error < GRAD_TOL, || format!("{}: rel err {:.3e}", t.name, t.max_rel_error))?;
        worst = worst.max(t.max_rel_error);
    }
    ensure(elapsed < GRAD_TIME, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "5 gradients x {GRAD_COORDS} coords, max rel err {worst:.2e} < {GRAD_TOL:e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn c2_identity() -> Outcome {
    let settings = LossSettings::default();
    let mut worst = 0.0f64;
    for seed in 0..IDENTITY_SEEDS {
        let bundle = VictimBundle::surrogate_seeded(seed);
        let x = face(200 + seed);
        let objective = Objective::new(&bundle, &x, settings, seed).map_err(e)?;
        ensure(objective.enabled()[0], || format!("bundle {seed}: empty anchor mask"))?;
        for t in 0..objective.timestep_count() {
            let r = objective.evaluate_image(&x, t).map_err(e)?;
            for (what, dev) in [
                ("L_loc", (r.l_loc - 1.0).abs()),
                ("L_attn", r.l_attn.abs()),
                ("L_feat", r.l_feat.abs()),
                ("hinge", (r.l_id_hinge - settings.margin).abs()),
            ] {
                ensure(dev <= IDENTITY_TOL, || format!("bundle {seed} t={t}: {what} off by {dev:e}"))?;
                worst = worst.max(dev);
            }
        }
    }
    Ok(format!("{IDENTITY_SEEDS} bundle seeds, max deviation {worst:.1e} <= {IDENTITY_TOL:e}"))
}

fn rgb_bytes(path: &Path) -> Result<Vec<u8>, String> {
    Ok(image::open(path).map_err(e)?.to_rgb8().into_raw())
}

fn c3_budget(work: &Path) -> Outcome {
    let input = work.join("budget_in");
    let output = work.join("budget_out");
    std::fs::create_dir_all(&input).map_err(e)?;
    for k in 0..BUDGET_RUNS {
        face(300 + k).save_png(&input.join(format!("f{k:03}.png"))).map_err(e)?;
    }
    let code = voidkit_cli::run([
        "voidkit",
        "protect",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--epsilon",
        "12/255",
    ]);
    ensure(code == 0, || format!("protect exited {code}"))?;
    let summary: Vec<SummaryRecord> = read_csv(&output.join("summary.csv")).map_err(e)?;
    ensure(summary.len() == BUDGET_RUNS as usize, || format!("{} summary rows", summary.len()))?;
    let mut worst = 0u8;
    for k in 0..BUDGET_RUNS {
        let name = format!("f{k:03}.png");
        let src = rgb_bytes(&input.join(&name))?;
        let out = rgb_bytes(&output.join(&name))?;
        ensure(src.len() == out.len(), || format!("{name}: size changed"))?;
        let dev = src.iter().zip(&out).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0);
        ensure(dev <= BUDGET_BYTES, || format!("{name}: byte deviation {dev}"))?;
        worst = worst.max(dev);
    }
    Ok(format!(
        "{BUDGET_RUNS} protected files, max byte deviation {worst} <= {BUDGET_BYTES}"
    ))
}

fn sort_oracle(values: &[f64], q: f64) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let threshold = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    values.iter().map(|&v| f64::from(u8::from(v > threshold))).collect()
}

fn tie_free(values: &[f64]) -> bool {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).all(|w| w[0] != w[1])
}

fn c4_adaptive_maps() -> Outcome {
    let bundle = VictimBundle::surrogate_seeded(0);
    let adaptive = AdaptiveConfig::default();
    let mut iterations = 0;
    let mut fraction_checked = 0;
    for seed in 0..3u64 {
        let x = face(400 + seed);
        let options = RunOptions {
            seed,
            record_maps: true,
            record_trajectory: true,
            ..RunOptions::default()
        };
        let mut run = RunState::new(&bundle, &x, LossSettings::default(), options).map_err(e)?;
        for _ in 0..options.budget.iterations {
            run.step().map_err(e)?;
        }
        for (i, rec) in run.history().iter().enumerate() {
            let (m, p) = rec.maps.as_ref().ok_or("maps not recorded")?;
            ensure(p.min() >= adaptive.gamma && p.max() <= 1.0, || {
                format!("seed {seed} iter {i}: P in [{}, {}]", p.min(), p.max())
            })?;
            let xi = run.objective().project_decode(&run.trajectory()[i]).map_err(e)?;
            let s = perceptual_map_step(&xi, &x, bundle.perceptual.as_ref()).map_err(e)?;
            if tie_free(s.data()) {
                let n = s.data().len() as f64;
                let dev = (m.fraction_ones() - (1.0 - adaptive.q)).abs();
                ensure(dev <= 2.0 / n, || format!("seed {seed} iter {i}: fraction off by {dev}"))?;
                fraction_checked += 1;
            }
            iterations += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..ORACLE_ARRAYS {
        let len = rng.random_range(1..=ORACLE_MAX_LEN);
        let values: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let q = rng.random_range(0.0..1.0f64).clamp(1e-6, 1.0 - 1e-6);
        let s = SpatialMask::new(1, len, values.clone(), MaskKind::Field).map_err(e)?;
        let m = binarize_quantile(&s, q).map_err(e)?;
        ensure(m.data() == sort_oracle(&values, q).as_slice(), || format!("array {k} differs from oracle"))?;
        let dev = (m.fraction_ones() - (1.0 - q)).abs();
        ensure(dev <= 2.0 / len as f64, || format!("array {k}: fraction off by {dev}"))?;
    }
    Ok(format!(
        "P in [gamma, 1] on {iterations} iterations, fraction of ones within 2/(HW) on {fraction_checked} tie-free maps, {ORACLE_ARRAYS} arrays match the sort oracle"
    ))
}

fn c5_degeneracy() -> Outcome {
    let bundle = VictimBundle::surrogate_seeded(0);
    for seed in 0..DEGENERACY_SEEDS {
        let x = face(500 + seed);
        let options = RunOptions {
            budget: PerturbationBudget {
                iterations: DEGENERACY_ITERS,
                ..PerturbationBudget::default()
            },
            adaptive: AdaptiveConfig {
                enabled: false,
                ..AdaptiveConfig::default()
            },
            seed,
            record_trajectory: true,
            ..RunOptions::default()
        };
        let mut run = RunState::new(&bundle, &x, LossSettings::default(), options).map_err(e)?;
        for _ in 0..DEGENERACY_ITERS {
            run.step().map_err(e)?;
        }
        let alpha = options.budget.alpha;
        let mut z = run.trajectory()[0].clone();
        for (i, rec) in run.history().iter().enumerate() {
            let (_, g) = run.objective().gradient(&z, rec.timestep).map_err(e)?;
            let mut next = z.tensor().clone();
            for (v, &gi) in next.data_mut().iter_mut().zip(g.data()) {
                if gi > 0.0 {
                    *v += alpha;
                } else if gi < 0.0 {
                    *v -= alpha;
                }
            }
            z = LatentCode::new(next).map_err(e)?;
            let got = &run.trajectory()[i + 1];
            let identical = z
                .tensor()
                .data()
                .iter()
                .zip(got.tensor().data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(identical, || format!("seed {seed}: diverges at iteration {i}"))?;
        }
    }
    Ok(format!(
        "{DEGENERACY_SEEDS} seeds x {DEGENERACY_ITERS} iterations bit-identical to plain signed ascent"
    ))
}

struct PairRun {
    source: ImageTensor,
    target: ImageTensor,
    adaptive: ProtectOutcome,
}

fn pair_runs(bundle: &VictimBundle) -> Result<(Vec<PairRun>, Duration), String> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..PAIRS {
        let source = face(1000 + seed);
        let target = face(5000 + seed);
        let options = RunOptions {
            seed,
            ..RunOptions::default()
        };
        let adaptive = protect(&source, bundle, LossSettings::default(), options).map_err(e)?;
        runs.push(PairRun {
            source,
            target,
            adaptive,
        });
    }
    Ok((runs, start.elapsed()))
}

fn c6_effectiveness(bundle: &VictimBundle, runs: &[PairRun], protect_time: Duration) -> Outcome {
    let start = Instant::now();
    let empty = TransformSuite {
        jpeg_qualities: vec![],
        bit_depths: vec![],
        resize_factors: vec![],
    };
    let (mut ism_prot, mut ism_clean, mut l2, mut increased) = (0.0, 0.0, 0.0, 0usize);
    for (k, r) in runs.iter().enumerate() {
        let rows = swap_and_score(&format!("p{k}"), &r.adaptive.image, &r.source, &r.target, bundle, &empty);
        let row = &rows[0];
        ensure(row.status == RowStatus::Ok, || format!("pair {k}: {:?}", row.status))?;
        ism_prot += row.ism;
        ism_clean += row.ism_clean;
        l2 += row.l2;
        let s = &r.adaptive.summary;
        increased += usize::from(s.l_total_final > s.l_total_initial);
    }
    let n = runs.len() as f64;
    let (ism_prot, ism_clean, l2) = (ism_prot / n, ism_clean / n, l2 / n);
    let share = increased as f64 / n;
    let elapsed = protect_time + start.elapsed();
    ensure(ism_prot < ism_clean, || format!("mean ISM protected {ism_prot:.4} >= clean {ism_clean:.4}"))?;
    ensure(l2 > 0.0, || "mean L2 is zero".into())?;
    ensure(share >= INCREASE_SHARE, || format!("L_total increased in {increased}/{}", runs.len()))?;
    ensure(elapsed < PAIRS_TIME, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} pairs: mean ISM protected {ism_prot:.4} < clean {ism_clean:.4}, mean L2 {l2:.2e} > 0, L_total up in {increased}/{}, {:.1}s",
        runs.len(),
        runs.len(),
        elapsed.as_secs_f64()
    ))
}

fn c7_adaptive_benefit(bundle: &VictimBundle, runs: &[PairRun]) -> Outcome {
    let (mut with, mut without) = (0.0, 0.0);
    for (seed, r) in runs.iter().enumerate() {
        let options = RunOptions {
            seed: seed as u64,
            adaptive: AdaptiveConfig {
                enabled: false,
                ..AdaptiveConfig::default()
            },
            ..RunOptions::default()
        };
        let plain = protect(&r.source, bundle, LossSettings::default(), options).map_err(e)?;
        with += bundle.perceptual.distance_map(&r.adaptive.image, &r.source).map_err(e)?.0;
        without += bundle.perceptual.distance_map(&plain.image, &r.source).map_err(e)?.0;
    }
    let n = runs.len() as f64;
    let (with, without) = (with / n, without / n);
    ensure(with <= without, || format!("adaptive {with:.4} > plain {without:.4}"))?;
    Ok(format!(
        "{} seeds: mean perceptual distance adaptive {with:.4} <= plain {without:.4}",
        runs.len()
    ))
}

fn c8_robustness(bundle: &VictimBundle, runs: &[PairRun]) -> Result<(String, Vec<MetricRow>), String> {
    let suite = TransformSuite::default();
    let labels = voidkit::evaluation::row_labels(&suite);
    for r in runs.iter().take(3) {
        for t in suite.transforms() {
            let a = t.apply(&r.adaptive.image).map_err(e)?;
            let b = t.apply(&r.adaptive.image).map_err(e)?;
            ensure(a == b, || format!("{t} is not deterministic"))?;
        }
        let q = r.source.quantized();
        ensure(bit_reduce(&q, 8).map_err(e)? == q, || "bits_8 changed a quantized image".into())?;
        ensure(bit_reduce(&r.adaptive.image, 8).map_err(e)? == r.adaptive.image, || {
            "bits_8 changed a protected image".into()
        })?;
    }
    let mut rows = Vec::new();
    let pairs = 4;
    for (k, r) in runs.iter().take(pairs).enumerate() {
        rows.extend(swap_and_score(&format!("p{k}"), &r.adaptive.image, &r.source, &r.target, bundle, &suite));
    }
    ensure(rows.len() == pairs * labels.len(), || format!("{} rows", rows.len()))?;
    for (k, chunk) in rows.chunks(labels.len()).enumerate() {
        let got: Vec<&str> = chunk.iter().map(|r| r.transform.as_str()).collect();
        ensure(got == labels, || format!("pair {k}: transforms {got:?}"))?;
        for row in chunk {
            ensure(!matches!(row.status, RowStatus::Error(_)), || {
                format!("pair {k} {}: {:?}", row.transform, row.status)
            })?;
        }
    }
    Ok((
        format!(
            "{} transforms deterministic, bits_8 identity, {pairs} pairs x {} cells all present",
            suite.transforms().len(),
            labels.len()
        ),
        rows,
    ))
}

fn c9_metrics(work: &Path, rows: &[MetricRow], runs: &[PairRun], bundle: &VictimBundle) -> Outcome {
    let dir = work.join("metrics");
    std::fs::create_dir_all(&dir).map_err(e)?;
    write_metrics(&dir, rows).map_err(e)?;
    let reloaded: Vec<MetricRow> = read_csv(&dir.join("metrics.csv")).map_err(e)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for row in reloaded.iter().filter(|r| r.status == RowStatus::Ok) {
        let recomputed = if row.l2 == 0.0 {
            PSNR_CAP
        } else {
            (10.0 * (1.0 / row.l2).log10()).min(PSNR_CAP)
        };
        worst = worst.max((recomputed - row.psnr).abs());
        checked += 1;
    }
    ensure(checked > 0, || "no measured rows".into())?;
    ensure(worst <= PSNR_TOL, || format!("PSNR recomputation off by {worst:e} dB"))?;
    let encoder = bundle.evaluation_encoder();
    for r in runs.iter().take(5) {
        for img in [&r.source, &r.adaptive.image, &r.target] {
            let ism = metric_ism(img, img, encoder).map_err(e)?;
            ensure((ism - 1.0).abs() <= 1e-12, || format!("ISM(x, x) = {ism}"))?;
            let l2 = metric_l2(img, img).map_err(e)?;
            ensure(l2 == 0.0, || format!("L2(x, x) = {l2}"))?;
        }
    }
    Ok(format!(
        "PSNR from reloaded L2 within {worst:.1e} dB on {checked} rows, ISM(x,x) = 1, L2(x,x) = 0"
    ))
}

fn read_tree(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(e)?
        .filter_map(|f| f.ok().map(|f| f.path()))
        .filter(|p| {
            p.is_file() && p.file_name().is_some_and(|n| n != "timings.csv" && n != "run_config.toml")
        })
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(e)?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn c10_determinism(work: &Path) -> Outcome {
    let input = work.join("det_in");
    let targets = work.join("det_targets");
    std::fs::create_dir_all(&input).map_err(e)?;
    std::fs::create_dir_all(&targets).map_err(e)?;
    for k in 0..3 {
        face(700 + k).save_png(&input.join(format!("d{k}.png"))).map_err(e)?;
        face(800 + k).save_png(&targets.join(format!("t{k}.png"))).map_err(e)?;
    }
    let mut trees = Vec::new();
    for rep in 0..2 {
        let out = work.join(format!("det_out{rep}"));
        let run = |cmd: &str| {
            voidkit_cli::run([
                "voidkit",
                cmd,
                "--input",
                input.to_str().unwrap(),
                "--output",
                out.to_str().unwrap(),
                "--seed",
                "42",
                "--iters",
                "10",
            ])
        };
        ensure(run("protect") == 0, || "protect failed".into())?;
        let cfg = RunConfig {
            input: input.to_str().unwrap().into(),
            output: out.join("report"),
            evaluate: voidkit_cli::config::EvaluateConfig {
                protected: Some(out.clone()),
                targets: Some(targets.clone()),
                ..Default::default()
            },
            ..RunConfig::default()
        };
        voidkit_cli::commands::cmd_evaluate(&cfg, &VictimBundle::surrogate_seeded(0)).map_err(e)?;
        let mut tree = read_tree(&out)?;
        tree.extend(read_tree(&out.join("report"))?);
        trees.push(tree);
    }
    for (a, b) in trees[0].iter().zip(&trees[1]) {
        ensure(a == b, || format!("{} differs between reruns", a.0))?;
    }
    ensure(trees[0].len() == trees[1].len(), || "file sets differ between reruns".into())?;
    let mut configs = Vec::new();
    for rep in 0..2 {
        let mut c = RunConfig::load(&work.join(format!("det_out{rep}")).join("run_config.toml")).map_err(e)?;
        c.output = Default::default();
        configs.push(c);
    }
    ensure(configs[0] == configs[1], || "recorded configs differ beyond the output path".into())?;
    let files = trees[0].len();

    let mut custom = RunConfig::default();
    custom.seed = u64::MAX;
    custom.bundle = Some("bundle.toml".into());
    custom.budget.epsilon = 8.0 / 255.0;
    custom.loss.lambda_attn = 0.1 + 0.2;
    custom.adaptive.sigma = std::f64::consts::PI;
    custom.timesteps = TimestepPolicy::Fixed(7);
    custom.evaluate.resize_factors = vec![1.0 / 3.0];
    for cfg in [RunConfig::default(), custom] {
        let path = work.join("rt.toml");
        cfg.save(&path).map_err(e)?;
        let back = RunConfig::load(&path).map_err(e)?;
        ensure(back == cfg, || format!("config round trip changed {cfg:?}"))?;
    }

    let bundle = VictimBundle::surrogate_seeded(0);
    let start = Instant::now();
    let checks = run_selftest(&bundle, 0);
    let elapsed = start.elapsed();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("selftest failures: {failed:?}"))?;
    ensure(elapsed < SELFTEST_TIME, || format!("selftest took {elapsed:?}"))?;
    Ok(format!(
        "{files} output and report files byte-identical across reruns, config round-trips, selftest {} checks in {:.1}s",
        checks.len(),
        elapsed.as_secs_f64()
    ))
}

fn report(results: &mut Vec<bool>, number: usize, title: &str, outcome: Outcome) {
    let ok = outcome.is_ok();
    let detail = outcome.unwrap_or_else(|m| m);
    println!(
        "criterion {number:>2} {} {title}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    results.push(ok);
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    let mut results = Vec::new();
    report(&mut results, 1, "gradient correctness", c1_gradients());
    report(&mut results, 2, "identity case", c2_identity());
    report(&mut results, 3, "budget enforcement", c3_budget(work));
    report(&mut results, 4, "adaptive-map properties", c4_adaptive_maps());
    report(&mut results, 5, "equivalence degeneracy", c5_degeneracy());

    let bundle = VictimBundle::surrogate_seeded(0);
    match pair_runs(&bundle) {
        Err(m) => {
            for (n, title) in [
                (6, "attack effectiveness ordering"),
                (7, "adaptive quality benefit"),
                (8, "robustness harness"),
                (9, "metric self-consistency"),
            ] {
                report(&mut results, n, title, Err(m.clone()));
            }
        }
        Ok((runs, protect_time)) => {
            report(
                &mut results,
                6,
                "attack effectiveness ordering",
                c6_effectiveness(&bundle, &runs, protect_time),
            );
            report(&mut results, 7, "adaptive quality benefit", c7_adaptive_benefit(&bundle, &runs));
            match c8_robustness(&bundle, &runs) {
                Ok((detail, rows)) => {
                    report(&mut results, 8, "robustness harness", Ok(detail));
                    report(&mut results, 9, "metric self-consistency", c9_metrics(work, &rows, &runs, &bundle));
                }
                Err(m) => {
                    report(&mut results, 8, "robustness harness", Err(m));
                    report(&mut results, 9, "metric self-consistency", c9_metrics(work, &[], &runs, &bundle));
                }
            }
        }
    }
    report(&mut results, 10, "determinism and round-trip", c10_determinism(work));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed} of {} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

