//! The `protect`, `evaluate` and `dump-masks` batch commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use voidkit::evaluation::{row_labels, swap_and_score, MetricRow, RowStatus};
use voidkit::image::ImageTensor;
use voidkit::optimizer::{protect, RunState};
use voidkit::saliency::MaskSet;
use voidkit::victim::VictimBundle;

use crate::config::RunConfig;
use crate::io::{
    dump_adaptive, dump_mask_set, resolve_inputs, stem, write_csv, write_metrics, RunLogRow,
    SummaryRecord, TimingRecord,
};
use crate::pool::parallel_map;

/// Result of a batch protection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectBatch {
    pub records: Vec<SummaryRecord>,
    pub timings: Vec<TimingRecord>,
}

impl ProtectBatch {
    /// Inputs whose protection failed at run time.
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.status.starts_with("error")).count()
    }
}

enum Loaded {
    Image(ImageTensor),
    Skipped(String),
}

fn load_input(path: &Path, bundle: &VictimBundle) -> Loaded {
    match ImageTensor::load(path) {
        Err(e) => {
            log::warn!("skipping {}: {e}", path.display());
            Loaded::Skipped(format!("skipped: {e}"))
        }
        Ok(img) => match bundle.check_image(&img) {
            Ok(()) => Loaded::Image(img),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                Loaded::Skipped(format!("skipped: {e}"))
            }
        },
    }
}

fn skipped_record(input: &Path, seed: u64, status: String) -> SummaryRecord {
    SummaryRecord {
        input: input.display().to_string(),
        output: None,
        seed,
        status,
        linf_bytes: None,
        iterations: None,
        l_total_initial: None,
        l_total_final: None,
        localization_enabled: None,
    }
}

fn protect_one(
    cfg: &RunConfig,
    bundle: &VictimBundle,
    index: usize,
    input: &Path,
) -> Result<(SummaryRecord, TimingRecord)> {
    let options = cfg.run_options(index)?;
    let timing = |secs| TimingRecord {
        input: input.display().to_string(),
        wall_time_secs: secs,
    };
    let x = match load_input(input, bundle) {
        Loaded::Image(x) => x,
        Loaded::Skipped(reason) => return Ok((skipped_record(input, options.seed, reason), timing(0.0))),
    };
    let name = stem(input);
    let start = Instant::now();
    let outcome = match protect(&x, bundle, cfg.loss_settings()?, options) {
        Ok(o) => o,
        Err(e) => {
            log::error!("protecting {}: {e}", input.display());
            let record = skipped_record(input, options.seed, format!("error: {e}"));
            return Ok((record, timing(start.elapsed().as_secs_f64())));
        }
    };
    let out_png = cfg.output.join(format!("{name}.png"));
    outcome
        .image
        .save_png(&out_png)
        .with_context(|| format!("writing {}", out_png.display()))?;
    let log: Vec<RunLogRow> = outcome
        .history
        .iter()
        .map(|h| RunLogRow::new(h.iteration, &h.report))
        .collect();
    write_csv(&cfg.output.join(format!("{name}.log.csv")), &log)?;
    if cfg.dump.masks {
        let dir = cfg.output.join("masks").join(&name);
        let masks = MaskSet::build(&x, bundle, cfg.loss.tau_p)?;
        dump_mask_set(&dir, &masks)?;
        for h in &outcome.history {
            if let Some((m, p)) = &h.maps {
                dump_adaptive(&dir, &format!("iter_{:03}_", h.iteration), m, p)?;
            }
        }
    }
    let s = &outcome.summary;
    let record = SummaryRecord {
        input: input.display().to_string(),
        output: Some(format!("{name}.png")),
        seed: options.seed,
        status: match &s.aborted {
            None => "ok".into(),
            Some(reason) => format!("aborted: {reason}"),
        },
        linf_bytes: Some(s.linf_bytes),
        iterations: Some(s.iterations),
        l_total_initial: Some(s.l_total_initial),
        l_total_final: Some(s.l_total_final),
        localization_enabled: Some(s.localization_enabled),
    };
    log::info!(
        "{}: L_total {:.6} -> {:.6}, L∞ {} bytes, {:.2}s",
        input.display(),
        s.l_total_initial,
        s.l_total_final,
        s.linf_bytes,
        s.wall_time_secs
    );
    Ok((record, timing(s.wall_time_secs)))
}

/// Protects every resolved input. Writes `<stem>.png` and
/// `<stem>.log.csv` per image, then `summary.csv`, `timings.csv`, the
/// resolved `run_config.toml` and the `bundle.toml` it ran against.
pub fn cmd_protect(cfg: &RunConfig, bundle: &VictimBundle, manifest_toml: &str) -> Result<ProtectBatch> {
    let inputs = resolve_inputs(&cfg.input)?;
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    cfg.save(&cfg.output.join("run_config.toml"))?;
    std::fs::write(cfg.output.join("bundle.toml"), manifest_toml)?;
    let results = parallel_map(&inputs, cfg.jobs, |i, p| protect_one(cfg, bundle, i, p));
    let mut records = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    for r in results {
        let (rec, t) = r?;
        records.push(rec);
        timings.push(t);
    }
    write_csv(&cfg.output.join("summary.csv"), &records)?;
    write_csv(&cfg.output.join("timings.csv"), &timings)?;
    Ok(ProtectBatch { records, timings })
}

fn error_rows(pair_id: &str, labels: &[String], reason: &str, encoder: &str) -> Vec<MetricRow> {
    labels
        .iter()
        .map(|l| MetricRow::unmeasured(pair_id, l.clone(), 0.0, RowStatus::Error(reason.to_string()), encoder))
        .collect()
}

fn load_checked(path: &Path, bundle: &VictimBundle) -> std::result::Result<ImageTensor, String> {
    let img = ImageTensor::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    bundle
        .check_image(&img)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(img)
}

/// One evaluation pair: a clean source, its protected counterpart
/// `<protected>/<stem>.png`, and the swap target.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub clean: PathBuf,
    pub protected: PathBuf,
    pub target: PathBuf,
}

/// Pairs each clean input with its protected file and, cyclically in
/// sorted order, a target.
pub fn resolve_pairs(cfg: &RunConfig) -> Result<Vec<Pair>> {
    let targets_dir = cfg
        .evaluate
        .targets
        .as_ref()
        .context("config field `evaluate.targets`: a directory of swap targets is required")?;
    let targets = resolve_inputs(&targets_dir.display().to_string())?;
    let clean = resolve_inputs(&cfg.input)?;
    if targets.is_empty() && !clean.is_empty() {
        anyhow::bail!("config field `evaluate.targets`: no images in {}", targets_dir.display());
    }
    let protected_dir = cfg.protected_dir();
    Ok(clean
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let target = targets[i % targets.len()].clone();
            let name = stem(&c);
            Pair {
                id: format!("{name}@{}", stem(&target)),
                protected: protected_dir.join(format!("{name}.png")),
                clean: c,
                target,
            }
        })
        .collect())
}

/// Scores every pair across the transform suite and writes
/// `metrics.csv` and `metrics.jsonl`. A pair whose files cannot be read
/// contributes labeled error rows.
pub fn cmd_evaluate(cfg: &RunConfig, bundle: &VictimBundle) -> Result<Vec<MetricRow>> {
    let pairs = resolve_pairs(cfg)?;
    let suite = cfg.suite();
    let labels = row_labels(&suite);
    let encoder = bundle.evaluation_encoder().id().to_string();
    let per_pair = parallel_map(&pairs, cfg.jobs, |_, pair| {
        let loaded = load_checked(&pair.clean, bundle).and_then(|c| {
            let p = load_checked(&pair.protected, bundle)?;
            let t = load_checked(&pair.target, bundle)?;
            Ok((c, p, t))
        });
        match loaded {
            Ok((c, p, t)) => swap_and_score(&pair.id, &p, &c, &t, bundle, &suite),
            Err(reason) => {
                log::warn!("pair {}: {reason}", pair.id);
                error_rows(&pair.id, &labels, &reason, &encoder)
            }
        }
    });
    let rows: Vec<MetricRow> = per_pair.into_iter().flatten().collect();
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    write_metrics(&cfg.output, &rows)?;
    Ok(rows)
}

/// Writes the source masks and the first-iteration adaptive maps of every
/// input under `<output>/masks/<stem>/`. Returns the number of inputs
/// dumped.
pub fn cmd_dump_masks(cfg: &RunConfig, bundle: &VictimBundle) -> Result<usize> {
    let inputs = resolve_inputs(&cfg.input)?;
    let settings = cfg.loss_settings()?;
    let done = parallel_map(&inputs, cfg.jobs, |i, p| -> Result<bool> {
        let x = match load_input(p, bundle) {
            Loaded::Image(x) => x,
            Loaded::Skipped(_) => return Ok(false),
        };
        let dir = cfg.output.join("masks").join(stem(p));
        dump_mask_set(&dir, &MaskSet::build(&x, bundle, cfg.loss.tau_p)?)?;
        let run = RunState::new(bundle, &x, settings, cfg.run_options(i)?)?;
        let (m, pmap) = run.adaptive_maps()?;
        dump_adaptive(&dir, "perceptual_", &m, &pmap)?;
        Ok(true)
    });
    let mut count = 0;
    for d in done {
        count += usize::from(d?);
    }
    Ok(count)
}
