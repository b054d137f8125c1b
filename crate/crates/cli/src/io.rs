//! Input discovery and report persistence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use voidkit::evaluation::MetricRow;
use voidkit::losses::LossReport;
use voidkit::saliency::MaskSet;
use voidkit::types::SpatialMask;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Resolves a directory (its image files), a single file, or a glob
/// pattern into a sorted list. A pattern matching nothing yields an
/// empty list.
pub fn resolve_inputs(spec: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(spec);
    let mut out = if path.is_dir() {
        std::fs::read_dir(path)
            .with_context(|| format!("listing {spec}"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect()
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        glob::glob(spec)
            .with_context(|| format!("invalid input pattern `{spec}`"))?
            .filter_map(|e| e.ok())
            .filter(|p| p.is_file())
            .collect::<Vec<_>>()
    };
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// One row of a per-image run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub iteration: usize,
    pub l_loc: f64,
    pub l_id: f64,
    pub l_attn: f64,
    pub l_feat: f64,
    pub l_total: f64,
}

impl RunLogRow {
    pub fn new(iteration: usize, r: &LossReport) -> Self {
        Self {
            iteration,
            l_loc: r.l_loc,
            l_id: r.l_id,
            l_attn: r.l_attn,
            l_feat: r.l_feat,
            l_total: r.l_total,
        }
    }
}

/// One protected input in the batch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub input: String,
    /// File name of the protected PNG inside the output directory.
    pub output: Option<String>,
    pub seed: u64,
    /// `ok`, `aborted: …`, `skipped: …` or `error: …`.
    pub status: String,
    pub linf_bytes: Option<u8>,
    pub iterations: Option<usize>,
    pub l_total_initial: Option<f64>,
    pub l_total_final: Option<f64>,
    pub localization_enabled: Option<bool>,
}

/// Wall time of one input, kept apart from the summary so reports stay
/// byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub input: String,
    pub wall_time_secs: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

/// Metrics table in both formats: `metrics.csv` and `metrics.jsonl`.
pub fn write_metrics(dir: &Path, rows: &[MetricRow]) -> Result<()> {
    write_csv(&dir.join("metrics.csv"), rows)?;
    write_jsonl(&dir.join("metrics.jsonl"), rows)
}

fn save_mask(dir: &Path, name: &str, mask: &SpatialMask) -> Result<()> {
    let path = dir.join(format!("{name}.png"));
    mask.save_png(&path).with_context(|| format!("writing {}", path.display()))
}

/// Writes every source-side mask as a grayscale PNG into `dir`.
pub fn dump_mask_set(dir: &Path, masks: &MaskSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_mask(dir, "anchor", &masks.anchor)?;
    save_mask(dir, "semantic", &masks.semantic)?;
    save_mask(dir, "cam", &masks.cam)?;
    for (layer, m) in &masks.per_layer {
        save_mask(dir, &format!("{layer}_semantic"), &m.semantic)?;
        save_mask(dir, &format!("{layer}_cam"), &m.cam)?;
    }
    Ok(())
}

/// Writes the binary and smoothed adaptive maps under a common prefix.
pub fn dump_adaptive(dir: &Path, prefix: &str, m: &SpatialMask, p: &SpatialMask) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_mask(dir, &format!("{prefix}binary"), m)?;
    save_mask(dir, &format!("{prefix}smooth"), p)
}
