//! Protection metrics, the lossy-transform suite, and swap-based scoring.

use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize_u8, ImageTensor};
use crate::resample::Resize2d;
use crate::types::cosine_similarity;
use crate::victim::{IdentityEncoder, SwapOutcome, VictimBundle};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Mean squared difference over all elements.
pub fn metric_l2(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10·log10(1 / mse)` with unit peak, capped at [`PSNR_CAP`].
pub fn psnr_from_l2(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn metric_psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_l2(metric_l2(a, b)?))
}

/// Cosine similarity of the evaluation encoder's embeddings.
pub fn metric_ism(src: &ImageTensor, swapped: &ImageTensor, encoder: &dyn IdentityEncoder) -> Result<f64> {
    let u = encoder.embed(src)?;
    let v = encoder.embed(swapped)?;
    cosine_similarity(&u.data, &v.data)
}

/// A lossy operation applied to a protected image before swapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    Jpeg(u8),
    BitDepth(u8),
    Resize(f64),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => f.write_str("none"),
            Transform::Jpeg(q) => write!(f, "jpeg_q{q}"),
            Transform::BitDepth(b) => write!(f, "bits_{b}"),
            Transform::Resize(r) => write!(f, "resize_{r}"),
        }
    }
}

impl Transform {
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        match *self {
            Transform::Identity => Ok(img.clone()),
            Transform::Jpeg(q) => jpeg_round_trip(img, q),
            Transform::BitDepth(b) => bit_reduce(img, b),
            Transform::Resize(r) => resize_round_trip(img, r),
        }
    }
}

/// Encodes at `quality` with the `image` crate's baseline JPEG encoder and
/// decodes back.
pub fn jpeg_round_trip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::param("jpeg_quality", "must lie in 1..=100"));
    }
    let (h, w) = img.dims();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        &quantize_u8(img),
        w as u32,
        h as u32,
        ExtendedColorType::Rgb8,
    )?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8();
    ImageTensor::from_rgb8(&decoded)
}

/// Keeps the top `bits` bits of each 8-bit level:
/// `floor(v·(2^b − 1)) / (2^b − 1)` evaluated exactly on the byte value.
pub fn bit_reduce(img: &ImageTensor, bits: u8) -> Result<ImageTensor> {
    if !(1..=8).contains(&bits) {
        return Err(Error::param("bits", "must lie in 1..=8"));
    }
    let levels = (1u32 << bits) - 1;
    let (h, w) = img.dims();
    let data = quantize_u8(img)
        .into_iter()
        .map(|byte| (byte as u32 * levels / 255) as f64 / levels as f64)
        .collect();
    ImageTensor::new(h, w, data)
}

/// Bilinear resize by `factor`, then back to the original shape.
pub fn resize_round_trip(img: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::param("resize_factor", "must be positive"));
    }
    let (h, w) = img.dims();
    let small = (
        ((h as f64 * factor).round() as usize).max(1),
        ((w as f64 * factor).round() as usize).max(1),
    );
    let chw = img.to_chw();
    let down = Resize2d::bilinear((h, w), small).apply(&chw);
    let up = Resize2d::bilinear(small, (h, w)).apply(&down);
    ImageTensor::from_chw(&up.map(|v| v.clamp(0.0, 1.0)))
}

/// Parameters of the robustness suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSuite {
    pub jpeg_qualities: Vec<u8>,
    pub bit_depths: Vec<u8>,
    pub resize_factors: Vec<f64>,
}

impl Default for TransformSuite {
    fn default() -> Self {
        Self {
            jpeg_qualities: vec![50, 70, 90],
            bit_depths: vec![3, 5, 8],
            resize_factors: vec![0.5, 0.75],
        }
    }
}

impl TransformSuite {
    /// Lossy transforms, without the identity.
    pub fn transforms(&self) -> Vec<Transform> {
        let mut out: Vec<Transform> = self.jpeg_qualities.iter().map(|&q| Transform::Jpeg(q)).collect();
        out.extend(self.bit_depths.iter().map(|&b| Transform::BitDepth(b)));
        out.extend(self.resize_factors.iter().map(|&r| Transform::Resize(r)));
        out
    }
}

/// Applies every lossy transform; failures stay in their labeled slot.
pub fn transform_suite(img: &ImageTensor, suite: &TransformSuite) -> Vec<(String, Result<ImageTensor>)> {
    suite
        .transforms()
        .into_iter()
        .map(|t| (t.to_string(), t.apply(img)))
        .collect()
}

/// Outcome of one metric cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum RowStatus {
    Ok,
    /// The protected input defeated detection; counts as a protection success.
    NoFace,
    Error(String),
}

impl From<RowStatus> for String {
    fn from(s: RowStatus) -> String {
        match s {
            RowStatus::Ok => "ok".into(),
            RowStatus::NoFace => "no_face".into(),
            RowStatus::Error(m) => format!("error: {m}"),
        }
    }
}

impl From<String> for RowStatus {
    fn from(s: String) -> Self {
        match s.as_str() {
            "ok" => RowStatus::Ok,
            "no_face" => RowStatus::NoFace,
            other => RowStatus::Error(other.strip_prefix("error: ").unwrap_or(other).to_string()),
        }
    }
}

/// One `(pair, transform)` cell of the results table.
///
/// `l2`/`psnr` compare the clean swap with the protected swap; `ism`
/// compares the clean source with the protected swap and `ism_clean` the
/// clean source with the clean swap. Rows without a measurement carry
/// `l2 = psnr = -1` and `ism = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub pair_id: String,
    pub transform: String,
    pub l2: f64,
    pub psnr: f64,
    pub ism: f64,
    pub ism_clean: f64,
    pub status: RowStatus,
    pub eval_encoder: String,
}

impl MetricRow {
    /// A row whose measurement could not be taken.
    pub fn unmeasured(pair_id: &str, transform: String, ism_clean: f64, status: RowStatus, encoder: &str) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            transform,
            l2: -1.0,
            psnr: -1.0,
            ism: 0.0,
            ism_clean,
            status,
            eval_encoder: encoder.to_string(),
        }
    }
}

/// Transform labels of one pair's rows, in row order.
pub fn row_labels(suite: &TransformSuite) -> Vec<String> {
    std::iter::once(Transform::Identity)
        .chain(suite.transforms())
        .map(|t| t.to_string())
        .collect()
}

fn score_cell(
    pair_id: &str,
    transform: Transform,
    src_protected: &ImageTensor,
    src_clean: &ImageTensor,
    target: &ImageTensor,
    bundle: &VictimBundle,
) -> MetricRow {
    let encoder = bundle.evaluation_encoder();
    let label = transform.to_string();
    let clean = transform
        .apply(src_clean)
        .and_then(|c| bundle.swap(&c, target))
        .and_then(|o| match o {
            SwapOutcome::Swapped(s) => Ok((metric_ism(src_clean, &s, encoder)?, s)),
            SwapOutcome::NoFace => Err(Error::InvalidImage("no face detected in clean source".into())),
        });
    let (ism_clean, clean_swap) = match clean {
        Ok(c) => c,
        Err(e) => return MetricRow::unmeasured(pair_id, label, 0.0, RowStatus::Error(e.to_string()), encoder.id()),
    };
    let protected = transform
        .apply(src_protected)
        .and_then(|p| bundle.swap(&p, target))
        .and_then(|o| match o {
            SwapOutcome::NoFace => Ok(None),
            SwapOutcome::Swapped(s) => Ok(Some((metric_l2(&clean_swap, &s)?, metric_ism(src_clean, &s, encoder)?))),
        });
    match protected {
        Ok(Some((l2, ism))) => MetricRow {
            pair_id: pair_id.to_string(),
            transform: label,
            l2,
            psnr: psnr_from_l2(l2),
            ism,
            ism_clean,
            status: RowStatus::Ok,
            eval_encoder: encoder.id().to_string(),
        },
        Ok(None) => MetricRow::unmeasured(pair_id, label, ism_clean, RowStatus::NoFace, encoder.id()),
        Err(e) => MetricRow::unmeasured(pair_id, label, ism_clean, RowStatus::Error(e.to_string()), encoder.id()),
    }
}

/// Scores one source/target pair: the untransformed protected image plus
/// every suite transform, `1 + |suite|` rows in total. Each transform is
/// applied to both sources, so `l2` compares the swaps of equally degraded
/// inputs. Failures become labeled rows rather than errors.
pub fn swap_and_score(
    pair_id: &str,
    src_protected: &ImageTensor,
    src_clean: &ImageTensor,
    target: &ImageTensor,
    bundle: &VictimBundle,
    suite: &TransformSuite,
) -> Vec<MetricRow> {
    std::iter::once(Transform::Identity)
        .chain(suite.transforms())
        .map(|t| score_cell(pair_id, t, src_protected, src_clean, target, bundle))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_face;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let a = synthetic_face(1, 32);
        assert_eq!(metric_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(metric_psnr(&a, &a).unwrap(), 100.0);
        let b = ImageTensor::filled(8, 8, 0.5).unwrap();
        let c = ImageTensor::filled(8, 8, 0.4).unwrap();
        assert!((metric_l2(&b, &c).unwrap() - 0.01).abs() < 1e-15);
        assert!((metric_psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(metric_l2(&b, &c).unwrap(), metric_l2(&c, &b).unwrap());
        assert!(metric_l2(&a, &b).is_err());
    }

    #[test]
    fn ism_self_similarity() {
        let bundle = VictimBundle::surrogate_seeded(1);
        let a = synthetic_face(1, 64);
        let ism = metric_ism(&a, &a, bundle.evaluation_encoder()).unwrap();
        assert!((ism - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transform_examples() {
        let a = synthetic_face(5, 64);
        assert_eq!(bit_reduce(&a, 8).unwrap(), a);
        let one = bit_reduce(&a, 1).unwrap();
        for c in 0..3 {
            let mut levels: Vec<u8> = quantize_u8(&one).iter().skip(c).step_by(3).copied().collect();
            levels.sort_unstable();
            levels.dedup();
            assert!(levels.len() <= 2);
        }
        let r = resize_round_trip(&a, 1.0).unwrap();
        assert_eq!(r.dims(), a.dims());
        for (p, q) in r.data().iter().zip(a.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(resize_round_trip(&a, 0.5).unwrap().dims(), (64, 64));
        assert_eq!(jpeg_round_trip(&a, 70).unwrap(), jpeg_round_trip(&a, 70).unwrap());
        assert!(jpeg_round_trip(&a, 0).is_err());
        let suite = transform_suite(&a, &TransformSuite::default());
        let labels: Vec<&str> = suite.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(
            labels,
            ["jpeg_q50", "jpeg_q70", "jpeg_q90", "bits_3", "bits_5", "bits_8", "resize_0.5", "resize_0.75"]
        );
    }

    #[test]
    fn null_protection_rows() {
        let bundle = VictimBundle::surrogate_seeded(2);
        let src = synthetic_face(3, 64);
        let tgt = synthetic_face(4, 64);
        let rows = swap_and_score("p0", &src, &src, &tgt, &bundle, &TransformSuite::default());
        assert_eq!(rows.len(), 9);
        let labels: Vec<&str> = rows.iter().map(|r| r.transform.as_str()).collect();
        assert_eq!(labels, row_labels(&TransformSuite::default()));
        for r in &rows {
            assert_eq!(r.status, RowStatus::Ok);
            assert_eq!(r.l2, 0.0);
            assert_eq!(r.psnr, PSNR_CAP);
            assert_eq!(r.ism, r.ism_clean);
            assert_eq!(r.eval_encoder, "eval-ism");
        }
    }

    #[test]
    fn status_strings_round_trip() {
        for s in [RowStatus::Ok, RowStatus::NoFace, RowStatus::Error("x: y".into())] {
            assert_eq!(RowStatus::from(String::from(s.clone())), s);
        }
    }

    proptest! {
        #[test]
        fn psnr_consistent_with_l2(mse in 1e-9f64..1.0) {
            let p = psnr_from_l2(mse);
            prop_assert!((p - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        }

        #[test]
        fn ism_scale_invariant(u in prop::collection::vec(-1.0f64..1.0, 8), v in prop::collection::vec(-1.0f64..1.0, 8)) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let a = cosine_similarity(&u, &v).unwrap();
            let u2: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
            let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
            let b = cosine_similarity(&u2, &v3).unwrap();
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}
