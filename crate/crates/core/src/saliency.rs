//! Confinement masks: anchor gating, semantic parsing, Layer-CAM heatmaps,
//! and area-averaging resolution matching.

use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::resample::{area_resize, Resize2d};
use crate::types::{MaskKind, SpatialMask};
use crate::victim::{DetectorOutput, IdentityEncoder, VictimBundle};

/// Keeps anchors whose face confidence strictly exceeds `tau_p`.
///
/// Returned as a `1 × J` mask. An empty mask is valid; callers disable the
/// localization term for the run.
pub fn anchor_mask(det: &DetectorOutput, tau_p: f64) -> Result<SpatialMask> {
    if !(tau_p > 0.0 && tau_p < 1.0) {
        return Err(Error::param("tau_p", "must lie in (0, 1)"));
    }
    let data: Vec<f64> = det
        .face_probs
        .iter()
        .map(|&p| if p > tau_p { 1.0 } else { 0.0 })
        .collect();
    if data.is_empty() {
        return Err(Error::ShapeMismatch("detector returned no anchors".into()));
    }
    if data.iter().all(|&v| v == 0.0) {
        log::warn!("no anchor exceeds tau_p = {tau_p}; localization loss disabled");
    }
    SpatialMask::new(1, data.len(), data, MaskKind::Anchor)
}

/// Layer-CAM on the encoder's last spatial activation `A`, targeting the
/// embedding energy `s = ‖E(x)‖²`:
/// `relu(Σ_c relu(∂s/∂A_c) ⊙ A_c)`, bilinearly upsampled to image size and
/// divided by its maximum.
pub fn cam_mask(img: &ImageTensor, encoder: &dyn IdentityEncoder) -> Result<SpatialMask> {
    let mut tape = Tape::new();
    let x = tape.leaf(img.to_chw());
    let vars = encoder.forward(&mut tape, x)?;
    let act = vars
        .activation
        .ok_or_else(|| Error::NoSpatialActivation(encoder.id().to_string()))?;
    let sq = tape.mul(vars.embedding, vars.embedding);
    let target = tape.sum(sq);
    let grads = tape.backward(target);
    let a = tape.value(act);
    let g = grads.wrt(act);
    let (c, h, w) = a.dims3();
    let mut cam = vec![0.0; h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let i = ch * h * w + p;
            cam[p] += g.data()[i].max(0.0) * a.data()[i];
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let (ih, iw) = img.dims();
    let up = Resize2d::bilinear((h, w), (ih, iw)).apply_plane(&cam, h, w);
    let peak = up.iter().cloned().fold(0.0, f64::max);
    let data = if peak > 0.0 {
        up.iter().map(|v| (v / peak).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; ih * iw]
    };
    if data.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite(format!("Layer-CAM for `{}`", encoder.id())));
    }
    SpatialMask::new(ih, iw, data, MaskKind::Cam)
}

/// Area-averaging resize. Binary kinds become [`MaskKind::Field`] since
/// averaging produces fractional values.
pub fn downsample_mask(mask: &SpatialMask, target: (usize, usize)) -> Result<SpatialMask> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::param("target", "dimensions must be positive"));
    }
    if target == mask.dims() {
        return Ok(mask.clone());
    }
    let data: Vec<f64> = area_resize(mask.data(), mask.dims(), target)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let kind = if mask.kind().is_binary() {
        MaskKind::Field
    } else {
        mask.kind()
    };
    SpatialMask::new(target.0, target.1, data, kind)
}

/// Masks for one feature tap layer, at that layer's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    pub semantic: SpatialMask,
    pub cam: SpatialMask,
}

/// Every mask of a run, computed once on the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub anchor: SpatialMask,
    pub semantic: SpatialMask,
    pub cam: SpatialMask,
    pub per_layer: BTreeMap<String, LayerMasks>,
}

impl MaskSet {
    /// The CAM mask averages the Layer-CAM maps of all attack encoders and
    /// renormalizes the result to a unit maximum.
    pub fn build(x_src: &ImageTensor, bundle: &VictimBundle, tau_p: f64) -> Result<Self> {
        bundle.check_image(x_src)?;
        let det = bundle.detector.detect(x_src)?;
        let anchor = anchor_mask(&det, tau_p)?;
        let semantic = bundle.parser.parse(x_src)?;

        let (h, w) = x_src.dims();
        let mut acc = vec![0.0; h * w];
        let mut count = 0usize;
        for enc in bundle.attack_encoders() {
            let m = cam_mask(x_src, enc)?;
            for (a, v) in acc.iter_mut().zip(m.data()) {
                *a += v;
            }
            count += 1;
        }
        let peak = acc.iter().cloned().fold(0.0, f64::max);
        let cam_data = if peak > 0.0 {
            acc.iter().map(|v| (v / peak).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; h * w]
        };
        debug_assert!(count > 0);
        let cam = SpatialMask::new(h, w, cam_data, MaskKind::Cam)?;

        let mut per_layer = BTreeMap::new();
        for (id, dims) in bundle.backbone.feature_layers() {
            per_layer.insert(
                id,
                LayerMasks {
                    semantic: downsample_mask(&semantic, dims)?,
                    cam: downsample_mask(&cam, dims)?,
                },
            );
        }
        Ok(Self {
            anchor,
            semantic,
            cam,
            per_layer,
        })
    }

    pub fn localization_enabled(&self) -> bool {
        self.anchor.data().contains(&1.0)
    }
}
