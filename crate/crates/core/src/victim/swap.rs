//! Minimal end-to-end face swap over the bundle's models.

use super::{BoundingBox, VictimBundle};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::types::LatentCode;

/// Face confidence a swap needs on both inputs.
pub const SWAP_DETECTION_THRESHOLD: f64 = 0.5;

const FEATHER: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub enum SwapOutcome {
    Swapped(ImageTensor),
    /// No anchor on the source cleared the detection threshold.
    NoFace,
}

impl SwapOutcome {
    pub fn image(&self) -> Option<&ImageTensor> {
        match self {
            SwapOutcome::Swapped(img) => Some(img),
            SwapOutcome::NoFace => None,
        }
    }
}

fn bilinear_sample(img: &ImageTensor, sy: f64, sx: f64) -> [f64; 3] {
    let (h, w) = img.dims();
    let y = sy.clamp(0.0, (h - 1) as f64);
    let x = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    [0, 1, 2].map(|c| {
        let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
        let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn width(b: &BoundingBox) -> f64 {
    (b.x1 - b.x0).max(1.0)
}

fn height(b: &BoundingBox) -> f64 {
    (b.y1 - b.y0).max(1.0)
}

/// The `bbox` region of `img` resampled to the full frame.
pub fn crop_resize(img: &ImageTensor, bbox: &BoundingBox) -> Result<ImageTensor> {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let sy = bbox.y0 + (y as f64 + 0.5) * height(bbox) / h as f64 - 0.5;
            let sx = bbox.x0 + (x as f64 + 0.5) * width(bbox) / w as f64 - 0.5;
            data.extend(bilinear_sample(img, sy, sx));
        }
    }
    ImageTensor::from_clamped(h, w, data)
}

impl VictimBundle {
    fn top_box(&self, img: &ImageTensor) -> Result<Option<BoundingBox>> {
        let det = self.detector.detect(img)?;
        let Some(top) = det.top_anchor() else {
            return Ok(None);
        };
        if det.face_probs[top] <= SWAP_DETECTION_THRESHOLD {
            return Ok(None);
        }
        Ok(Some(self.detector.anchors()[top].decode(det.reg_offsets[top])))
    }

    /// Detect the source face, paste it into the target's face box with a
    /// feathered elliptical blend, then run one source-conditioned backbone
    /// pass on the composite latent and decode the denoised estimate.
    pub fn swap(&self, source: &ImageTensor, target: &ImageTensor) -> Result<SwapOutcome> {
        self.check_image(source)?;
        self.check_image(target)?;
        let Some(src_box) = self.top_box(source)? else {
            return Ok(SwapOutcome::NoFace);
        };
        let tgt_box = self
            .top_box(target)?
            .ok_or_else(|| Error::InvalidImage("no face detected in swap target".into()))?;

        let (h, w) = target.dims();
        let mut composite = Vec::with_capacity(h * w * 3);
        let (tcx, tcy) = ((tgt_box.x0 + tgt_box.x1) / 2.0, (tgt_box.y0 + tgt_box.y1) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let r = (((px - tcx) / (width(&tgt_box) / 2.0)).powi(2)
                    + ((py - tcy) / (height(&tgt_box) / 2.0)).powi(2))
                .sqrt();
                let alpha = ((1.0 - r) / FEATHER).clamp(0.0, 1.0);
                let sx = src_box.x0 + (px - tgt_box.x0) * width(&src_box) / width(&tgt_box) - 0.5;
                let sy = src_box.y0 + (py - tgt_box.y0) * height(&src_box) / height(&tgt_box) - 0.5;
                let face = bilinear_sample(source, sy, sx);
                for c in 0..3 {
                    composite.push(alpha * face[c] + (1.0 - alpha) * target.get(y, x, c));
                }
            }
        }
        let composite = ImageTensor::from_clamped(h, w, composite)?;
        let cond = crop_resize(source, &src_box)?;

        let z = self.codec.encode(&composite)?;
        let mut tape = Tape::new();
        let c = tape.leaf(cond.to_chw());
        let zv = tape.leaf(z.tensor().clone());
        let vars = self.backbone.forward(&mut tape, c, zv, 0)?;
        let eps = tape.value(vars.noise_prediction);
        let ab = self.backbone.alpha_bar(0)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let denoised = z.tensor().zip_map(eps, |zi, e| (zi - n * e) / s);
        let out = self.codec.decode(&LatentCode::new(denoised)?)?;
        Ok(SwapOutcome::Swapped(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_face;

    #[test]
    fn swap_is_deterministic_and_detects_faces() {
        let bundle = VictimBundle::surrogate_seeded(4);
        let a = synthetic_face(1, 64);
        let b = synthetic_face(2, 64);
        let s1 = bundle.swap(&a, &b).unwrap();
        assert_eq!(s1, bundle.swap(&a, &b).unwrap());
        assert!(s1.image().is_some());
        let blank = ImageTensor::filled(64, 64, 0.0).unwrap();
        assert_eq!(bundle.swap(&blank, &b).unwrap(), SwapOutcome::NoFace);
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let a = synthetic_face(3, 64);
        let full = BoundingBox {
            x0: 0.0,
            y0: 0.0,
            x1: 64.0,
            y1: 64.0,
        };
        let c = crop_resize(&a, &full).unwrap();
        for (p, q) in c.data().iter().zip(a.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
