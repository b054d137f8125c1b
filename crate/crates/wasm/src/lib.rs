//! Browser bindings for the voidkit demo page: saliency masks, a stepwise
//! protection run and the adaptive perceptual map explorer.
//!
//! Images cross the boundary as `size × size` RGBA byte buffers.

use voidkit::image::{dequantize, max_byte_deviation, quantize_u8, ImageTensor};
use voidkit::losses::LossSettings;
use voidkit::optimizer::{binarize_quantile, perceptual_map_step, smooth_map, AdaptiveConfig, RunOptions, RunState};
use voidkit::saliency::MaskSet;
use voidkit::synth::synthetic_face;
use voidkit::types::{cosine_similarity, PerturbationBudget, SpatialMask};
use voidkit::victim::VictimBundle;
use wasm_bindgen::prelude::*;

/// Converts an RGBA buffer into an image, dropping alpha.
pub fn rgba_to_image(rgba: &[u8], size: usize) -> voidkit::Result<ImageTensor> {
    if rgba.len() != size * size * 4 {
        return Err(voidkit::Error::InvalidImage(format!(
            "expected {} RGBA bytes for {size}x{size}, got {}",
            size * size * 4,
            rgba.len()
        )));
    }
    let data = rgba
        .chunks_exact(4)
        .flat_map(|px| px[..3].iter().map(|&b| dequantize(b)))
        .collect();
    ImageTensor::new(size, size, data)
}

pub fn image_to_rgba(img: &ImageTensor) -> Vec<u8> {
    quantize_u8(img)
        .chunks_exact(3)
        .flat_map(|px| [px[0], px[1], px[2], 255])
        .collect()
}

/// Renders a `[0, 1]` field as opaque grayscale RGBA.
pub fn field_to_rgba(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|v| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b, b, b, 255]
        })
        .collect()
}

/// Paints the decoded boxes of the kept anchors, weighted by confidence.
fn anchor_field(bundle: &VictimBundle, img: &ImageTensor, anchor: &SpatialMask) -> voidkit::Result<Vec<f64>> {
    let det = bundle.detector.detect(img)?;
    let (h, w) = img.dims();
    let mut field = vec![0.0f64; h * w];
    let anchors = bundle.detector.anchors();
    for (j, (&keep, a)) in anchor.data().iter().zip(anchors).enumerate() {
        if keep != 1.0 {
            continue;
        }
        let b = a.decode(det.reg_offsets[j]);
        let p = det.face_probs[j];
        let x0 = b.x0.max(0.0).floor() as usize;
        let y0 = b.y0.max(0.0).floor() as usize;
        let x1 = (b.x1.ceil().max(0.0) as usize).min(w);
        let y1 = (b.y1.ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let v = &mut field[y * w + x];
                *v = v.max(p);
            }
        }
    }
    Ok(field)
}

/// Adaptive maps of one iterate.
#[wasm_bindgen]
pub struct MapView {
    s: Vec<f64>,
    m: SpatialMask,
    p: SpatialMask,
}

#[wasm_bindgen]
impl MapView {
    /// Per-pixel perceptual similarity `S`.
    pub fn similarity(&self) -> Vec<u8> {
        field_to_rgba(&self.s)
    }

    /// Quantile-binarized map `M`.
    pub fn binary(&self) -> Vec<u8> {
        field_to_rgba(self.m.data())
    }

    /// Smoothed modulation map `P`.
    pub fn smooth(&self) -> Vec<u8> {
        field_to_rgba(self.p.data())
    }

    pub fn fraction_ones(&self) -> f64 {
        self.m.fraction_ones()
    }

    pub fn p_min(&self) -> f64 {
        self.p.min()
    }

    pub fn p_max(&self) -> f64 {
        self.p.max()
    }
}

/// A source image, its masks and an optional protection run against one
/// surrogate bundle.
#[wasm_bindgen]
pub struct Demo {
    bundle: &'static VictimBundle,
    source: ImageTensor,
    masks: MaskSet,
    tau_p: f64,
    run: Option<RunState<'static>>,
}

#[wasm_bindgen]
impl Demo {
    /// Builds the surrogate bundle for `bundle_seed` and loads the synthetic
    /// face for `face_seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(bundle_seed: u32, face_seed: u32) -> Result<Demo, JsError> {
        let bundle: &'static VictimBundle = Box::leak(Box::new(VictimBundle::surrogate_seeded(bundle_seed.into())));
        let source = synthetic_face(face_seed.into(), bundle.image_dims().0);
        Ok(Self::with_source(bundle, source)?)
    }

    /// Side length of the square images the bundle accepts.
    pub fn size(&self) -> usize {
        self.bundle.image_dims().0
    }

    pub fn load_synthetic(&mut self, face_seed: u32) -> Result<(), JsError> {
        self.set_source(synthetic_face(face_seed.into(), self.size()))?;
        Ok(())
    }

    /// Replaces the source with an RGBA buffer of `size × size` pixels.
    pub fn load_rgba(&mut self, rgba: &[u8]) -> Result<(), JsError> {
        self.set_source(rgba_to_image(rgba, self.size())?)?;
        Ok(())
    }

    pub fn source_rgba(&self) -> Vec<u8> {
        image_to_rgba(&self.source)
    }

    /// One of `anchor`, `semantic` or `cam` as grayscale RGBA.
    pub fn mask_rgba(&self, kind: &str) -> Result<Vec<u8>, JsError> {
        let field = match kind {
            "anchor" => anchor_field(self.bundle, &self.source, &self.masks.anchor)?,
            "semantic" => self.masks.semantic.data().to_vec(),
            "cam" => self.masks.cam.data().to_vec(),
            other => return Err(JsError::new(&format!("unknown mask `{other}`"))),
        };
        Ok(field_to_rgba(&field))
    }

    /// Number of anchors whose confidence exceeds the threshold.
    pub fn kept_anchors(&self) -> usize {
        self.masks.anchor.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Starts a protection run; budgets are in 8-bit steps.
    pub fn start(&mut self, epsilon_bytes: f64, alpha_bytes: f64, iterations: usize, adaptive: bool, seed: u32) -> Result<(), JsError> {
        let options = RunOptions {
            budget: PerturbationBudget::new(epsilon_bytes / 255.0, alpha_bytes / 255.0, iterations)?,
            adaptive: AdaptiveConfig {
                enabled: adaptive,
                ..AdaptiveConfig::default()
            },
            seed: seed.into(),
            ..RunOptions::default()
        };
        let settings = LossSettings {
            tau_p: self.tau_p,
            ..LossSettings::default()
        };
        self.run = Some(RunState::new(self.bundle, &self.source, settings, options)?);
        Ok(())
    }

    /// Whether a run exists and has iterations left.
    pub fn running(&self) -> bool {
        self.run
            .as_ref()
            .is_some_and(|r| r.iteration() < r.options().budget.iterations)
    }

    /// Runs one iteration and returns
    /// `[iteration, l_loc, l_id, l_attn, l_feat, l_total]`.
    pub fn step(&mut self) -> Result<Vec<f64>, JsError> {
        let run = self.run.as_mut().ok_or_else(|| JsError::new("no protection run started"))?;
        let rec = run.step()?;
        let r = &rec.report;
        Ok(vec![rec.iteration as f64, r.l_loc, r.l_id, r.l_attn, r.l_feat, r.l_total])
    }

    /// Current protected image, quantized as it would be saved.
    pub fn protected_rgba(&self) -> Result<Vec<u8>, JsError> {
        Ok(image_to_rgba(&self.current()?))
    }

    /// Amplified difference between protected and source, centered on gray.
    pub fn difference_rgba(&self, gain: f64) -> Result<Vec<u8>, JsError> {
        let adv = self.current()?;
        let field: Vec<u8> = adv
            .data()
            .iter()
            .zip(self.source.data())
            .map(|(a, s)| ((0.5 + gain * (a - s)).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(field.chunks_exact(3).flat_map(|px| [px[0], px[1], px[2], 255]).collect())
    }

    /// Largest per-channel byte deviation from the source.
    pub fn linf_bytes(&self) -> Result<u8, JsError> {
        Ok(max_byte_deviation(&quantize_u8(&self.current()?), &quantize_u8(&self.source)))
    }

    /// Evaluation-encoder cosine similarity between protected and source.
    pub fn identity_similarity(&self) -> Result<f64, JsError> {
        let enc = self.bundle.evaluation_encoder();
        let a = enc.embed(&self.current()?)?;
        let b = enc.embed(&self.source)?;
        Ok(cosine_similarity(&a.data, &b.data)?)
    }

    /// Adaptive maps of the current iterate for the given knobs.
    pub fn explore(&self, q: f64, gamma: f64, sigma: f64) -> Result<MapView, JsError> {
        AdaptiveConfig {
            q,
            gamma,
            sigma,
            enabled: true,
        }
        .validate()?;
        let s = perceptual_map_step(&self.current()?, &self.source, self.bundle.perceptual.as_ref())?;
        let m = binarize_quantile(&s, q)?;
        let p = smooth_map(&m, gamma, sigma)?;
        Ok(MapView {
            s: s.data().to_vec(),
            m,
            p,
        })
    }
}

impl Demo {
    fn with_source(bundle: &'static VictimBundle, source: ImageTensor) -> voidkit::Result<Demo> {
        let tau_p = LossSettings::default().tau_p;
        let masks = MaskSet::build(&source, bundle, tau_p)?;
        Ok(Demo {
            bundle,
            source,
            masks,
            tau_p,
            run: None,
        })
    }

    fn set_source(&mut self, source: ImageTensor) -> voidkit::Result<()> {
        *self = Self::with_source(self.bundle, source)?;
        Ok(())
    }

    fn current(&self) -> voidkit::Result<ImageTensor> {
        match &self.run {
            Some(run) => run.current_image(),
            None => Ok(self.source.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_round_trip_and_size_check() {
        let img = synthetic_face(3, 64);
        let rgba = image_to_rgba(&img);
        assert_eq!(rgba.len(), 64 * 64 * 4);
        assert_eq!(rgba_to_image(&rgba, 64).unwrap(), img.quantized());
        assert!(rgba_to_image(&rgba[4..], 64).is_err());
    }

    #[test]
    fn masks_render_at_image_size() {
        let demo = Demo::new(0, 1).unwrap();
        assert!(demo.kept_anchors() > 0);
        for kind in ["anchor", "semantic", "cam"] {
            let rgba = demo.mask_rgba(kind).unwrap();
            assert_eq!(rgba.len(), demo.size() * demo.size() * 4);
            assert!(rgba.chunks_exact(4).any(|px| px[0] > 0), "{kind} is blank");
        }
    }

    #[test]
    fn protection_steps_respect_budget() {
        let mut demo = Demo::new(0, 2).unwrap();
        assert_eq!(demo.linf_bytes().unwrap(), 0);
        demo.start(12.0, 1.0, 3, true, 7).unwrap();
        let mut rows = Vec::new();
        while demo.running() {
            rows.push(demo.step().unwrap());
        }
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.len() == 6 && r.iter().all(|v| v.is_finite())));
        assert!(demo.linf_bytes().unwrap() <= 12);
        let sim = demo.identity_similarity().unwrap();
        assert!((-1.0..=1.0).contains(&sim));
        assert_eq!(demo.difference_rgba(8.0).unwrap().len(), demo.source_rgba().len());
    }

    #[test]
    fn explorer_maps_follow_knobs() {
        let mut demo = Demo::new(0, 4).unwrap();
        demo.start(12.0, 1.0, 2, true, 0).unwrap();
        demo.step().unwrap();
        let view = demo.explore(0.5, 0.3, 3.0).unwrap();
        assert!(view.p_min() >= 0.3 - 1e-12 && view.p_max() <= 1.0 + 1e-12);
        assert!(view.fraction_ones() > 0.0 && view.fraction_ones() < 1.0);
        let wide = demo.explore(0.5, 0.8, 3.0).unwrap();
        assert!(wide.p_min() >= 0.8 - 1e-12);
        assert_eq!(view.similarity().len(), demo.size() * demo.size() * 4);
    }

    #[test]
    fn loading_a_source_resets_the_run() {
        let mut demo = Demo::new(0, 5).unwrap();
        demo.start(12.0, 1.0, 2, false, 0).unwrap();
        assert!(demo.running());
        let rgba = image_to_rgba(&synthetic_face(9, demo.size()));
        demo.load_rgba(&rgba).unwrap();
        assert!(!demo.running());
        assert_eq!(demo.source_rgba(), rgba);
    }
}
