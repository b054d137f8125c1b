//! Contracts for the external models the attack touches, and the bundle
//! that groups them.
//!
//! Every model builds its forward pass on an autodiff [`Tape`], so any
//! implementation is automatically differentiable with respect to its image
//! (or latent) input. The `surrogate_*` submodules provide small, seeded,
//! frozen implementations at a scale where every loss is cheap to evaluate.
//! Adapters for real detectors, encoders and diffusion backbones live out of
//! tree and implement the same traits.

mod backbone;
mod codec;
mod detector;
mod encoder;
mod init;
pub mod manifest;
mod parser;
mod perceptual;
mod swap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;
use crate::types::{EmbeddingVector, LatentCode, SpatialMask};

pub use backbone::SurrogateBackbone;
pub use codec::SurrogateCodec;
pub use detector::SurrogateDetector;
pub use encoder::SurrogateEncoder;
pub use manifest::{BundleManifest, EncoderSpec};
pub use parser::GeometricParser;
pub use perceptual::SurrogatePerceptual;
pub use swap::{crop_resize, SwapOutcome, SWAP_DETECTION_THRESHOLD};

/// Default anchor box, in pixels, centered at `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Anchor {
    /// Applies `[Δx, Δy, Δw, Δh]` offsets.
    pub fn decode(&self, offsets: [f64; 4]) -> BoundingBox {
        let cx = self.cx + offsets[0] * self.w;
        let cy = self.cy + offsets[1] * self.h;
        let w = self.w * offsets[2].exp();
        let h = self.h * offsets[3].exp();
        BoundingBox {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    /// Face confidence per anchor, length `J`.
    pub face_probs: Vec<f64>,
    /// `[Δx, Δy, Δw, Δh]` per anchor.
    pub reg_offsets: Vec<[f64; 4]>,
}

impl DetectorOutput {
    pub fn anchor_count(&self) -> usize {
        self.face_probs.len()
    }

    /// Index of the most confident anchor.
    pub fn top_anchor(&self) -> Option<usize> {
        self.face_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Tape handles of one detector forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectorVars {
    /// `[J]` face probabilities.
    pub probs: Var,
    /// `[J, 4]` regression offsets.
    pub offsets: Var,
}

pub trait FaceDetector: Send + Sync {
    fn anchors(&self) -> &[Anchor];

    fn anchor_count(&self) -> usize {
        self.anchors().len()
    }

    /// Expected `(height, width)` of the input image.
    fn input_dims(&self) -> (usize, usize);

    /// Builds the forward pass for a `(3, H, W)` image node.
    fn forward(&self, tape: &mut Tape, image: Var) -> Result<DetectorVars>;

    fn detect(&self, img: &ImageTensor) -> Result<DetectorOutput> {
        let mut tape = Tape::new();
        let x = tape.leaf(img.to_chw());
        let vars = self.forward(&mut tape, x)?;
        let probs = tape.value(vars.probs);
        let offsets = tape.value(vars.offsets);
        if !probs.all_finite() || !offsets.all_finite() {
            return Err(Error::NonFinite("face detector".into()));
        }
        Ok(DetectorOutput {
            face_probs: probs.data().to_vec(),
            reg_offsets: offsets
                .data()
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
        })
    }
}

/// Tape handles of one identity-encoder forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    /// `[d_e]` embedding.
    pub embedding: Var,
    /// Last spatial activation `(C, h, w)`, when the architecture has one.
    pub activation: Option<Var>,
}

pub trait IdentityEncoder: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    fn forward(&self, tape: &mut Tape, image: Var) -> Result<EncoderVars>;

    fn embed(&self, img: &ImageTensor) -> Result<EmbeddingVector> {
        let mut tape = Tape::new();
        let x = tape.leaf(img.to_chw());
        let vars = self.forward(&mut tape, x)?;
        EmbeddingVector::new(tape.value(vars.embedding).data().to_vec(), self.id())
    }
}

pub trait LatentCodec: Send + Sync {
    /// Spatial downsampling factor `f`.
    fn factor(&self) -> usize;

    fn channels(&self) -> usize;

    /// Latent geometry `(h, w, c)` for an image of the given size.
    fn latent_geometry(&self, image_dims: (usize, usize)) -> (usize, usize, usize) {
        (
            image_dims.0 / self.factor(),
            image_dims.1 / self.factor(),
            self.channels(),
        )
    }

    fn encode(&self, img: &ImageTensor) -> Result<LatentCode>;

    /// Decoder forward pass; returns a `(3, H, W)` node with values in `[0, 1]`.
    fn decode_on(&self, tape: &mut Tape, latent: Var) -> Result<Var>;

    fn decode(&self, latent: &LatentCode) -> Result<ImageTensor> {
        if !latent.tensor().all_finite() {
            return Err(Error::NonFinite("latent code".into()));
        }
        let mut tape = Tape::new();
        let z = tape.leaf(latent.tensor().clone());
        let x = self.decode_on(&mut tape, z)?;
        let v = tape.value(x);
        if !v.all_finite() {
            return Err(Error::NonFinite("decoder".into()));
        }
        ImageTensor::from_chw(&v.map(|p| p.clamp(0.0, 1.0)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap {
    pub layer_id: String,
    /// `(tokens, d)`.
    pub k: Tensor,
    /// `(tokens, d)`.
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTap {
    pub layer_id: String,
    /// `(C_l, H_l, W_l)`.
    pub fmap: Tensor,
}

/// Tape handles of one conditioned backbone call.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    /// `(layer id, K, V)` per cross-attention layer, in declaration order.
    pub attention: Vec<(String, Var, Var)>,
    /// `(layer id, feature map)` for the first down block and last up block.
    pub features: Vec<(String, Var)>,
    /// Predicted noise, shaped like the latent.
    pub noise_prediction: Var,
}

pub trait GenerativeBackbone: Send + Sync {
    /// Number of diffusion timesteps; valid timesteps are `0..count`.
    fn timestep_count(&self) -> usize;

    /// Cumulative signal fraction `ᾱ_t`.
    fn alpha_bar(&self, timestep: usize) -> Result<f64>;

    fn attention_layers(&self) -> Vec<String>;

    /// `(layer id, (H_l, W_l))` of every feature tap.
    fn feature_layers(&self) -> Vec<(String, (usize, usize))>;

    /// Single conditioned call: `cond_image` is a `(3, H, W)` node and
    /// `noisy_latent` a `(c, h, w)` node.
    fn forward(
        &self,
        tape: &mut Tape,
        cond_image: Var,
        noisy_latent: Var,
        timestep: usize,
    ) -> Result<BackboneVars>;

    fn tap_generation(
        &self,
        cond_image: &ImageTensor,
        noisy_latent: &LatentCode,
        timestep: usize,
    ) -> Result<(Vec<AttentionTap>, Vec<FeatureTap>)> {
        let mut tape = Tape::new();
        let c = tape.leaf(cond_image.to_chw());
        let z = tape.leaf(noisy_latent.tensor().clone());
        let vars = self.forward(&mut tape, c, z, timestep)?;
        let attn = vars
            .attention
            .iter()
            .map(|(id, k, v)| AttentionTap {
                layer_id: id.clone(),
                k: tape.value(*k).clone(),
                v: tape.value(*v).clone(),
            })
            .collect();
        let feats = vars
            .features
            .iter()
            .map(|(id, f)| FeatureTap {
                layer_id: id.clone(),
                fmap: tape.value(*f).clone(),
            })
            .collect();
        Ok((attn, feats))
    }

    /// Forward diffusion `√ᾱ_t · z₀ + √(1 − ᾱ_t) · noise`.
    fn add_noise(&self, clean: &LatentCode, noise: &Tensor, timestep: usize) -> Result<LatentCode> {
        let ab = self.alpha_bar(timestep)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        LatentCode::new(clean.tensor().zip_map(noise, |z, e| s * z + n * e))
    }
}

pub trait PerceptualDistance: Send + Sync {
    /// Returns the spatial mean and the per-pixel distance map in `[0, 1]`.
    fn distance_map(&self, a: &ImageTensor, b: &ImageTensor) -> Result<(f64, SpatialMask)>;
}

pub trait FaceParser: Send + Sync {
    /// Binary mask of biometric components (eyes, nose, mouth).
    fn parse(&self, img: &ImageTensor) -> Result<SpatialMask>;
}

pub struct EncoderEntry {
    pub encoder: Box<dyn IdentityEncoder>,
    /// Held out of the attack ensemble; used only for scoring.
    pub evaluation: bool,
}

/// Every model the losses consume.
pub struct VictimBundle {
    image_dims: (usize, usize),
    seed: u64,
    pub detector: Box<dyn FaceDetector>,
    encoders: Vec<EncoderEntry>,
    pub backbone: Box<dyn GenerativeBackbone>,
    pub codec: Box<dyn LatentCodec>,
    pub perceptual: Box<dyn PerceptualDistance>,
    pub parser: Box<dyn FaceParser>,
}

impl std::fmt::Debug for VictimBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VictimBundle")
            .field("image_dims", &self.image_dims)
            .field("seed", &self.seed)
            .field(
                "encoders",
                &self.encoders.iter().map(|e| e.encoder.id()).collect::<Vec<_>>(),
            )
            .finish_non_exhaustive()
    }
}

impl VictimBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_dims: (usize, usize),
        seed: u64,
        detector: Box<dyn FaceDetector>,
        encoders: Vec<EncoderEntry>,
        backbone: Box<dyn GenerativeBackbone>,
        codec: Box<dyn LatentCodec>,
        perceptual: Box<dyn PerceptualDistance>,
        parser: Box<dyn FaceParser>,
    ) -> Result<Self> {
        let eval = encoders.iter().filter(|e| e.evaluation).count();
        if eval != 1 {
            return Err(Error::manifest(
                "encoders",
                format!("exactly one evaluation encoder required, found {eval}"),
            ));
        }
        if encoders.len() < 2 {
            return Err(Error::manifest("encoders", "at least one attack encoder required"));
        }
        let mut ids: Vec<&str> = encoders.iter().map(|e| e.encoder.id()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::manifest("encoders", "encoder ids must be unique"));
        }
        let f = codec.factor();
        if !image_dims.0.is_multiple_of(f) || !image_dims.1.is_multiple_of(f) {
            return Err(Error::manifest(
                "image_size",
                format!("must be divisible by the codec factor {f}"),
            ));
        }
        Ok(Self {
            image_dims,
            seed,
            detector,
            encoders,
            backbone,
            codec,
            perceptual,
            parser,
        })
    }

    /// Builds the seeded surrogate models described by `manifest`.
    pub fn surrogate(manifest: &BundleManifest) -> Result<Self> {
        manifest.validate()?;
        let size = manifest.image_size;
        let seed = manifest.seed;
        let encoders = manifest
            .encoders
            .iter()
            .map(|spec| EncoderEntry {
                encoder: Box::new(SurrogateEncoder::new(&spec.id, spec.dim, size, seed)),
                evaluation: spec.evaluation,
            })
            .collect();
        let codec = SurrogateCodec::new(size, manifest.codec_factor, manifest.latent_channels, seed)?;
        let backbone = SurrogateBackbone::new(
            size,
            manifest.codec_factor,
            manifest.latent_channels,
            &manifest.attention_layers,
            &manifest.feature_layers,
            manifest.timesteps,
            seed,
        )?;
        Self::new(
            (size, size),
            seed,
            Box::new(SurrogateDetector::new(size, seed)),
            encoders,
            Box::new(backbone),
            Box::new(codec),
            Box::new(SurrogatePerceptual::default()),
            Box::new(GeometricParser),
        )
    }

    /// Surrogate bundle at the reference geometry with the given seed.
    pub fn surrogate_seeded(seed: u64) -> Self {
        Self::surrogate(&BundleManifest {
            seed,
            ..BundleManifest::default()
        })
        .expect("reference manifest is valid")
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encoders(&self) -> &[EncoderEntry] {
        &self.encoders
    }

    pub fn attack_encoders(&self) -> impl Iterator<Item = &dyn IdentityEncoder> {
        self.encoders
            .iter()
            .filter(|e| !e.evaluation)
            .map(|e| e.encoder.as_ref())
    }

    pub fn evaluation_encoder(&self) -> &dyn IdentityEncoder {
        self.encoders
            .iter()
            .find(|e| e.evaluation)
            .map(|e| e.encoder.as_ref())
            .expect("validated at construction")
    }

    pub fn encoder(&self, id: &str) -> Result<&dyn IdentityEncoder> {
        self.encoders
            .iter()
            .find(|e| e.encoder.id() == id)
            .map(|e| e.encoder.as_ref())
            .ok_or_else(|| Error::UnknownEncoder(id.to_string()))
    }

    pub fn embed(&self, img: &ImageTensor, encoder_id: &str) -> Result<EmbeddingVector> {
        self.encoder(encoder_id)?.embed(img)
    }

    /// Checks that `img` has the bundle's working resolution.
    pub fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.dims() != self.image_dims {
            return Err(Error::ShapeMismatch(format!(
                "bundle works at {}x{}, image is {}x{}",
                self.image_dims.0,
                self.image_dims.1,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}
