//! Shared domain values: latent codes, masks, budgets, loss weights and
//! identity embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Latent representation being optimized. Stored channel-major `(c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    data: Tensor,
}

impl LatentCode {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "latent must be (c, h, w), got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros(&[channels, height, width]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// `(h, w, c)`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.data.dims3();
        (h, w, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Anchor,
    Semantic,
    Cam,
    PerceptualBinary,
    PerceptualSmooth,
    /// Unclassified `[0, 1]` field such as a perceptual distance map.
    Field,
}

impl MaskKind {
    pub fn is_binary(self) -> bool {
        matches!(self, MaskKind::Anchor | MaskKind::PerceptualBinary)
    }
}

/// A row-major `H × W` array in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
    kind: MaskKind,
}

impl SpatialMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>, kind: MaskKind) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("mask dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("mask", format!("value {v} outside [0, 1]")));
        }
        if kind.is_binary() {
            if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::param("mask", format!("{kind:?} mask holds non-binary {v}")));
            }
        }
        Ok(Self {
            height,
            width,
            data,
            kind,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, kind: MaskKind) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], kind)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Fraction of entries equal to one.
    pub fn fraction_ones(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 1.0).count() as f64 / self.data.len() as f64
    }

    pub fn with_kind(self, kind: MaskKind) -> Result<Self> {
        Self::new(self.height, self.width, self.data, kind)
    }

    /// Broadcasts the mask across `channels` as a `(channels, H, W)` tensor.
    pub fn broadcast(&self, channels: usize) -> Tensor {
        Tensor::broadcast_channels(&self.data, channels, self.height, self.width)
    }

    /// Grayscale 8-bit rendering.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    /// Writes [`Self::to_bytes`] as a grayscale PNG.
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .expect("buffer matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// L∞ budget, step size and iteration count for the latent search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
}

impl PerturbationBudget {
    pub fn new(epsilon: f64, alpha: f64, iterations: usize) -> Result<Self> {
        let b = Self {
            epsilon,
            alpha,
            iterations,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::param("alpha", "must be positive"));
        }
        if !(self.alpha <= self.epsilon) {
            return Err(Error::param("alpha", "must not exceed epsilon"));
        }
        if !(self.epsilon <= 1.0) {
            return Err(Error::param("epsilon", "must not exceed 1"));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self {
            epsilon: 12.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 30,
        }
    }
}

/// Signed coefficients of the four loss terms. Localization and identity
/// weights are non-positive, attention and feature weights non-negative;
/// a zero weight ablates its term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub lambda_id: f64,
    pub lambda_attn: f64,
    pub lambda_feat: f64,
}

impl LossWeights {
    pub fn new(lambda_loc: f64, lambda_id: f64, lambda_attn: f64, lambda_feat: f64) -> Result<Self> {
        let w = Self {
            lambda_loc,
            lambda_id,
            lambda_attn,
            lambda_feat,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_loc <= 0.0) {
            return Err(Error::param("lambda_loc", "must not be positive"));
        }
        if !(self.lambda_id <= 0.0) {
            return Err(Error::param("lambda_id", "must not be positive"));
        }
        if !(self.lambda_attn >= 0.0) {
            return Err(Error::param("lambda_attn", "must not be negative"));
        }
        if !(self.lambda_feat >= 0.0) {
            return Err(Error::param("lambda_feat", "must not be negative"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_loc, self.lambda_id, self.lambda_attn, self.lambda_feat]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_loc: -1.0,
            lambda_id: -1.0,
            lambda_attn: 0.01,
            lambda_feat: 0.01,
        }
    }
}

/// Identity embedding tagged with the encoder that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub data: Vec<f64>,
    pub source_encoder: String,
}

impl EmbeddingVector {
    pub fn new(data: Vec<f64>, source_encoder: impl Into<String>) -> Result<Self> {
        let source_encoder = source_encoder.into();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder `{source_encoder}`")));
        }
        Ok(Self {
            data,
            source_encoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNormEmbedding("cosine similarity".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `1 − cos(u, v)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(u, v)?)
}
