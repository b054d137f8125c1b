//! Bundle manifest: the TOML file that declares victim geometry.
//!
//! ```toml
//! seed = 7
//! image_size = 64
//! codec_factor = 8
//! latent_channels = 4
//! anchors = 64
//! timesteps = 10
//! attention_layers = ["attn_down", "attn_mid"]
//! feature_layers = ["down", "up"]
//!
//! [[encoders]]
//! id = "arcface-a"
//! dim = 32
//! evaluation = false
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub id: String,
    pub dim: usize,
    #[serde(default)]
    pub evaluation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub seed: u64,
    /// Side length of the square working resolution.
    pub image_size: usize,
    pub codec_factor: usize,
    pub latent_channels: usize,
    /// Declared anchor count; must equal `(image_size / 8)²`.
    pub anchors: usize,
    pub timesteps: usize,
    pub attention_layers: Vec<String>,
    pub feature_layers: Vec<String>,
    pub encoders: Vec<EncoderSpec>,
}

impl Default for BundleManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            codec_factor: 8,
            latent_channels: 4,
            anchors: 64,
            timesteps: 10,
            attention_layers: vec!["attn_down".into(), "attn_mid".into()],
            feature_layers: vec!["down".into(), "up".into()],
            encoders: vec![
                EncoderSpec {
                    id: "arcface-a".into(),
                    dim: 32,
                    evaluation: false,
                },
                EncoderSpec {
                    id: "arcface-b".into(),
                    dim: 32,
                    evaluation: false,
                },
                EncoderSpec {
                    id: "eval-ism".into(),
                    dim: 32,
                    evaluation: true,
                },
            ],
        }
    }
}

impl BundleManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text)
            .map_err(|e| Error::manifest(toml_error_field(&e, text), e.message().trim()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.codec_factor != 8 {
            return Err(Error::manifest(
                "codec_factor",
                "the surrogate codec supports factor 8 only",
            ));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(16) {
            return Err(Error::manifest(
                "image_size",
                "must be a multiple of 16 and at least 32",
            ));
        }
        if self.latent_channels < 3 {
            return Err(Error::manifest("latent_channels", "must be at least 3"));
        }
        let grid = self.image_size / 8;
        if self.anchors != grid * grid {
            return Err(Error::manifest(
                "anchors",
                format!("surrogate detector has {} anchors at this size", grid * grid),
            ));
        }
        if self.timesteps == 0 {
            return Err(Error::manifest("timesteps", "must be positive"));
        }
        if self.attention_layers.is_empty() || self.attention_layers.len() > 2 {
            return Err(Error::manifest(
                "attention_layers",
                "surrogate backbone has one or two cross-attention layers",
            ));
        }
        if self.feature_layers.len() != 2 {
            return Err(Error::manifest(
                "feature_layers",
                "exactly two feature taps (first down block, last up block) required",
            ));
        }
        if self.encoders.iter().any(|e| e.dim == 0) {
            return Err(Error::manifest("encoders.dim", "must be positive"));
        }
        if self.encoders.iter().any(|e| e.id.trim().is_empty()) {
            return Err(Error::manifest("encoders.id", "must be non-empty"));
        }
        let eval = self.encoders.iter().filter(|e| e.evaluation).count();
        if eval != 1 {
            return Err(Error::manifest(
                "encoders.evaluation",
                format!("exactly one evaluation encoder required, found {eval}"),
            ));
        }
        if self.encoders.len() < 2 {
            return Err(Error::manifest("encoders", "at least one attack encoder required"));
        }
        let mut ids: Vec<&str> = self.encoders.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::manifest("encoders.id", "ids must be unique"));
        }
        Ok(())
    }
}

/// Best-effort name of the key a TOML decode error refers to.
pub(crate) fn toml_error_field(e: &toml::de::Error, text: &str) -> String {
    if let Some(name) = e.message().split('`').nth(1) {
        return name.to_string();
    }
    if let Some(span) = e.span() {
        let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
        let line = text[line_start..].lines().next().unwrap_or("");
        if let Some((key, _)) = line.split_once('=') {
            return key.trim().to_string();
        }
    }
    "<document>".into()
}
