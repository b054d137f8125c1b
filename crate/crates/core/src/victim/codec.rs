use std::sync::Arc;

use nalgebra::DMatrix;

use super::init::WeightInit;
use super::LatentCodec;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::resample::{bilinear_matrix, Resize2d};
use crate::tensor::Tensor;
use crate::types::LatentCode;

const LOGIT_FLOOR: f64 = 0.02;

/// Latents hold pixel logits divided by this factor, so a unit latent step
/// moves the decode by several logit units.
const LATENT_SCALE: f64 = 5.5;

/// Logit-space bilinear codec.
///
/// The decoder upsamples every latent channel bilinearly, mixes them with a
/// fixed 3×3 convolution and squashes through a sigmoid. The first three
/// latent channels map straight to RGB logits; the remaining channels feed
/// random texture kernels, giving the search directions the encoder never
/// uses. The encoder is the least-squares inverse of the upsampler applied
/// to the pixel logits, with the texture channels left at zero. Latents are
/// stored at `1 / LATENT_SCALE` of logit scale.
pub struct SurrogateCodec {
    factor: usize,
    channels: usize,
    size: usize,
    upsample: Resize2d,
    mix: Arc<Tensor>,
    pinv: Tensor,
}

impl SurrogateCodec {
    pub fn new(size: usize, factor: usize, channels: usize, seed: u64) -> Result<Self> {
        if !size.is_multiple_of(factor) {
            return Err(Error::manifest("image_size", "must be divisible by codec_factor"));
        }
        if channels < 3 {
            return Err(Error::manifest("latent_channels", "must be at least 3"));
        }
        let lat = size / factor;
        let mut init = WeightInit::new(seed, "codec");
        let mut mix = Tensor::zeros(&[3, channels, 3, 3]);
        for c in 0..3 {
            mix.data_mut()[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let texture = init.normal(&[3, channels - 3, 3, 3], 0.35);
        for o in 0..3 {
            for (t, c) in (3..channels).enumerate() {
                for k in 0..9 {
                    mix.data_mut()[(o * channels + c) * 9 + k] =
                        texture.data()[(o * (channels - 3) + t) * 9 + k];
                }
            }
        }

        let up = bilinear_matrix(lat, size);
        let p = DMatrix::from_row_slice(size, lat, up.data());
        let normal = p.transpose() * &p;
        let inv = normal
            .try_inverse()
            .ok_or_else(|| Error::manifest("codec_factor", "singular upsampling operator"))?;
        let pinv_m = inv * p.transpose();
        let mut pinv = vec![0.0; lat * size];
        for i in 0..lat {
            for j in 0..size {
                pinv[i * size + j] = pinv_m[(i, j)];
            }
        }

        Ok(Self {
            factor,
            channels,
            size,
            upsample: Resize2d::bilinear((lat, lat), (size, size)),
            mix: Arc::new(mix),

            pinv: Tensor::new(&[lat, size], pinv),
        })
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_FLOOR, 1.0 - LOGIT_FLOOR);
    (p / (1.0 - p)).ln()
}

impl LatentCodec for SurrogateCodec {
    fn factor(&self) -> usize {
        self.factor
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, img: &ImageTensor) -> Result<LatentCode> {
        if img.dims() != (self.size, self.size) {
            return Err(Error::ShapeMismatch(format!(
                "codec expects {s}x{s}, got {}x{}",
                img.height(),
                img.width(),
                s = self.size
            )));
        }
        let logits = img.to_chw().map(logit);
        let lat = self.size / self.factor;
        let down = crate::autodiff::resample_forward(&logits, &self.pinv, &self.pinv);
        let mut z = Tensor::zeros(&[self.channels, lat, lat]);
        z.data_mut()[..3 * lat * lat].copy_from_slice(down.map(|v| v / LATENT_SCALE).data());
        LatentCode::new(z)
    }

    fn decode_on(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let lat = self.size / self.factor;
        let shape = tape.shape(latent).to_vec();
        if shape != [self.channels, lat, lat] {
            return Err(Error::ShapeMismatch(format!(
                "latent must be ({}, {lat}, {lat}), got {shape:?}",
                self.channels
            )));
        }
        if !tape.value(latent).all_finite() {
            return Err(Error::NonFinite("latent code".into()));
        }
        let latent = tape.scale(latent, LATENT_SCALE);
        let up = tape.resample(latent, self.upsample.rows.clone(), self.upsample.cols.clone());
        let mixed = tape.conv2d(up, self.mix.clone(), 1, 1);
        Ok(tape.sigmoid(mixed))
    }
}
