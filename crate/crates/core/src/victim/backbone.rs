use std::sync::Arc;

use super::encoder::SurrogateEncoder;
use super::init::WeightInit;
use super::{BackboneVars, GenerativeBackbone, IdentityEncoder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::resample::Resize2d;
use crate::tensor::Tensor;

const WIDTH: usize = 8;
const TOKENS: usize = 4;
const BETA_START: f64 = 1e-3;
const BETA_END: f64 = 0.2;
const NOISE_SCALE: f64 = 0.1;

struct CrossAttention {
    id: String,
    q: Arc<Tensor>,
    k: Arc<Tensor>,
    v: Arc<Tensor>,
    out: Arc<Tensor>,
}

/// Miniature conditioned U-Net.
///
/// The identity condition is the embedding of the conditioning image from the
/// backbone's own encoder, split into `TOKENS` tokens of width `WIDTH`. The
/// first cross-attention layer sits in the first down block, the optional
/// second in the mid block. Feature taps are the outputs of the first down
/// block and the last up block, both at latent resolution.
pub struct SurrogateBackbone {
    latent_side: usize,
    latent_channels: usize,
    condition: SurrogateEncoder,
    attention: Vec<CrossAttention>,
    feature_ids: [String; 2],
    conv_in: Arc<Tensor>,
    conv_down: Arc<Tensor>,
    conv_mid: Arc<Tensor>,
    conv_up: Arc<Tensor>,
    conv_out: Arc<Tensor>,
    time_embedding: Vec<Vec<f64>>,
    alpha_bar: Vec<f64>,
    pool: Resize2d,
    unpool: Resize2d,
}

impl SurrogateBackbone {
    pub fn new(
        image_size: usize,
        factor: usize,
        latent_channels: usize,
        attention_layers: &[String],
        feature_layers: &[String],
        timesteps: usize,
        seed: u64,
    ) -> Result<Self> {
        if attention_layers.is_empty() || attention_layers.len() > 2 {
            return Err(Error::manifest("attention_layers", "one or two layers supported"));
        }
        if feature_layers.len() != 2 {
            return Err(Error::manifest("feature_layers", "exactly two layers required"));
        }
        if timesteps == 0 {
            return Err(Error::manifest("timesteps", "must be positive"));
        }
        let latent_side = image_size / factor;
        if !latent_side.is_multiple_of(2) {
            return Err(Error::manifest("image_size", "latent side must be even"));
        }
        let mut init = WeightInit::new(seed, "backbone");
        let attention = attention_layers
            .iter()
            .map(|id| CrossAttention {
                id: id.clone(),
                q: init.linear(WIDTH, WIDTH, 1.5),
                k: init.linear(WIDTH, WIDTH, 2.0),
                v: init.linear(WIDTH, WIDTH, 2.0),
                out: init.linear(WIDTH, WIDTH, 1.0),
            })
            .collect();

        let time_embedding = (0..timesteps)
            .map(|t| {
                (0..WIDTH)
                    .map(|c| {
                        let freq = 1.0 / 10f64.powf((c / 2) as f64 / (WIDTH / 2) as f64);
                        let phase = t as f64 * freq;
                        0.3 * if c % 2 == 0 { phase.sin() } else { phase.cos() }
                    })
                    .collect()
            })
            .collect();

        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for t in 0..timesteps {
            let frac = if timesteps > 1 {
                t as f64 / (timesteps - 1) as f64
            } else {
                0.0
            };
            acc *= 1.0 - (BETA_START + (BETA_END - BETA_START) * frac);
            alpha_bar.push(acc);
        }

        let half = latent_side / 2;
        Ok(Self {
            latent_side,
            latent_channels,
            condition: SurrogateEncoder::new("backbone-condition", TOKENS * WIDTH, image_size, seed),
            attention,
            feature_ids: [feature_layers[0].clone(), feature_layers[1].clone()],
            conv_in: init.conv(WIDTH, latent_channels, 3, 1.5),
            conv_down: init.conv(WIDTH, WIDTH, 3, 1.5),
            conv_mid: init.conv(WIDTH, WIDTH, 3, 1.5),
            conv_up: init.conv(WIDTH, WIDTH, 3, 1.5),
            conv_out: init.conv(latent_channels, WIDTH, 3, 1.0),
            time_embedding,
            alpha_bar,
            pool: Resize2d::area((latent_side, latent_side), (half, half)),
            unpool: Resize2d::nearest((half, half), 2),
        })
    }

    /// Residual cross-attention over a `(WIDTH, s, s)` feature map.
    fn attend(&self, tape: &mut Tape, layer: &CrossAttention, h: Var, k: Var, v: Var) -> Var {
        let (_, s, _) = tape.value(h).dims3();
        let flat = tape.reshape(h, &[WIDTH, s * s]);
        let tokens = tape.transpose(flat);
        let q = tape.matmul_const(tokens, layer.q.clone());
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (WIDTH as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        let mixed = tape.matmul(weights, v);
        let out = tape.matmul_const(mixed, layer.out.clone());
        let out = tape.transpose(out);
        let out = tape.reshape(out, &[WIDTH, s, s]);
        tape.add(h, out)
    }
}

impl GenerativeBackbone for SurrogateBackbone {
    fn timestep_count(&self) -> usize {
        self.alpha_bar.len()
    }

    fn alpha_bar(&self, timestep: usize) -> Result<f64> {
        self.alpha_bar
            .get(timestep)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                timestep,
                count: self.alpha_bar.len(),
            })
    }

    fn attention_layers(&self) -> Vec<String> {
        self.attention.iter().map(|a| a.id.clone()).collect()
    }

    fn feature_layers(&self) -> Vec<(String, (usize, usize))> {
        let s = self.latent_side;
        self.feature_ids.iter().map(|id| (id.clone(), (s, s))).collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        cond_image: Var,
        noisy_latent: Var,
        timestep: usize,
    ) -> Result<BackboneVars> {
        let temb = self
            .time_embedding
            .get(timestep)
            .ok_or(Error::TimestepOutOfRange {
                timestep,
                count: self.time_embedding.len(),
            })?;
        let s = self.latent_side;
        let shape = tape.shape(noisy_latent).to_vec();
        if shape != [self.latent_channels, s, s] {
            return Err(Error::ShapeMismatch(format!(
                "noisy latent must be ({}, {s}, {s}), got {shape:?}",
                self.latent_channels
            )));
        }

        let cond = self.condition.forward(tape, cond_image)?;
        let c_id = tape.reshape(cond.embedding, &[TOKENS, WIDTH]);
        let mut attention = Vec::with_capacity(self.attention.len());
        for layer in &self.attention {
            let k = tape.matmul_const(c_id, layer.k.clone());
            let v = tape.matmul_const(c_id, layer.v.clone());
            attention.push((layer.id.clone(), k, v));
        }

        let h = tape.conv2d(noisy_latent, self.conv_in.clone(), 1, 1);
        let h = tape.channel_bias(h, temb);
        let h = tape.tanh(h);
        let (_, k0, v0) = &attention[0];
        let h = self.attend(tape, &self.attention[0], h, *k0, *v0);
        let f_down = tape.conv2d(h, self.conv_down.clone(), 1, 1);
        let f_down = tape.tanh(f_down);

        let m = tape.resample(f_down, self.pool.rows.clone(), self.pool.cols.clone());
        let m = tape.conv2d(m, self.conv_mid.clone(), 1, 1);
        let mut m = tape.tanh(m);
        if let Some(layer) = self.attention.get(1) {
            let (_, k1, v1) = &attention[1];
            m = self.attend(tape, layer, m, *k1, *v1);
        }

        let u = tape.resample(m, self.unpool.rows.clone(), self.unpool.cols.clone());
        let u = tape.add(u, f_down);
        let f_up = tape.conv2d(u, self.conv_up.clone(), 1, 1);
        let f_up = tape.tanh(f_up);
        let eps = tape.conv2d(f_up, self.conv_out.clone(), 1, 1);
        let noise_prediction = tape.scale(eps, NOISE_SCALE);

        Ok(BackboneVars {
            attention,
            features: vec![
                (self.feature_ids[0].clone(), f_down),
                (self.feature_ids[1].clone(), f_up),
            ],
            noise_prediction,
        })
    }
}
