use std::sync::Arc;

use super::init::WeightInit;
use super::{EncoderVars, IdentityEncoder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::resample::Resize2d;
use crate::tensor::Tensor;

const POOLED: usize = 4;
const ACT_CHANNELS: usize = 16;

/// Two strided convolutions, a 4×4 area pool and a linear projection.
///
/// Inputs are centered at mid-gray with bias-free layers, so a uniform gray
/// image embeds to the zero vector and every other image points somewhere
/// identity-specific. The second convolution's `tanh` output is the spatial
/// activation exposed for Layer-CAM.
pub struct SurrogateEncoder {
    id: String,
    dim: usize,
    size: usize,
    conv1: Arc<Tensor>,
    conv2: Arc<Tensor>,
    projection: Arc<Tensor>,
    pool: Resize2d,
}

impl SurrogateEncoder {
    pub fn new(id: &str, dim: usize, size: usize, seed: u64) -> Self {
        let mut init = WeightInit::new(seed, &format!("encoder/{id}"));
        let act = size / 4;
        Self {
            id: id.to_string(),
            dim,
            size,
            conv1: init.conv(8, 3, 3, 2.0),
            conv2: init.conv(ACT_CHANNELS, 8, 3, 2.0),
            projection: init.linear(ACT_CHANNELS * POOLED * POOLED, dim, 1.0),
            pool: Resize2d::area((act, act), (POOLED, POOLED)),
        }
    }
}

impl IdentityEncoder for SurrogateEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, tape: &mut Tape, image: Var) -> Result<EncoderVars> {
        let shape = tape.shape(image).to_vec();
        if shape != [3, self.size, self.size] {
            return Err(Error::ShapeMismatch(format!(
                "encoder `{}` expects (3, {s}, {s}), got {shape:?}",
                self.id,
                s = self.size
            )));
        }
        let x = tape.add_scalar(image, -0.5);
        let h = tape.conv2d(x, self.conv1.clone(), 2, 1);
        let h = tape.tanh(h);
        let h = tape.conv2d(h, self.conv2.clone(), 2, 1);
        let activation = tape.tanh(h);
        let pooled = tape.resample(activation, self.pool.rows.clone(), self.pool.cols.clone());
        let flat = tape.reshape(pooled, &[1, ACT_CHANNELS * POOLED * POOLED]);
        let e = tape.matmul_const(flat, self.projection.clone());
        let embedding = tape.reshape(e, &[self.dim]);
        Ok(EncoderVars {
            embedding,
            activation: Some(activation),
        })
    }
}
