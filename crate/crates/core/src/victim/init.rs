use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Seeded source of frozen surrogate weights. Each component mixes its own
/// tag into the bundle seed so components are independent of one another.
pub(crate) struct WeightInit {
    rng: ChaCha8Rng,
}

impl WeightInit {
    pub fn new(seed: u64, tag: &str) -> Self {
        // FNV-1a over the tag, folded into the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ h),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    /// `(O, C, k, k)` kernel with variance `gain² / (C·k²)`.
    pub fn conv(&mut self, out_ch: usize, in_ch: usize, k: usize, gain: f64) -> Arc<Tensor> {
        let std = gain / ((in_ch * k * k) as f64).sqrt();
        Arc::new(self.normal(&[out_ch, in_ch, k, k], std))
    }

    /// `(rows, cols)` matrix with variance `gain² / rows`.
    pub fn linear(&mut self, rows: usize, cols: usize, gain: f64) -> Arc<Tensor> {
        let std = gain / (rows as f64).sqrt();
        Arc::new(self.normal(&[rows, cols], std))
    }

    pub fn vector(&mut self, n: usize, std: f64) -> Vec<f64> {
        self.normal(&[n], std).into_data()
    }
}
