use std::sync::Arc;

use super::init::WeightInit;
use super::{Anchor, DetectorVars, FaceDetector};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::resample::Resize2d;
use crate::tensor::Tensor;

const CELL: usize = 8;
const ANCHOR_CELLS: f64 = 5.0;
const SKIN_OFFSET: f64 = 0.12;
const SKIN_SHARPNESS: f64 = 25.0;
const FACE_THRESHOLD: f64 = 0.45;
const FACE_SHARPNESS: f64 = 12.0;

/// Anchor-grid face detector.
///
/// One anchor per 8×8 cell. Face confidence comes from a fixed skin-tone
/// prior (red minus blue) pooled over the anchor's neighbourhood, nudged by a
/// random linear read-out of the convolutional trunk. Regression offsets are a
/// random 1×1 head on the same trunk.
pub struct SurrogateDetector {
    size: usize,
    anchors: Vec<Anchor>,
    trunk: Vec<(Arc<Tensor>, Vec<f64>)>,
    reg_head: Arc<Tensor>,
    cls_head: Arc<Tensor>,
    skin_filter: Arc<Tensor>,
    neighbourhood: Arc<Tensor>,
    pool: Resize2d,
}

impl SurrogateDetector {
    pub fn new(size: usize, seed: u64) -> Self {
        let mut init = WeightInit::new(seed, "detector");
        let grid = size / CELL;
        let trunk = vec![
            (init.conv(8, 3, 3, 1.5), init.vector(8, 0.05)),
            (init.conv(8, 8, 3, 1.5), init.vector(8, 0.05)),
            (init.conv(8, 8, 3, 1.5), init.vector(8, 0.05)),
        ];
        let reg_head = init.conv(4, 8, 1, 0.6);
        let cls_head = init.conv(1, 8, 1, 0.3);
        let anchor_size = ANCHOR_CELLS * CELL as f64;
        let anchors = (0..grid * grid)
            .map(|j| Anchor {
                cx: ((j % grid) as f64 + 0.5) * CELL as f64,
                cy: ((j / grid) as f64 + 0.5) * CELL as f64,
                w: anchor_size,
                h: anchor_size,
            })
            .collect();
        Self {
            size,
            anchors,
            trunk,
            reg_head,
            cls_head,
            skin_filter: Arc::new(Tensor::new(&[1, 3, 1, 1], vec![1.0, 0.0, -1.0])),
            neighbourhood: Arc::new(Tensor::filled(&[1, 1, 3, 3], 1.0 / 9.0)),
            pool: Resize2d::area((size, size), (grid, grid)),
        }
    }
}

impl FaceDetector for SurrogateDetector {
    fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn forward(&self, tape: &mut Tape, image: Var) -> Result<DetectorVars> {
        let shape = tape.shape(image).to_vec();
        if shape != [3, self.size, self.size] {
            return Err(Error::ShapeMismatch(format!(
                "detector expects (3, {s}, {s}), got {shape:?}",
                s = self.size
            )));
        }
        let j = self.anchors.len();

        let mut h = tape.add_scalar(image, -0.5);
        for (w, b) in &self.trunk {
            h = tape.conv2d(h, w.clone(), 2, 1);
            h = tape.channel_bias(h, b);
            h = tape.tanh(h);
        }

        let reg = tape.conv2d(h, self.reg_head.clone(), 1, 0);
        let reg = tape.reshape(reg, &[4, j]);
        let offsets = tape.transpose(reg);

        let skin = tape.conv2d(image, self.skin_filter.clone(), 1, 0);
        let skin = tape.add_scalar(skin, -SKIN_OFFSET);
        let skin = tape.scale(skin, SKIN_SHARPNESS);
        let skin = tape.sigmoid(skin);
        let skin = tape.resample(skin, self.pool.rows.clone(), self.pool.cols.clone());
        let skin = tape.conv2d(skin, self.neighbourhood.clone(), 1, 1);
        let prior = tape.add_scalar(skin, -FACE_THRESHOLD);
        let prior = tape.scale(prior, FACE_SHARPNESS);
        let learned = tape.conv2d(h, self.cls_head.clone(), 1, 0);
        let logits = tape.add(prior, learned);
        let probs = tape.sigmoid(logits);
        let probs = tape.reshape(probs, &[j]);

        Ok(DetectorVars { probs, offsets })
    }
}
