use super::PerceptualDistance;
use crate::error::Result;
use crate::image::ImageTensor;
use crate::resample::gaussian_blur;
use crate::types::{MaskKind, SpatialMask};

/// Contrast-masked feature distance, an LPIPS stand-in.
///
/// Per-pixel squared differences of luminance, two chroma planes and the
/// luminance gradient are divided by the local luminance variance of the two
/// images, so the same change costs more on smooth skin than on texture. The
/// result is blurred and squashed into `[0, 1)` with `1 − exp(−κ·d)`.
#[derive(Debug, Clone)]
pub struct SurrogatePerceptual {
    pub sensitivity: f64,
    pub masking_floor: f64,
    pub masking_sigma: f64,
    pub pooling_sigma: f64,
}

impl Default for SurrogatePerceptual {
    fn default() -> Self {
        Self {
            sensitivity: 0.5,
            masking_floor: 2e-3,
            masking_sigma: 2.0,
            pooling_sigma: 1.0,
        }
    }
}

struct Features {
    planes: [Vec<f64>; 5],
    variance: Vec<f64>,
}

const FEATURE_WEIGHTS: [f64; 5] = [1.0, 0.5, 0.5, 0.5, 0.5];

impl SurrogatePerceptual {
    fn features(&self, img: &ImageTensor) -> Features {
        let (h, w) = img.dims();
        let lum = img.luminance();
        let px = img.data();
        let cr: Vec<f64> = px.chunks_exact(3).map(|p| p[0] - p[1]).collect();
        let cb: Vec<f64> = px.chunks_exact(3).map(|p| p[2] - p[1]).collect();
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                gx[y * w + x] = 0.5 * (lum[y * w + xr] - lum[y * w + xl]);
                gy[y * w + x] = 0.5 * (lum[yd * w + x] - lum[yu * w + x]);
            }
        }
        let mean = gaussian_blur(&lum, h, w, self.masking_sigma);
        let sq: Vec<f64> = lum.iter().map(|v| v * v).collect();
        let mean_sq = gaussian_blur(&sq, h, w, self.masking_sigma);
        let variance = mean_sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s - m * m).max(0.0))
            .collect();
        Features {
            planes: [lum, cr, cb, gx, gy],
            variance,
        }
    }
}

impl PerceptualDistance for SurrogatePerceptual {
    fn distance_map(&self, a: &ImageTensor, b: &ImageTensor) -> Result<(f64, SpatialMask)> {
        a.same_shape(b)?;
        let (h, w) = a.dims();
        let fa = self.features(a);
        let fb = self.features(b);
        let mut raw = vec![0.0; h * w];
        for (p, r) in raw.iter_mut().enumerate() {
            let mut d = 0.0;
            for (k, wt) in FEATURE_WEIGHTS.iter().enumerate() {
                let diff = fa.planes[k][p] - fb.planes[k][p];
                d += wt * diff * diff;
            }
            let masking = self.masking_floor + 0.5 * (fa.variance[p] + fb.variance[p]);
            *r = d / masking;
        }
        let pooled = gaussian_blur(&raw, h, w, self.pooling_sigma);
        let map: Vec<f64> = pooled
            .iter()
            .map(|&d| (1.0 - (-self.sensitivity * d.max(0.0)).exp()).clamp(0.0, 1.0))
            .collect();
        let mean = map.iter().sum::<f64>() / map.len() as f64;
        Ok((mean, SpatialMask::new(h, w, map, MaskKind::Field)?))
    }
}
