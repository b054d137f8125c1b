//! Separable linear resampling operators and Gaussian smoothing.
//!
//! Operators are `(dst, src)` matrices applied along one axis; a 2-D resize
//! is `rows · X · colsᵀ`. The same matrices feed the autodiff `resample` op.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Area-averaging operator: destination cell `i` covers the source interval
/// `[i·src/dst, (i+1)·src/dst)` and takes the overlap-weighted mean.
pub fn area_matrix(src: usize, dst: usize) -> Tensor {
    assert!(src > 0 && dst > 0);
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let lo = i as f64 * scale;
        let hi = (i + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src);
        for j in first..last {
            let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
            m[i * src + j] = overlap / scale;
        }
    }
    Tensor::new(&[dst, src], m)
}

/// Bilinear operator with half-pixel centers and edge clamping.
pub fn bilinear_matrix(src: usize, dst: usize) -> Tensor {
    assert!(src > 0 && dst > 0);
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let j0 = pos.floor() as usize;
        let j1 = (j0 + 1).min(src - 1);
        let t = pos - j0 as f64;
        m[i * src + j0] += 1.0 - t;
        m[i * src + j1] += t;
    }
    Tensor::new(&[dst, src], m)
}

/// Nearest-neighbour replication by an integer factor.
pub fn nearest_matrix(src: usize, factor: usize) -> Tensor {
    let dst = src * factor;
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        m[i * src + i / factor] = 1.0;
    }
    Tensor::new(&[dst, src], m)
}

/// Row/column operator pair for a 2-D resize.
#[derive(Debug, Clone)]
pub struct Resize2d {
    pub rows: Arc<Tensor>,
    pub cols: Arc<Tensor>,
}

impl Resize2d {
    pub fn area(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            rows: Arc::new(area_matrix(src.0, dst.0)),
            cols: Arc::new(area_matrix(src.1, dst.1)),
        }
    }

    pub fn bilinear(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            rows: Arc::new(bilinear_matrix(src.0, dst.0)),
            cols: Arc::new(bilinear_matrix(src.1, dst.1)),
        }
    }

    pub fn nearest(src: (usize, usize), factor: usize) -> Self {
        Self {
            rows: Arc::new(nearest_matrix(src.0, factor)),
            cols: Arc::new(nearest_matrix(src.1, factor)),
        }
    }

    /// Applies the operator to a single row-major plane.
    pub fn apply_plane(&self, plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        let t = Tensor::new(&[h, w], plane.to_vec());
        self.rows.matmul(&t).matmul(&self.cols.transpose2()).into_data()
    }

    /// Applies the operator to each channel of a `(C, H, W)` tensor.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        crate::autodiff::resample_forward(x, &self.rows, &self.cols)
    }
}

/// Area-averaging resize of a row-major plane.
pub fn area_resize(plane: &[f64], src: (usize, usize), dst: (usize, usize)) -> Result<Vec<f64>> {
    if dst.0 == 0 || dst.1 == 0 {
        return Err(Error::param("target", "dimensions must be positive"));
    }
    if plane.len() != src.0 * src.1 {
        return Err(Error::ShapeMismatch("plane length does not match dimensions".into()));
    }
    if src == dst {
        return Ok(plane.to_vec());
    }
    Ok(Resize2d::area(src, dst).apply_plane(plane, src.0, src.1))
}

/// Unit-sum Gaussian taps truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index without edge repetition (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Separable Gaussian blur of a row-major plane with reflection padding.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + k as isize - r, w);
                acc += kv * plane[y * w + xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + k as isize - r, h);
                acc += kv * tmp[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_rows_sum_to_one() {
        for (s, d) in [(64, 8), (7, 3), (3, 7), (5, 5)] {
            let m = area_matrix(s, d);
            for i in 0..d {
                let row: f64 = m.data()[i * s..(i + 1) * s].iter().sum();
                assert!((row - 1.0).abs() < 1e-12, "{s}->{d} row {i}: {row}");
            }
        }
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let m = bilinear_matrix(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.data()[i * 6 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(3.0);
        assert_eq!(k.len(), 19);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_keeps_constants() {
        let plane = vec![0.3; 20];
        for v in gaussian_blur(&plane, 4, 5, 2.0) {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }
}
