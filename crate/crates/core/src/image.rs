//! RGB images on the unit interval and their 8-bit external form.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 8;

/// An RGB image stored height-major, channel-last, with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image construction".into()));
        }
        Self::new(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Channel-major `(3, H, W)` copy for network input.
    pub fn to_chw(&self) -> Tensor {
        let (h, w) = self.dims();
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.data[(y * w + x) * 3 + c];
                }
            }
        }
        Tensor::new(&[3, h, w], out)
    }

    /// Inverse of [`to_chw`](Self::to_chw); values must already lie in `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let mut out = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * 3 + ch] = t.data()[(ch * h + y) * w + x];
                }
            }
        }
        Self::new(h, w, out)
    }

    /// Per-pixel luminance plane (Rec. 601 weights), row-major `H × W`.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Largest absolute per-element difference.
    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, quantize_u8(self))
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        Self::new(
            img.height() as usize,
            img.width() as usize,
            img.as_raw().iter().map(|&b| dequantize(b)).collect(),
        )
    }

    /// Loads any supported raster (PNG, JPEG) as RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    /// Writes a lossless 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    /// Round-trips through the 8-bit domain.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| dequantize(quantize_value(v))).collect(),
        }
    }
}

pub fn quantize_value(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Maps every channel value `v` to `round(v · 255)`.
pub fn quantize_u8(img: &ImageTensor) -> Vec<u8> {
    img.data.iter().map(|&v| quantize_value(v)).collect()
}

pub fn dequantize_u8(height: usize, width: usize, bytes: &[u8]) -> Result<ImageTensor> {
    ImageTensor::new(height, width, bytes.iter().map(|&b| dequantize(b)).collect())
}

/// Clamps `x` elementwise into `[center − ε, center + ε] ∩ [0, 1]`.
pub fn project_linf(x: &ImageTensor, center: &ImageTensor, epsilon: f64) -> Result<ImageTensor> {
    x.same_shape(center)?;
    if !(epsilon >= 0.0) {
        return Err(Error::param("epsilon", "must be non-negative"));
    }
    let data = x
        .data
        .iter()
        .zip(&center.data)
        .map(|(&v, &c)| project_value(v, c, epsilon))
        .collect();
    Ok(ImageTensor {
        height: x.height,
        width: x.width,
        data,
    })
}

pub(crate) fn projection_bounds(c: f64, epsilon: f64) -> (f64, f64) {
    ((c - epsilon).max(0.0), (c + epsilon).min(1.0))
}

fn project_value(v: f64, c: f64, epsilon: f64) -> f64 {
    let (lo, hi) = projection_bounds(c, epsilon);
    v.max(lo).min(hi)
}

/// Largest per-channel byte difference between two equally sized buffers.
pub fn max_byte_deviation(a: &[u8], b: &[u8]) -> u8 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img_from(values: Vec<f64>) -> ImageTensor {
        ImageTensor::new(8, 8, values).unwrap()
    }

    #[test]
    fn quantize_endpoints() {
        let zeros = ImageTensor::filled(8, 8, 0.0).unwrap();
        assert!(quantize_u8(&zeros).iter().all(|&b| b == 0));
        let ones = ImageTensor::filled(8, 8, 1.0).unwrap();
        assert!(quantize_u8(&ones).iter().all(|&b| b == 255));
    }

    #[test]
    fn twelve_over_255_is_exact() {
        let img = ImageTensor::filled(8, 8, 12.0 / 255.0).unwrap();
        let bytes = quantize_u8(&img);
        assert!(bytes.iter().all(|&b| b == 12));
        let back = dequantize_u8(8, 8, &bytes).unwrap();
        assert!(back.data().iter().all(|&v| v == 12.0 / 255.0));
    }

    #[test]
    fn rejects_bad_images() {
        assert!(ImageTensor::new(4, 8, vec![0.0; 96]).is_err());
        assert!(ImageTensor::new(8, 8, vec![0.0; 10]).is_err());
        let mut v = vec![0.5; 192];
        v[3] = 1.5;
        assert!(ImageTensor::new(8, 8, v).is_err());
        assert!(ImageTensor::from_clamped(8, 8, vec![f64::NAN; 192]).is_err());
    }

    #[test]
    fn projection_examples() {
        let center = img_from((0..192).map(|i| (i % 17) as f64 / 16.0).collect());
        let eps = 12.0 / 255.0;
        assert_eq!(project_linf(&center, &center, eps).unwrap(), center);

        let pushed = ImageTensor::from_clamped(
            8,
            8,
            center.data().iter().map(|c| c + 2.0 * eps).collect(),
        )
        .unwrap();
        let out = project_linf(&pushed, &center, eps).unwrap();
        for (o, c) in out.data().iter().zip(center.data()) {
            assert_eq!(*o, (c + eps).min(1.0));
        }

        let out = project_linf(&pushed, &center, 0.0).unwrap();
        assert_eq!(out, center);

        let small = ImageTensor::filled(16, 8, 0.0).unwrap();
        assert!(project_linf(&small, &center, eps).is_err());
    }

    #[test]
    fn chw_round_trip() {
        let img = img_from((0..192).map(|i| i as f64 / 191.0).collect());
        assert_eq!(ImageTensor::from_chw(&img.to_chw()).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = img_from((0..192).map(|i| (i * 7 % 256) as f64 / 255.0).collect());
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(quantize_u8(&back), quantize_u8(&img));
        assert_eq!(back, img.quantized());
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (
            prop::collection::vec(0.0f64..=1.0, 192),
            prop::collection::vec(0.0f64..=1.0, 192),
            0.0f64..0.3,
        )
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_bounded((x, c, eps) in arb_pair()) {
            let x = img_from(x);
            let c = img_from(c);
            let p = project_linf(&x, &c, eps).unwrap();
            let pp = project_linf(&p, &c, eps).unwrap();
            prop_assert_eq!(&p, &pp);
            for (v, cv) in p.data().iter().zip(c.data()) {
                prop_assert!(*v >= cv - eps && *v <= cv + eps);
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn quantize_round_trip_error_is_half_a_level(x in prop::collection::vec(0.0f64..=1.0, 192)) {
            let img = img_from(x);
            let back = img.quantized();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
            }
        }

        #[test]
        fn projected_bytes_respect_budget((x, c) in (
            prop::collection::vec(0.0f64..=1.0, 192),
            prop::collection::vec(0u8..=255, 192),
        ), k in 0u8..=20) {
            let center = dequantize_u8(8, 8, &c).unwrap();
            let eps = k as f64 / 255.0;
            let p = project_linf(&img_from(x), &center, eps).unwrap();
            prop_assert!(max_byte_deviation(&quantize_u8(&p), &c) <= k);
        }
    }
}
