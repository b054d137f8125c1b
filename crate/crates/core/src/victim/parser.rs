use super::FaceParser;
use crate::error::Result;
use crate::image::ImageTensor;
use crate::types::{MaskKind, SpatialMask};

/// Component ellipses `(cx, cy, rx, ry)` in fractions of the image size, for
/// a face centered in the frame.
pub(crate) const COMPONENTS: [(f64, f64, f64, f64); 4] = [
    (0.38, 0.40, 0.08, 0.045),
    (0.62, 0.40, 0.08, 0.045),
    (0.50, 0.55, 0.05, 0.08),
    (0.50, 0.70, 0.12, 0.045),
];

const BLANK_STD: f64 = 1e-3;

/// Canonical-layout face parser.
///
/// Marks the eye, nose and mouth regions of an aligned, centered face. An
/// image without luminance variation is treated as containing no face and
/// yields an empty mask.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeometricParser;

impl FaceParser for GeometricParser {
    fn parse(&self, img: &ImageTensor) -> Result<SpatialMask> {
        let (h, w) = img.dims();
        let lum = img.luminance();
        let n = lum.len() as f64;
        let mean = lum.iter().sum::<f64>() / n;
        let std = (lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut data = vec![0.0; h * w];
        if std > BLANK_STD {
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    let inside = COMPONENTS.iter().any(|&(cx, cy, rx, ry)| {
                        ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
                    });
                    if inside {
                        data[y * w + x] = 1.0;
                    }
                }
            }
        }
        SpatialMask::new(h, w, data, MaskKind::Semantic)
    }
}
