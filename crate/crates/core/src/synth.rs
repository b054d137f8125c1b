//! Seeded synthetic face portraits.
//!
//! A textured two-tone background, a hair cap, a shaded skin ellipse, eyes
//! with irises, brows, a nose and a mouth, soft-focused and quantized to
//! 8 bits. Feature placement follows the canonical layout the geometric
//! parser expects, with per-seed jitter in position, shape and color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;
use crate::resample::gaussian_blur;

type Rgb = [f64; 3];

/// Final blur; keeps detail within what an 8×8×4 latent can reconstruct.
const SOFT_FOCUS: f64 = 1.6;

struct Canvas {
    size: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    /// Paints `color(u, v, r)` wherever the normalized ellipse radius `r ≤ 1`.
    fn ellipse(&mut self, c: (f64, f64), r: (f64, f64), color: impl Fn(f64, f64, f64) -> Rgb) {
        let n = self.size as f64;
        for y in 0..self.size {
            for x in 0..self.size {
                let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
                let d = (((u - c.0) / r.0).powi(2) + ((v - c.1) / r.1).powi(2)).sqrt();
                if d <= 1.0 {
                    self.px[y * self.size + x] = color(u, v, d);
                }
            }
        }
    }
}

fn range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    rng.random_range(-amount..amount)
}

fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, amplitude: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..size * size)
        .map(|_| rng.random_range(-amplitude..amplitude))
        .collect();
    gaussian_blur(&raw, size, size, 0.8)
}

/// Renders the face for `seed` at `size × size`.
pub fn synthetic_face(seed: u64, size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_face);
    let top: Rgb = [range(&mut rng, 0.25, 0.45), range(&mut rng, 0.3, 0.5), range(&mut rng, 0.45, 0.65)];
    let bottom: Rgb = [range(&mut rng, 0.3, 0.5), range(&mut rng, 0.3, 0.5), range(&mut rng, 0.4, 0.6)];
    let bg_noise = smooth_noise(&mut rng, size, 0.05);
    let hair_noise = smooth_noise(&mut rng, size, 0.08);

    let mut canvas = Canvas {
        size,
        px: (0..size * size)
            .map(|i| {
                let t = (i / size) as f64 / (size - 1) as f64;
                let n = bg_noise[i];
                [0, 1, 2].map(|c| top[c] * (1.0 - t) + bottom[c] * t + n)
            })
            .collect(),
    };

    let center = (0.5 + jitter(&mut rng, 0.02), 0.53 + jitter(&mut rng, 0.02));
    let face_r = (range(&mut rng, 0.27, 0.32), range(&mut rng, 0.34, 0.40));
    let (dx, dy) = (center.0 - 0.5, center.1 - 0.53);

    let hair: Rgb = {
        let base = range(&mut rng, 0.08, 0.35);
        [base + 0.05, base, base * 0.7]
    };
    let s = size;
    canvas.ellipse(
        (center.0, center.1 - 0.12),
        (face_r.0 + 0.05, face_r.1 * 0.8),
        |u, v, _| {
            let i = ((v * s as f64) as usize).min(s - 1) * s + ((u * s as f64) as usize).min(s - 1);
            let n = hair_noise[i];
            [hair[0] + n, hair[1] + n, hair[2] + n]
        },
    );

    let skin_r = range(&mut rng, 0.72, 0.88);
    let skin: Rgb = [
        skin_r,
        skin_r - range(&mut rng, 0.15, 0.22),
        skin_r - range(&mut rng, 0.25, 0.33),
    ];
    canvas.ellipse(center, face_r, |_, _, d| {
        let shade = 1.0 - 0.18 * d * d;
        skin.map(|c| c * shade)
    });

    let nose = skin.map(|c| c * 0.88);
    canvas.ellipse((0.5 + dx, 0.55 + dy), (0.04, 0.07), |_, _, d| {
        nose.map(|c| c * (1.0 - 0.05 * d))
    });

    let iris: Rgb = match rng.random_range(0..3) {
        0 => [0.35, 0.22, 0.12],
        1 => [0.2, 0.35, 0.55],
        _ => [0.25, 0.4, 0.25],
    };
    let brow = hair.map(|c| c * 0.9);
    let eye_y = 0.40 + dy + jitter(&mut rng, 0.01);
    let spread = 0.12 + jitter(&mut rng, 0.012);
    for side in [-1.0, 1.0] {
        let ex = 0.5 + dx + side * spread;
        canvas.ellipse((ex, eye_y - 0.07), (0.08, 0.014), |_, _, _| brow);
        canvas.ellipse((ex, eye_y), (0.07, 0.035), |_, _, _| [0.92, 0.91, 0.88]);
        canvas.ellipse((ex, eye_y), (0.026, 0.03), |_, _, _| iris);
        canvas.ellipse((ex, eye_y), (0.011, 0.013), |_, _, _| [0.05, 0.05, 0.05]);
    }

    let lips: Rgb = [
        range(&mut rng, 0.6, 0.8),
        range(&mut rng, 0.22, 0.35),
        range(&mut rng, 0.25, 0.35),
    ];
    let mouth_w = range(&mut rng, 0.08, 0.12);
    canvas.ellipse((0.5 + dx, 0.70 + dy), (mouth_w, 0.03), |_, _, _| lips);

    let mut planes = [vec![0.0; s * s], vec![0.0; s * s], vec![0.0; s * s]];
    for (i, p) in canvas.px.iter().enumerate() {
        for c in 0..3 {
            planes[c][i] = p[c];
        }
    }
    let planes = planes.map(|p| gaussian_blur(&p, s, s, SOFT_FOCUS));
    let data = (0..s * s)
        .flat_map(|i| [0, 1, 2].map(|c| planes[c][i].clamp(0.0, 1.0)))
        .collect();
    ImageTensor::new(s, s, data)
        .expect("rendered values are clamped")
        .quantized()
}
