//! Procedural grayscale images with controlled information density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::imagegrid::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Blobs,
    Noise,
}

pub const PATTERNS: [Pattern; 4] = [Pattern::Gradient, Pattern::Checkerboard, Pattern::Blobs, Pattern::Noise];

/// One image of the given pattern. Pixel values are quantized to 8 bits so
/// files round-trip exactly.
pub fn render(pattern: Pattern, size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let n = size as f64;
    let mut px = vec![0.0; size * size];
    match pattern {
        Pattern::Gradient => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (lo, hi) = (rng.gen_range(0.0..0.4), rng.gen_range(0.6..1.0));
            let (c, s) = (angle.cos(), angle.sin());
            for y in 0..size {
                for x in 0..size {
                    let u = ((x as f64 / n - 0.5) * c + (y as f64 / n - 0.5) * s) / std::f64::consts::SQRT_2 + 0.5;
                    px[y * size + x] = lo + (hi - lo) * u;
                }
            }
        }
        Pattern::Checkerboard => {
            let period = rng.gen_range(2..=8usize);
            let (a, b) = (rng.gen_range(0.0..0.35), rng.gen_range(0.65..1.0));
            let (oy, ox) = (rng.gen_range(0..period), rng.gen_range(0..period));
            for y in 0..size {
                for x in 0..size {
                    let on = ((y + oy) / period + (x + ox) / period) % 2 == 0;
                    px[y * size + x] = if on { a } else { b };
                }
            }
        }
        Pattern::Blobs => {
            let background = rng.gen_range(0.1..0.4);
            px.fill(background);
            for _ in 0..rng.gen_range(1..=3) {
                let (cy, cx) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
                let radius = rng.gen_range(n / 10.0..n / 4.0);
                let amp = rng.gen_range(0.3..0.6);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        px[y * size + x] += amp * (-d2 / (2.0 * radius * radius)).exp();
                    }
                }
            }
        }
        Pattern::Noise => {
            let mean = rng.gen_range(0.3..0.7);
            let noise = Normal::new(0.0, rng.gen_range(0.05..0.2)).expect("positive sd");
            for v in &mut px {
                *v = mean + noise.sample(rng);
            }
        }
    }
    for v in &mut px {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Image::new(size, size, 1, px)
}

/// `count` images cycling through the four patterns.
pub fn toy_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| render(PATTERNS[i % PATTERNS.len()], size, &mut rng)).collect()
}

/// Images of i.i.d. Gaussian pixels around 0.5 (clamped to `[0, 1]`).
pub fn gaussian_dataset(count: usize, size: usize, sigma: f64, seed: u64) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.5, sigma).map_err(|e| crate::Error::Domain(e.to_string()))?;
    (0..count)
        .map(|_| {
            let px = (0..size * size).map(|_| noise.sample(&mut rng).clamp(0.0, 1.0)).collect();
            Image::new(size, size, 1, px)
        })
        .collect()
}

/// Flat white, flat black and uniform noise, for the edge statistic.
pub fn reference_images(height: usize, width: usize, channels: usize, seed: u64) -> Result<Vec<(&'static str, Image)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width * channels;
    let noise = (0..n).map(|_| (rng.gen_range(0..256) as f64) / 255.0).collect();
    Ok(vec![
        ("white", Image::constant(height, width, channels, 1.0)?),
        ("black", Image::constant(height, width, channels, 0.0)?),
        ("noise", Image::new(height, width, channels, noise)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::variance;

    #[test]
    fn deterministic_and_in_range() {
        let a = toy_dataset(8, 32, 4).unwrap();
        assert_eq!(a, toy_dataset(8, 32, 4).unwrap());
        assert_ne!(a, toy_dataset(8, 32, 5).unwrap());
        for img in &a {
            assert_eq!(img.dims(), (32, 32, 1));
            assert!(variance(img.data()) > 1e-4);
        }
    }

    #[test]
    fn gaussian_pixels_have_requested_spread() {
        let imgs = gaussian_dataset(4, 32, 0.1, 1).unwrap();
        let all: Vec<f64> = imgs.iter().flat_map(|i| i.data().to_vec()).collect();
        let v = variance(&all);
        assert!((v - 0.01).abs() < 1e-3, "{v}");
    }
}
