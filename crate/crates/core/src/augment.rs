//! Stochastic weak and strong views used by consistency training.
//!
//! Every draw comes from the caller's RNG, so an identical
//! `(image, config, rng state)` triple always yields the same output.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum translation in pixels along each axis.
    pub shift_max: usize,
    pub flip_prob: f64,
    /// Standard deviation of the additive Gaussian noise op.
    pub noise_sigma: f64,
    /// Side of the square cutout patch; 0 disables cutout.
    pub cutout_size: usize,
    /// Number of ops drawn (with replacement) from the strong op set.
    pub strong_ops_per_image: usize,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_max: 4,
            flip_prob: 0.5,
            noise_sigma: 0.05,
            cutout_size: 16,
            strong_ops_per_image: 2,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// All transforms disabled.
    pub fn identity() -> Self {
        Self {
            shift_max: 0,
            flip_prob: 0.0,
            noise_sigma: 0.0,
            cutout_size: 0,
            strong_ops_per_image: 0,
            rng_seed: 0,
        }
    }

    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Parameter(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        let limit = height.min(width) / 4;
        if self.shift_max > 0 && self.shift_max >= limit.max(1) {
            return Err(Error::Parameter(format!(
                "shift_max {} must be below min(height, width)/4 = {limit}",
                self.shift_max
            )));
        }
        if self.cutout_size > height.min(width) {
            return Err(Error::Parameter(format!(
                "cutout_size {} exceeds the {height}x{width} image",
                self.cutout_size
            )));
        }
        Ok(())
    }
}

/// Strong-view op set. Rotations are restricted to quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StrongOp {
    Noise,
    Contrast,
    Cutout,
    Rotate,
}

const STRONG_OPS: [StrongOp; 4] = [StrongOp::Noise, StrongOp::Contrast, StrongOp::Cutout, StrongOp::Rotate];

fn translate<T: Scalar>(img: &GrayImage<T>, dy: isize, dx: isize) -> GrayImage<T> {
    let (h, w) = img.shape();
    GrayImage::from_fn(h, w, |i, j| {
        let si = i as isize - dy;
        let sj = j as isize - dx;
        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
            img.get(si as usize, sj as usize)
        } else {
            T::zero()
        }
    })
}

fn rotate_quarter<T: Scalar>(img: &GrayImage<T>, turns: usize) -> GrayImage<T> {
    let (h, w) = img.shape();
    match turns % 4 {
        1 => GrayImage::from_fn(w, h, |i, j| img.get(h - 1 - j, i)),
        2 => GrayImage::from_fn(h, w, |i, j| img.get(h - 1 - i, w - 1 - j)),
        3 => GrayImage::from_fn(w, h, |i, j| img.get(j, w - 1 - i)),
        _ => img.clone(),
    }
}

fn cutout<T: Scalar, R: Rng + ?Sized>(img: &mut GrayImage<T>, size: usize, rng: &mut R) {
    if size == 0 {
        return;
    }
    let (h, w) = img.shape();
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    for i in top..top + size {
        for j in left..left + size {
            img.set(i, j, T::zero());
        }
    }
}

/// Random horizontal flip followed by a random zero-padded translation of
/// up to `shift_max` pixels per axis.
pub fn weak_augment<T: Scalar, R: Rng + ?Sized>(
    image: &GrayImage<T>,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<GrayImage<T>> {
    let (h, w) = image.shape();
    config.validate_for(h, w)?;
    image.ensure_finite()?;
    let flip = rng.random::<f64>() < config.flip_prob;
    let s = config.shift_max as i64;
    let dy = rng.random_range(-s..=s) as isize;
    let dx = rng.random_range(-s..=s) as isize;
    let base = if flip { image.flip_horizontal() } else { image.clone() };
    Ok(if dy == 0 && dx == 0 { base } else { translate(&base, dy, dx) })
}

/// Weak view, then `strong_ops_per_image` randomly chosen photometric or
/// geometric ops, then one more cutout; result clamped to `[0, 1]`.
pub fn strong_augment<T: Scalar, R: Rng + ?Sized>(
    image: &GrayImage<T>,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<GrayImage<T>> {
    let mut out = weak_augment(image, config, rng)?;
    let square = out.height() == out.width();
    for _ in 0..config.strong_ops_per_image {
        match STRONG_OPS[rng.random_range(0..STRONG_OPS.len())] {
            StrongOp::Noise => {
                if config.noise_sigma > 0.0 {
                    let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
                    for p in out.pixels_mut() {
                        *p = *p + T::of(normal.sample(rng));
                    }
                }
            }
            StrongOp::Contrast => {
                let scale = T::of(rng.random_range(0.5..=1.5));
                let n = T::of(out.pixels().len() as f64);
                let mean = out.pixels().iter().copied().sum::<T>() / n;
                for p in out.pixels_mut() {
                    *p = mean + scale * (*p - mean);
                }
            }
            StrongOp::Cutout => cutout(&mut out, config.cutout_size, rng),
            StrongOp::Rotate => {
                // quarter turns would change the shape of non-square images
                let turns = if square { rng.random_range(1..=3) } else { 2 };
                out = rotate_quarter(&out, turns);
            }
        }
    }
    cutout(&mut out, config.cutout_size, rng);
    Ok(out.clamp_unit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> GrayImage<f64> {
        GrayImage::from_fn(h, w, |i, j| ((i * w + j) as f64 / (h * w) as f64).min(1.0))
    }

    #[test]
    fn disabled_weak_is_identity() {
        let img = ramp(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(weak_augment(&img, &AugmentConfig::identity(), &mut rng).unwrap(), img);
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let img = ramp(8, 12);
        let cfg = AugmentConfig { flip_prob: 1.0, ..AugmentConfig::identity() };
        let out = weak_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for i in 0..8 {
            for j in 0..12 {
                assert_eq!(out.get(i, j), img.get(i, 11 - j));
            }
        }
    }

    #[test]
    fn same_stream_state_same_output() {
        let img = ramp(32, 32);
        let cfg = AugmentConfig::default();
        for f in [weak_augment::<f64, ChaCha8Rng>, strong_augment::<f64, ChaCha8Rng>] {
            let a = f(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = f(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn degenerate_strong_equals_weak() {
        let img = ramp(32, 32);
        let cfg = AugmentConfig { shift_max: 3, flip_prob: 0.5, ..AugmentConfig::identity() };
        for seed in 0..20 {
            let weak = weak_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let strong = strong_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(weak, strong);
        }
    }

    #[test]
    fn strong_output_in_unit_range_and_shape_kept() {
        let cfg = AugmentConfig { noise_sigma: 0.5, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..50 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let img = GrayImage::<f64>::from_fn(32, 24, |_, _| r.random());
            let out = strong_augment(&img, &cfg, &mut rng).unwrap();
            assert_eq!(out.shape(), (32, 24));
            assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert_eq!(weak_augment(&img, &cfg, &mut rng).unwrap().shape(), (32, 24));
        }
    }

    #[test]
    fn strong_differs_from_weak_on_same_stream() {
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let img = GrayImage::<f64>::from_fn(64, 64, |_, _| r.random());
        let cfg = AugmentConfig::default();
        let mut differ = 0;
        for seed in 0..1000 {
            let weak = weak_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let strong = strong_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            if weak != strong {
                differ += 1;
            }
        }
        assert!(differ >= 990, "{differ}/1000 strong views differ");
    }

    #[test]
    fn oversized_shift_rejected() {
        let cfg = AugmentConfig { shift_max: 4, ..AugmentConfig::identity() };
        let img = ramp(16, 16);
        assert!(matches!(
            weak_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Parameter(_))
        ));
    }
}
