use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Domain, DomainDataset, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;
use crate::wavelet::{dwt2, idwt2, FilterPair, SubBands};

/// Target-only texture shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainGap {
    /// Scale of the band-limited noise synthesised in the detail sub-bands.
    pub noise_band_gain: f64,
    /// Side in pixels of the constant blocks of multiplicative speckle.
    pub speckle_grain: usize,
    /// Standard deviation of the multiplicative speckle.
    pub speckle_strength: f64,
    /// Added to every target pixel before clamping.
    pub contrast_offset: f64,
    /// Number of localized clutter patches of detail-band noise.
    pub clutter_patches: usize,
    /// Peak scale of the detail-band noise inside a clutter patch.
    pub clutter_gain: f64,
}

impl Default for DomainGap {
    fn default() -> Self {
        Self {
            noise_band_gain: 1.0,
            speckle_grain: 1,
            speckle_strength: 0.3,
            contrast_offset: 0.05,
            clutter_patches: 3,
            clutter_gain: 1.0,
        }
    }
}

impl DomainGap {
    pub fn none() -> Self {
        Self {
            noise_band_gain: 0.0,
            speckle_grain: 1,
            speckle_strength: 0.0,
            contrast_offset: 0.0,
            clutter_patches: 0,
            clutter_gain: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_categories: usize,
    /// Per domain.
    pub images_per_category: usize,
    pub image_size: usize,
    pub gap: DomainGap,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { num_categories: 4, images_per_category: 50, image_size: 64, gap: DomainGap::default(), seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return Err(Error::Config("synthetic data needs at least 2 categories".into()));
        }
        if self.images_per_category == 0 {
            return Err(Error::Config("images_per_category must be positive".into()));
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!("image_size {} must be even and at least 8", self.image_size)));
        }
        let g = &self.gap;
        if !(g.noise_band_gain >= 0.0 && g.speckle_strength >= 0.0 && g.clutter_gain >= 0.0 && g.contrast_offset.is_finite()) || g.speckle_grain == 0 {
            return Err(Error::Config(format!("invalid domain gap {g:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Blob { x: f64, y: f64, r: f64 },
    Bar { x: f64, y: f64, len: f64, width: f64, angle: f64 },
    Ring { r: f64, width: f64 },
}

/// Layouts in normalised coordinates (`[-1, 1]` across the image). They are
/// distinguishable under any rotation, so quarter-turn augmentations keep
/// the category.
fn layout(category: usize) -> Vec<Primitive> {
    use Primitive::*;
    let polygon = |n: usize, radius: f64, r: f64, phase: f64| -> Vec<Primitive> {
        (0..n)
            .map(|i| {
                let a = phase + 2.0 * PI * i as f64 / n as f64;
                Blob { x: radius * a.cos(), y: radius * a.sin(), r }
            })
            .collect()
    };
    match category {
        0 => vec![Blob { x: 0.0, y: 0.0, r: 0.22 }],
        1 => vec![Ring { r: 0.45, width: 0.12 }],
        2 => vec![
            Bar { x: 0.0, y: 0.0, len: 1.0, width: 0.12, angle: 0.0 },
            Bar { x: 0.0, y: 0.0, len: 1.0, width: 0.12, angle: PI / 2.0 },
        ],
        3 => vec![Bar { x: 0.0, y: 0.0, len: 1.0, width: 0.13, angle: 0.0 }],
        4 => polygon(2, 0.4, 0.14, 0.0),
        5 => polygon(3, 0.42, 0.13, 0.0),
        6 => polygon(4, 0.48, 0.12, PI / 4.0),
        7 => vec![Blob { x: 0.0, y: 0.0, r: 0.12 }, Ring { r: 0.62, width: 0.1 }],
        8 => vec![
            Bar { x: 0.0, y: -0.32, len: 0.9, width: 0.12, angle: 0.0 },
            Bar { x: 0.0, y: 0.32, len: 0.9, width: 0.12, angle: 0.0 },
        ],
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(category as u64);
            let n = rng.random_range(2..=4);
            (0..n)
                .map(|_| Blob {
                    x: rng.random_range(-0.55..0.55),
                    y: rng.random_range(-0.55..0.55),
                    r: rng.random_range(0.1..0.18),
                })
                .collect()
        }
    }
}

const BACKGROUND: f64 = 0.15;
const AMPLITUDE: f64 = 0.6;

/// Pose of one rendered sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub angle: f64,
    /// Translation in normalised units.
    pub dx: f64,
    pub dy: f64,
    pub gain: f64,
}

impl Pose {
    fn random(rng: &mut impl Rng) -> Self {
        Self {
            angle: rng.random_range(0.0..2.0 * PI),
            dx: rng.random_range(-0.15..0.15),
            dy: rng.random_range(-0.15..0.15),
            gain: rng.random_range(0.85..1.15),
        }
    }
}

/// Noise-free rendering of `category`'s layout in `[0, 1]`.
pub fn render_template(category: usize, size: usize, pose: Pose) -> GrayImage<f64> {
    let prims = layout(category);
    let (c, s) = (pose.angle.cos(), pose.angle.sin());
    GrayImage::from_fn(size, size, |i, j| {
        let half = size as f64 / 2.0;
        let u0 = (j as f64 + 0.5 - half) / half - pose.dx;
        let v0 = (i as f64 + 0.5 - half) / half - pose.dy;
        let (u, v) = (c * u0 + s * v0, -s * u0 + c * v0);
        let mut value: f64 = 0.0;
        for p in &prims {
            let d2 = match *p {
                Primitive::Blob { x, y, r } => ((u - x).powi(2) + (v - y).powi(2)) / (r * r),
                Primitive::Bar { x, y, len, width, angle } => {
                    let (ca, sa) = (angle.cos(), angle.sin());
                    let (du, dv) = (u - x, v - y);
                    let along = (ca * du + sa * dv).abs();
                    let across = -sa * du + ca * dv;
                    let out = (along - len / 2.0).max(0.0);
                    (out * out + across * across) / (width * width)
                }
                Primitive::Ring { r, width } => {
                    let rad = (u * u + v * v).sqrt();
                    (rad - r).powi(2) / (width * width)
                }
            };
            value = value.max((-0.5 * d2).exp());
        }
        (BACKGROUND + AMPLITUDE * pose.gain * value).clamp(0.0, 1.0)
    })
}

/// Detail-band noise: random H/V/D coefficients with a zero approximation
/// band, synthesised back to the image domain.
fn band_noise(size: usize, rng: &mut impl Rng) -> GrayImage<f64> {
    let half = size / 2;
    let mut draw = || GrayImage::from_fn(half, half, |_, _| StandardNormal.sample(&mut *rng));
    let bands = SubBands::new(GrayImage::zeros(half, half), draw(), draw(), draw()).unwrap();
    idwt2(&bands, &FilterPair::haar()).unwrap()
}

fn apply_gap(clean: &GrayImage<f64>, gap: &DomainGap, rng: &mut impl Rng) -> GrayImage<f64> {
    let size = clean.height();
    let noise = band_noise(size, rng);
    let clutter = band_noise(size, rng);
    let half = size as f64 / 2.0;
    let patches: Vec<(f64, f64)> =
        (0..gap.clutter_patches).map(|_| (rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7))).collect();
    let envelope = |i: usize, j: usize| -> f64 {
        let u = (j as f64 + 0.5 - half) / half;
        let v = (i as f64 + 0.5 - half) / half;
        patches.iter().map(|&(x, y)| (-((u - x).powi(2) + (v - y).powi(2)) / (2.0 * 0.15 * 0.15)).exp()).sum()
    };
    let blocks = size.div_ceil(gap.speckle_grain);
    let speckle: Vec<f64> = (0..blocks * blocks).map(|_| StandardNormal.sample(&mut *rng)).collect();
    GrayImage::from_fn(size, size, |i, j| {
        let sp = speckle[(i / gap.speckle_grain) * blocks + j / gap.speckle_grain];
        let x = clean.get(i, j);
        x * (1.0 + gap.speckle_strength * sp)
            + gap.noise_band_gain * noise.get(i, j)
            + gap.clutter_gain * envelope(i, j) * clutter.get(i, j)
            + gap.contrast_offset
    })
    .clamp_unit()
}

fn sample_rng(seed: u64, domain: Domain, category: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match domain {
        Domain::Source => 0u64,
        Domain::Target => 1,
    };
    rng.set_stream(tag << 62 | (category as u64) << 32 | index as u64);
    rng
}

/// Source and target datasets with `images_per_category` samples per
/// category each. Category identity lives in low-frequency shapes; the
/// target domain additionally carries the high-frequency texture `gap`.
/// Samples cycle through 14 to 17 degree elevation metadata.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<(DomainDataset<T>, DomainDataset<T>)> {
    spec.validate()?;
    let categories: Vec<String> = (0..spec.num_categories).map(|k| format!("class{k:02}")).collect();
    let build = |domain: Domain| {
        let mut samples = Vec::with_capacity(spec.num_categories * spec.images_per_category);
        for k in 0..spec.num_categories {
            for n in 0..spec.images_per_category {
                let mut rng = sample_rng(spec.seed, domain, k, n);
                let pose = Pose::random(&mut rng);
                let clean = render_template(k, spec.image_size, pose);
                let image = match domain {
                    Domain::Source => clean,
                    Domain::Target => apply_gap(&clean, &spec.gap, &mut rng),
                };
                samples.push(Sample {
                    image: image.cast(),
                    label: k,
                    domain,
                    meta: SampleMeta {
                        elevation: Some((14 + n % 4) as f64),
                        azimuth: Some(pose.angle.to_degrees()),
                        path: None,
                    },
                });
            }
        }
        DomainDataset::new(samples, categories.clone())
    };
    Ok((build(Domain::Source)?, build(Domain::Target)?))
}

/// Mean over matched pairs (same category and pose, with and without the
/// gap) of `(|dH| + |dV| + |dD|) / |dA|`, using Frobenius norms of the Haar
/// sub-band differences.
pub fn gap_ratio(spec: &SyntheticSpec, pairs_per_category: usize) -> Result<f64> {
    spec.validate()?;
    let haar = FilterPair::haar();
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..spec.num_categories {
        for n in 0..pairs_per_category {
            let mut rng = sample_rng(spec.seed ^ 0xd1a6, Domain::Target, k, n);
            let clean = render_template(k, spec.image_size, Pose::random(&mut rng));
            let shifted = apply_gap(&clean, &spec.gap, &mut rng);
            let a = dwt2(&clean, &haar)?;
            let b = dwt2(&shifted, &haar)?;
            let norm = |x: &GrayImage<f64>, y: &GrayImage<f64>| {
                x.pixels().iter().zip(y.pixels()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
            };
            let high = norm(&a.h, &b.h) + norm(&a.v, &b.v) + norm(&a.d, &b.d);
            total += high / norm(&a.a, &b.a);
            count += 1;
        }
    }
    Ok(total / count as f64)
}
