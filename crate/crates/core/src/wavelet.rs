//! Single-level 2D discrete wavelet transform (Mallat filter bank with
//! periodic extension) and high-frequency sub-band mixing.
//!
//! Filter banks here are orthogonal, so the synthesis filters equal the
//! analysis filters and `idwt2` is the adjoint of `dwt2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;

/// Named wavelet family selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WaveletKind {
    #[default]
    Haar,
    Db2,
}

/// Orthogonal two-channel filter bank. `lowpass` serves as both analysis
/// and synthesis scaling filter, `highpass` as the wavelet filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair<T> {
    pub name: &'static str,
    pub lowpass: Vec<T>,
    pub highpass: Vec<T>,
}

impl<T: Scalar> FilterPair<T> {
    pub fn haar() -> Self {
        let r = T::of(std::f64::consts::FRAC_1_SQRT_2);
        Self { name: "haar", lowpass: vec![r, r], highpass: vec![r, -r] }
    }

    /// Daubechies 4-tap filter.
    pub fn db2() -> Self {
        let s3 = 3f64.sqrt();
        let d = 4.0 * 2f64.sqrt();
        let lo = [(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d];
        Self::orthogonal("db2", &lo)
    }

    /// Derives the quadrature-mirror highpass `h[k] = (-1)^k l[N-1-k]`.
    pub fn orthogonal(name: &'static str, lowpass: &[f64]) -> Self {
        let n = lowpass.len();
        let highpass = (0..n)
            .map(|k| {
                let v = lowpass[n - 1 - k];
                T::of(if k % 2 == 0 { v } else { -v })
            })
            .collect();
        Self { name, lowpass: lowpass.iter().map(|&v| T::of(v)).collect(), highpass }
    }

    pub fn from_kind(kind: WaveletKind) -> Self {
        match kind {
            WaveletKind::Haar => Self::haar(),
            WaveletKind::Db2 => Self::db2(),
        }
    }

    pub fn len(&self) -> usize {
        self.lowpass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lowpass.is_empty()
    }
}

/// The four components of one decomposition level, each a
/// `(height/2) x (width/2)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBands<T> {
    /// Approximation (lowpass rows, lowpass columns).
    pub a: GrayImage<T>,
    /// Horizontal detail (lowpass rows, highpass columns).
    pub h: GrayImage<T>,
    /// Vertical detail (highpass rows, lowpass columns).
    pub v: GrayImage<T>,
    /// Diagonal detail (highpass rows, highpass columns).
    pub d: GrayImage<T>,
}

impl<T: Scalar> SubBands<T> {
    pub fn new(a: GrayImage<T>, h: GrayImage<T>, v: GrayImage<T>, d: GrayImage<T>) -> Result<Self> {
        let shape = a.shape();
        if h.shape() != shape || v.shape() != shape || d.shape() != shape {
            return Err(Error::Dimension(format!(
                "sub-band shapes differ: A {:?}, H {:?}, V {:?}, D {:?}",
                shape,
                h.shape(),
                v.shape(),
                d.shape()
            )));
        }
        Ok(Self { a, h, v, d })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            a: GrayImage::zeros(height, width),
            h: GrayImage::zeros(height, width),
            v: GrayImage::zeros(height, width),
            d: GrayImage::zeros(height, width),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.a.shape()
    }

    pub fn energy(&self) -> T {
        self.a.energy() + self.h.energy() + self.v.energy() + self.d.energy()
    }

    pub fn high_energy(&self) -> T {
        self.h.energy() + self.v.energy() + self.d.energy()
    }
}

/// One periodic analysis step: `lo[m] = sum_k x[(2m+k) mod n] * l[k]`.
fn analyze_1d<T: Scalar>(x: &[T], filters: &FilterPair<T>, lo: &mut [T], hi: &mut [T]) {
    let n = x.len();
    for m in 0..n / 2 {
        let mut sl = T::zero();
        let mut sh = T::zero();
        for (k, (&l, &h)) in filters.lowpass.iter().zip(&filters.highpass).enumerate() {
            let v = x[(2 * m + k) % n];
            sl = sl + v * l;
            sh = sh + v * h;
        }
        lo[m] = sl;
        hi[m] = sh;
    }
}

/// Adjoint of [`analyze_1d`]; accumulates into `x`, which must start zeroed.
fn synthesize_1d<T: Scalar>(lo: &[T], hi: &[T], filters: &FilterPair<T>, x: &mut [T]) {
    let n = x.len();
    for m in 0..lo.len() {
        for (k, (&l, &h)) in filters.lowpass.iter().zip(&filters.highpass).enumerate() {
            let idx = (2 * m + k) % n;
            x[idx] = x[idx] + lo[m] * l + hi[m] * h;
        }
    }
}

fn check_filters<T: Scalar>(filters: &FilterPair<T>) -> Result<()> {
    if filters.is_empty() || filters.lowpass.len() != filters.highpass.len() {
        return Err(Error::Parameter(format!(
            "filter bank {:?} needs equal, non-empty lowpass and highpass",
            filters.name
        )));
    }
    Ok(())
}

/// Decomposes `image` into its A, H, V and D sub-bands, keeping the
/// even-indexed outputs of each filtered axis.
pub fn dwt2<T: Scalar>(image: &GrayImage<T>, filters: &FilterPair<T>) -> Result<SubBands<T>> {
    check_filters(filters)?;
    let (rows, cols) = image.shape();
    if rows < 2 || cols < 2 || rows % 2 != 0 || cols % 2 != 0 {
        return Err(Error::Dimension(format!("dwt2 needs even dimensions >= 2, got {rows}x{cols}")));
    }
    if rows < filters.len() || cols < filters.len() {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} image is smaller than the {}-tap {} filter",
            filters.len(),
            filters.name
        )));
    }
    image.ensure_finite()?;

    let (hr, hc) = (rows / 2, cols / 2);
    // Filter along j (columns index) first: every row i splits into a
    // lowpass half and a highpass half.
    let mut col_lo = vec![T::zero(); rows * hc];
    let mut col_hi = vec![T::zero(); rows * hc];
    for i in 0..rows {
        let row = &image.pixels()[i * cols..(i + 1) * cols];
        analyze_1d(row, filters, &mut col_lo[i * hc..(i + 1) * hc], &mut col_hi[i * hc..(i + 1) * hc]);
    }

    // Then along i for each column of the two halves.
    let mut bands = SubBands::zeros(hr, hc);
    let mut column = vec![T::zero(); rows];
    let mut lo = vec![T::zero(); hr];
    let mut hi = vec![T::zero(); hr];
    for (half, low_j) in [(&col_lo, true), (&col_hi, false)] {
        for j in 0..hc {
            for i in 0..rows {
                column[i] = half[i * hc + j];
            }
            analyze_1d(&column, filters, &mut lo, &mut hi);
            let (from_lo, from_hi) = if low_j {
                (&mut bands.a, &mut bands.v)
            } else {
                (&mut bands.h, &mut bands.d)
            };
            for m in 0..hr {
                from_lo.set(m, j, lo[m]);
                from_hi.set(m, j, hi[m]);
            }
        }
    }
    Ok(bands)
}

/// Reconstructs the image of doubled dimensions from its sub-bands.
pub fn idwt2<T: Scalar>(bands: &SubBands<T>, filters: &FilterPair<T>) -> Result<GrayImage<T>> {
    check_filters(filters)?;
    let shape = bands.a.shape();
    for (name, band) in [("H", &bands.h), ("V", &bands.v), ("D", &bands.d)] {
        if band.shape() != shape {
            return Err(Error::Dimension(format!(
                "band {name} has shape {:?}, A has {:?}",
                band.shape(),
                shape
            )));
        }
    }
    let (hr, hc) = shape;
    let (rows, cols) = (hr * 2, hc * 2);
    if rows < filters.len() || cols < filters.len() {
        return Err(Error::Dimension(format!(
            "{hr}x{hc} bands are too small for the {}-tap {} filter",
            filters.len(),
            filters.name
        )));
    }

    let mut col_lo = vec![T::zero(); rows * hc];
    let mut col_hi = vec![T::zero(); rows * hc];
    let mut lo = vec![T::zero(); hr];
    let mut hi = vec![T::zero(); hr];
    let mut column = vec![T::zero(); rows];
    for (half, low_j) in [(&mut col_lo, true), (&mut col_hi, false)] {
        let (band_lo, band_hi) = if low_j { (&bands.a, &bands.v) } else { (&bands.h, &bands.d) };
        for j in 0..hc {
            for m in 0..hr {
                lo[m] = band_lo.get(m, j);
                hi[m] = band_hi.get(m, j);
            }
            column.iter_mut().for_each(|c| *c = T::zero());
            synthesize_1d(&lo, &hi, filters, &mut column);
            for i in 0..rows {
                half[i * hc + j] = column[i];
            }
        }
    }

    let mut out = GrayImage::zeros(rows, cols);
    for i in 0..rows {
        let row = &mut out.pixels_mut()[i * cols..(i + 1) * cols];
        synthesize_1d(&col_lo[i * hc..(i + 1) * hc], &col_hi[i * hc..(i + 1) * hc], filters, row);
    }
    Ok(out)
}

fn blend<T: Scalar>(s: &GrayImage<T>, t: &GrayImage<T>, alpha: T) -> GrayImage<T> {
    let beta = T::one() - alpha;
    let pixels = s.pixels().iter().zip(t.pixels()).map(|(&a, &b)| alpha * a + beta * b).collect();
    GrayImage::new(s.height(), s.width(), pixels).expect("blend preserves shape")
}

/// Keeps the source approximation and blends each detail band:
/// `X_m = alpha * X_s + (1 - alpha) * X_t` for X in {H, V, D}.
pub fn mix_high_freq<T: Scalar>(source: &SubBands<T>, target: &SubBands<T>, alpha: T) -> Result<SubBands<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::Parameter(format!("mixing ratio {alpha} outside [0, 1]")));
    }
    if source.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "source bands {:?} vs target bands {:?}",
            source.shape(),
            target.shape()
        )));
    }
    Ok(SubBands {
        a: source.a.clone(),
        h: blend(&source.h, &target.h, alpha),
        v: blend(&source.v, &target.v, alpha),
        d: blend(&source.d, &target.d, alpha),
    })
}

/// Wavelet sub-band mixing without the final clamp.
pub fn pwtda_mix<T: Scalar>(
    source: &GrayImage<T>,
    target: &GrayImage<T>,
    alpha: T,
    filters: &FilterPair<T>,
) -> Result<GrayImage<T>> {
    if source.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "source {:?} and partner {:?} differ in shape",
            source.shape(),
            target.shape()
        )));
    }
    let s = dwt2(source, filters)?;
    let t = dwt2(target, filters)?;
    idwt2(&mix_high_freq(&s, &t, alpha)?, filters)
}

/// Replaces part of the source image's high-frequency content with that of
/// a same-category target partner. Output is clamped to `[0, 1]`.
pub fn pwtda_augment<T: Scalar>(
    source: &GrayImage<T>,
    target: &GrayImage<T>,
    alpha: T,
    filters: &FilterPair<T>,
) -> Result<GrayImage<T>> {
    Ok(pwtda_mix(source, target, alpha, filters)?.clamp_unit())
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(rows: usize, cols: usize, seed: u64) -> GrayImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    fn max_abs(a: &GrayImage<f64>, b: &GrayImage<f64>) -> f64 {
        a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn bands_vec(b: &SubBands<f64>) -> Vec<f64> {
        [&b.a, &b.h, &b.v, &b.d].iter().flat_map(|g| g.pixels().to_vec()).collect()
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(hr in 1usize..24, hc in 1usize..24, seed in any::<u64>(), db2 in any::<bool>()) {
            let img = image(2 * hr, 2 * hc, seed);
            let f = if db2 && hr >= 2 && hc >= 2 { FilterPair::db2() } else { FilterPair::haar() };
            let back = idwt2(&dwt2(&img, &f).unwrap(), &f).unwrap();
            prop_assert!(max_abs(&img, &back) <= 1e-9);
        }

        #[test]
        fn analysis_is_linear(hr in 1usize..16, hc in 1usize..16, s1 in any::<u64>(), s2 in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let (i, j) = (image(2 * hr, 2 * hc, s1), image(2 * hr, 2 * hc, s2));
            let f = FilterPair::haar();
            let combo = GrayImage::new(2 * hr, 2 * hc, i.pixels().iter().zip(j.pixels()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = bands_vec(&dwt2(&combo, &f).unwrap());
            let (bi, bj) = (bands_vec(&dwt2(&i, &f).unwrap()), bands_vec(&dwt2(&j, &f).unwrap()));
            for ((l, x), y) in lhs.iter().zip(&bi).zip(&bj) {
                prop_assert!((l - (a * x + b * y)).abs() <= 1e-9);
            }
        }

        #[test]
        fn energy_is_conserved(hr in 1usize..24, hc in 1usize..24, seed in any::<u64>()) {
            let img = image(2 * hr, 2 * hc, seed);
            let e: f64 = img.pixels().iter().map(|v| v * v).sum();
            prop_assert!((e - dwt2(&img, &FilterPair::haar()).unwrap().energy()).abs() <= 1e-9);
        }

        #[test]
        fn mixing_keeps_approximation_and_is_affine(h in 1usize..16, s1 in any::<u64>(), s2 in any::<u64>(), alpha in 0.0..=1.0f64) {
            let (s, t) = (image(2 * h, 2 * h, s1), image(2 * h, 2 * h, s2));
            let f = FilterPair::haar();
            let m = pwtda_mix(&s, &t, alpha, &f).unwrap();
            prop_assert!(max_abs(&dwt2(&m, &f).unwrap().a, &dwt2(&s, &f).unwrap().a) <= 1e-6);
            let (m1, m0) = (pwtda_mix(&s, &t, 1.0, &f).unwrap(), pwtda_mix(&s, &t, 0.0, &f).unwrap());
            for ((v, x1), x0) in m.pixels().iter().zip(m1.pixels()).zip(m0.pixels()) {
                prop_assert!((v - (alpha * x1 + (1.0 - alpha) * x0)).abs() <= 1e-12);
            }
            let clamped = pwtda_augment(&s, &t, alpha, &f).unwrap();
            prop_assert!(clamped.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
