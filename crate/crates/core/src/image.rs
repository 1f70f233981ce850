use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Single-channel image stored row-major. Intensities are nominally in
/// `[0, 1]`; intermediate results (unclamped reconstructions) may leave it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} pixels supplied for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![T::zero(); height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                pixels.push(f(i, j));
            }
        }
        Self { height, width, pixels }
    }

    /// Builds an image from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let pixels = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [T] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.pixels[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.pixels[i * self.width + j] = v;
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.pixels.iter().position(|p| !p.is_finite()) {
            Some(idx) => Err(Error::Input(format!(
                "non-finite pixel at ({}, {})",
                idx / self.width.max(1),
                idx % self.width.max(1)
            ))),
            None => Ok(()),
        }
    }

    pub fn clamp_unit(mut self) -> Self {
        for p in &mut self.pixels {
            *p = p.max(T::zero()).min(T::one());
        }
        self
    }

    pub fn energy(&self) -> T {
        self.pixels.iter().map(|&p| p * p).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Mirrors columns (horizontal flip).
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |i, j| self.get(i, self.width - 1 - j))
    }

    pub fn cast<U: Scalar>(&self) -> GrayImage<U> {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| U::of(p.as_f64())).collect(),
        }
    }
}
