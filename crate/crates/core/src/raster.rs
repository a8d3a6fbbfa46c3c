//! Planar RGB images and binary masks.
//!
//! Images hold `f64` samples in working RGB, nominally `[0, 1]`, stored as three
//! row-major planes. Masks are dense boolean grids on the same canvas.

use std::path::Path;

use crate::error::{Error, Result};

/// A channelwise RGB triple.
pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (c, value) in color.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*value);
        }
        Self { width, height, data }
    }

    /// Builds an image from planar data (`[r plane, g plane, b plane]`).
    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Schema(format!(
                "planar buffer of {} samples for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> Rgb {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn put_pixel(&mut self, y: usize, x: usize, rgb: Rgb) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn same_canvas(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_canvas(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_canvas(other) {
            Ok(())
        } else {
            Err(Error::Canvas(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Copies `src` pixels wherever `mask` is set.
    pub fn copy_from_masked(&mut self, src: &Image, mask: &Mask) {
        for (i, &m) in mask.bits().iter().enumerate() {
            if m {
                let n = self.width * self.height;
                for c in 0..3 {
                    self.data[c * n + i] = src.data[c * n + i];
                }
            }
        }
    }

    /// Paints `color` wherever `mask` is set.
    pub fn fill_masked(&mut self, mask: &Mask, color: Rgb) {
        let n = self.width * self.height;
        for (i, &m) in mask.bits().iter().enumerate() {
            if m {
                for (c, v) in color.iter().enumerate() {
                    self.data[c * n + i] = *v;
                }
            }
        }
    }

    /// Zeroes every pixel inside `mask` (RGB pre-masking).
    pub fn zero_inside(&self, mask: &Mask) -> Image {
        let mut out = self.clone();
        out.fill_masked(mask, [0.0; 3]);
        out
    }

    /// Area-average downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Schema(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h);
        let inv = 1.0 / (factor * factor) as f64;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(c, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.set(c, y, x, acc * inv);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Image::downsample`]: spreads each coarse gradient evenly over its block.
    pub fn downsample_backward(grad: &Image, factor: usize) -> Image {
        let mut out = Image::new(grad.width * factor, grad.height * factor);
        let inv = 1.0 / (factor * factor) as f64;
        for c in 0..3 {
            for y in 0..out.height {
                for x in 0..out.width {
                    out.set(c, y, x, grad.get(c, y / factor, x / factor) * inv);
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::input(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
            }
        }
        Ok(out)
    }

    /// Writes an 8-bit PNG, clamping samples to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.get(c, y as usize, x as usize).clamp(0.0, 1.0);
                p.0[c] = (v * 255.0).round() as u8;
            }
        }
        buf.save(path)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Schema(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_canvas(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(
            self.same_canvas(other),
            "mask canvas mismatch: {}x{} vs {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    /// Set difference `self − other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Downsamples by `factor`; a coarse cell is set when any covered pixel is set
    /// (area average thresholded at > 0).
    pub fn downsample_any(&self, factor: usize) -> Mask {
        let (w, h) = (self.width.div_ceil(factor), self.height.div_ceil(factor));
        let mut out = Mask::empty(w, h);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        buf.save(path)?;
        Ok(())
    }
}

/// A single-channel real grid (noise maps, feature planes).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Schema(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_backward_is_adjoint() {
        let mut a = Image::new(8, 8);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut g = Image::new(4, 4);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.11).cos();
        }
        let lhs: f64 = a
            .downsample(2)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(x, y)| x * y)
            .sum();
        let rhs: f64 = Image::downsample_backward(&g, 2)
            .data()
            .iter()
            .zip(a.data())
            .map(|(x, y)| x * y)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn mask_downsample_any_counts_partial_cover() {
        let mut m = Mask::empty(4, 4);
        m.set(3, 0, true);
        let d = m.downsample_any(2);
        assert!(d.get(1, 0));
        assert_eq!(d.count(), 1);
    }

    #[test]
    fn set_algebra() {
        let a = Mask::from_fn(3, 1, |_, x| x < 2);
        let b = Mask::from_fn(3, 1, |_, x| x > 0);
        assert_eq!(a.minus(&b).bits(), &[true, false, false]);
        assert_eq!(a.intersect(&b).count(), 1);
        assert_eq!(a.union(&b).count(), 3);
        assert!(a.intersect(&b).is_subset_of(&a));
    }
}
