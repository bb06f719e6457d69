//! Grayscale images, the 2:1 Gaussian pyramid operator and patch operators.
//!
//! Pixels are `f64` intensities, nominally in `[0, 1]`. Intermediate results
//! may leave that range; clamping only happens when exporting to 8-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "pixel buffer has {} values, expected {}x{}={}",
                pixels.len(),
                width,
                height,
                width * height
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("non-finite pixel at index {bad}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image must be at least 1x1");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image must be at least 1x1");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Builds an image from 8-bit samples mapped by `v / 255`.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// 8-bit export: `round(255 * clamp(v, 0, 1))`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel lookup with replicate padding outside the support.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[cy * self.width + cx]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a * self + b * other`, for images of equal size.
    pub fn axpby(&self, a: f64, other: &Image, b: f64) -> Result<Image> {
        check_same_dims(self, other)?;
        Ok(Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn squared_distance(&self, other: &Image) -> Result<f64> {
        check_same_dims(self, other)?;
        Ok(squared_distance(&self.pixels, &other.pixels))
    }

    /// Zero-pads the image so that it is centered in a `width x height` canvas.
    pub fn pad_centered(&self, width: usize, height: usize) -> Result<Image> {
        if width < self.width || height < self.height {
            return Err(Error::Dimension(format!(
                "cannot pad {}x{} into {}x{}",
                self.width, self.height, width, height
            )));
        }
        let ox = (width - self.width) / 2;
        let oy = (height - self.height) / 2;
        let mut out = Image::zeros(width, height);
        for y in 0..self.height {
            let src = &self.pixels[y * self.width..(y + 1) * self.width];
            let start = (y + oy) * width + ox;
            out.pixels[start..start + self.width].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Sub-image `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Bounds(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }
}

pub(crate) fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Top-left corner of a square patch inside one pyramid layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchLocation {
    pub x: usize,
    pub y: usize,
    pub layer: usize,
}

impl PatchLocation {
    pub fn new(x: usize, y: usize, layer: usize) -> Self {
        Self { x, y, layer }
    }

    /// The co-located corner one level coarser (`floor(x/2), floor(y/2)`).
    pub fn halved(&self) -> PatchLocation {
        PatchLocation {
            x: self.x / 2,
            y: self.y / 2,
            layer: self.layer + 1,
        }
    }

    pub fn fits(&self, side: usize, width: usize, height: usize) -> bool {
        self.x + side <= width && self.y + side <= height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    values: Vec<f64>,
}

impl Patch {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if side == 0 || values.len() != side * side {
            return Err(Error::Dimension(format!(
                "patch of side {side} needs {} values, got {}",
                side * side,
                values.len()
            )));
        }
        Ok(Self { side, values })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            values: vec![0.0; side * side],
        }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn squared_distance(&self, other: &Patch) -> f64 {
        squared_distance(&self.values, &other.values)
    }
}

fn check_patch_bounds(width: usize, height: usize, loc: PatchLocation, side: usize) -> Result<()> {
    if side == 0 || !loc.fits(side, width, height) {
        return Err(Error::Bounds(format!(
            "patch of side {side} at ({}, {}) does not fit in {width}x{height}",
            loc.x, loc.y
        )));
    }
    Ok(())
}

/// `R_i X`: the `side x side` block at `loc`, row-major.
pub fn extract_patch(img: &Image, loc: PatchLocation, side: usize) -> Result<Patch> {
    check_patch_bounds(img.width, img.height, loc, side)?;
    let mut values = Vec::with_capacity(side * side);
    for row in 0..side {
        let start = (loc.y + row) * img.width + loc.x;
        values.extend_from_slice(&img.pixels[start..start + side]);
    }
    Ok(Patch { side, values })
}

/// Writes `patch` into `img` at `loc`, overwriting.
pub fn insert_patch(img: &mut Image, patch: &Patch, loc: PatchLocation) -> Result<()> {
    let side = patch.side;
    check_patch_bounds(img.width, img.height, loc, side)?;
    for row in 0..side {
        let start = (loc.y + row) * img.width + loc.x;
        img.pixels[start..start + side].copy_from_slice(&patch.values[row * side..(row + 1) * side]);
    }
    Ok(())
}

/// Running sums for `sum_i R_i^T p_i` together with the diagonal of
/// `sum_i R_i^T R_i` (per-pixel patch counts).
#[derive(Debug, Clone)]
pub struct PatchAccumulator {
    width: usize,
    height: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl PatchAccumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            sums: vec![0.0; width * height],
            counts: vec![0; width * height],
        }
    }

    pub fn add(&mut self, patch: &Patch, loc: PatchLocation) -> Result<()> {
        accumulate_patch(&mut self.sums, &mut self.counts, self.width, self.height, patch, loc)
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Trace of `sum_i R_i^T R_i`.
    pub fn trace(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Per-pixel average; pixels no patch touched take their value from `fallback`.
    pub fn average(&self, fallback: &Image) -> Result<Image> {
        if fallback.dims() != (self.width, self.height) {
            return Err(Error::Dimension("fallback image size mismatch".into()));
        }
        let pixels = self
            .sums
            .iter()
            .zip(&self.counts)
            .zip(fallback.pixels())
            .map(|((&s, &c), &f)| if c > 0 { s / f64::from(c) } else { f })
            .collect();
        Image::new(self.width, self.height, pixels)
    }

    pub fn merge(&mut self, other: &PatchAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Adds `patch` into `canvas` at `loc` and bumps the matching `counts`.
pub fn accumulate_patch(
    canvas: &mut [f64],
    counts: &mut [u32],
    width: usize,
    height: usize,
    patch: &Patch,
    loc: PatchLocation,
) -> Result<()> {
    if canvas.len() != width * height || counts.len() != width * height {
        return Err(Error::Dimension("accumulator size mismatch".into()));
    }
    let side = patch.side;
    check_patch_bounds(width, height, loc, side)?;
    for row in 0..side {
        let start = (loc.y + row) * width + loc.x;
        let src = &patch.values[row * side..(row + 1) * side];
        for (k, v) in src.iter().enumerate() {
            canvas[start + k] += v;
            counts[start + k] += 1;
        }
    }
    Ok(())
}

/// 1-D taps of the 3-tap sigma=1 Gaussian, normalized to sum 1.
pub fn gaussian_taps() -> [f64; 3] {
    let side = (-0.5f64).exp();
    let total = 1.0 + 2.0 * side;
    [side / total, 1.0 / total, side / total]
}

/// The 3x3 blur kernel, row-major (separable outer product of [`gaussian_taps`]).
pub fn gaussian_kernel() -> [f64; 9] {
    let t = gaussian_taps();
    let mut k = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            k[r * 3 + c] = t[r] * t[c];
        }
    }
    k
}

fn require_even(img: &Image) -> Result<()> {
    if !img.width.is_multiple_of(2) || !img.height.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "downsampling needs even dimensions, got {}x{}",
            img.width, img.height
        )));
    }
    Ok(())
}

/// `H`: 3x3 Gaussian blur (replicate border) followed by keeping even samples.
pub fn downsample(img: &Image) -> Result<Image> {
    require_even(img)?;
    let k = gaussian_kernel();
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Vec::with_capacity(w * h);
    for oy in 0..h {
        for ox in 0..w {
            let (cx, cy) = (2 * ox as isize, 2 * oy as isize);
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    acc += k[((dy + 1) * 3 + dx + 1) as usize] * img.get_clamped(cx + dx, cy + dy);
                }
            }
            out.push(acc);
        }
    }
    Image::new(w, h, out)
}

/// `H^T`: exact adjoint of [`downsample`], mapping a `w x h` image back to `2w x 2h`.
pub fn downsample_adjoint(low: &Image) -> Image {
    let k = gaussian_kernel();
    let (w, h) = (low.width * 2, low.height * 2);
    let mut out = vec![0.0; w * h];
    for oy in 0..low.height {
        for ox in 0..low.width {
            let v = low.get(ox, oy);
            let (cx, cy) = (2 * ox as isize, 2 * oy as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let sx = (cx + dx).clamp(0, w as isize - 1) as usize;
                    let sy = (cy + dy).clamp(0, h as isize - 1) as usize;
                    out[sy * w + sx] += k[((dy + 1) * 3 + dx + 1) as usize] * v;
                }
            }
        }
    }
    Image {
        width: w,
        height: h,
        pixels: out,
    }
}

/// Diagonal of `H^T H` for a `width x height` high-resolution grid.
pub fn downsample_gram_diagonal(width: usize, height: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let mut diag = vec![0.0; width * height];
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(9);
    for oy in 0..height / 2 {
        for ox in 0..width / 2 {
            taps.clear();
            let (cx, cy) = (2 * ox as isize, 2 * oy as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let sx = (cx + dx).clamp(0, width as isize - 1) as usize;
                    let sy = (cy + dy).clamp(0, height as isize - 1) as usize;
                    let idx = sy * width + sx;
                    let wgt = k[((dy + 1) * 3 + dx + 1) as usize];
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += wgt,
                        None => taps.push((idx, wgt)),
                    }
                }
            }
            for &(idx, wgt) in &taps {
                diag[idx] += wgt * wgt;
            }
        }
    }
    diag
}

/// Levels `V^0 .. V^depth`, `V^0` being the input.
pub fn build_pyramid(img: &Image, depth: usize) -> Result<Vec<Image>> {
    let factor = 1usize
        .checked_shl(depth as u32)
        .ok_or_else(|| Error::Dimension(format!("pyramid depth {depth} too large")))?;
    if !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(Error::Dimension(format!(
            "{}x{} is not divisible by 2^{depth}",
            img.width, img.height
        )));
    }
    let mut levels = Vec::with_capacity(depth + 1);
    levels.push(img.clone());
    for l in 0..depth {
        let next = downsample(&levels[l])?;
        levels.push(next);
    }
    Ok(levels)
}

/// 2x bilinear upscale with half-pixel alignment and replicate border.
pub fn bilinear_upscale2x(img: &Image) -> Image {
    let (w, h) = (img.width * 2, img.height * 2);
    Image::from_fn(w, h, |x, y| {
        let sx = (x as f64 + 0.5) / 2.0 - 0.5;
        let sy = (y as f64 + 0.5) / 2.0 - 0.5;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = (1.0 - fx) * img.get_clamped(x0, y0) + fx * img.get_clamped(x0 + 1, y0);
        let bottom = (1.0 - fx) * img.get_clamped(x0, y0 + 1) + fx * img.get_clamped(x0 + 1, y0 + 1);
        (1.0 - fy) * top + fy * bottom
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| (y * w + x) as f64)
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(Image::new(0, 3, vec![]), Err(Error::Dimension(_))));
        assert!(matches!(Image::new(2, 2, vec![0.0; 3]), Err(Error::Dimension(_))));
        assert!(Image::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn kernel_sums_to_one() {
        let s: f64 = gaussian_kernel().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn downsample_constant_2x2() {
        let out = downsample(&Image::filled(2, 2, 0.37)).unwrap();
        assert_eq!(out.dims(), (1, 1));
        assert!((out.get(0, 0) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn downsample_impulse_at_corner() {
        // Replicate padding folds the (-1,-1), (-1,0), (0,-1) taps onto the
        // corner pixel, so the corner output collects (a + b)^2 where a, b are
        // the side and center 1-D taps.
        let mut img = Image::zeros(4, 4);
        img.set(0, 0, 1.0);
        let out = downsample(&img).unwrap();
        let e = (-0.5f64).exp();
        let a = e / (1.0 + 2.0 * e);
        let b = 1.0 / (1.0 + 2.0 * e);
        let expected = (a + b) * (a + b);
        assert!((out.get(0, 0) - expected).abs() < 1e-15);
        assert!((expected - 0.526_976_37).abs() < 1e-7);
        assert_eq!(out.get(1, 0), 0.0);
        assert_eq!(out.get(0, 1), 0.0);
        assert_eq!(out.get(1, 1), 0.0);
    }

    #[test]
    fn downsample_odd_fails() {
        assert!(matches!(downsample(&Image::zeros(3, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn pyramid_sizes() {
        let levels = build_pyramid(&ramp(32, 32), 3).unwrap();
        let sizes: Vec<_> = levels.iter().map(|l| l.width()).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
        assert_eq!(build_pyramid(&ramp(6, 6), 0).unwrap(), vec![ramp(6, 6)]);
        assert!(build_pyramid(&ramp(12, 12), 3).is_err());
        for l in build_pyramid(&Image::filled(8, 8, 0.2), 2).unwrap() {
            assert!(l.pixels().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn extract_examples() {
        let img = ramp(4, 4);
        let p = extract_patch(&img, PatchLocation::new(1, 1, 0), 2).unwrap();
        assert_eq!(p.values(), &[5.0, 6.0, 9.0, 10.0]);
        let whole = extract_patch(&img, PatchLocation::new(0, 0, 0), 4).unwrap();
        assert_eq!(whole.values(), img.pixels());
        assert!(matches!(
            extract_patch(&img, PatchLocation::new(3, 0, 0), 2),
            Err(Error::Bounds(_))
        ));
        let mut copy = img.clone();
        insert_patch(&mut copy, &p, PatchLocation::new(1, 1, 0)).unwrap();
        assert_eq!(copy, img);
    }

    #[test]
    fn accumulate_examples() {
        let full = Patch::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut acc = PatchAccumulator::new(2, 2);
        acc.add(&full, PatchLocation::new(0, 0, 0)).unwrap();
        assert_eq!(acc.counts(), &[1, 1, 1, 1]);
        acc.add(&full, PatchLocation::new(0, 0, 0)).unwrap();
        assert_eq!(acc.counts(), &[2, 2, 2, 2]);
        let avg = acc.average(&Image::zeros(2, 2)).unwrap();
        assert_eq!(avg.pixels(), full.values());

        // two 2x2 patches overlapping by one column on a 3x2 canvas
        let mut acc = PatchAccumulator::new(3, 2);
        acc.add(&Patch::new(2, vec![1.0; 4]).unwrap(), PatchLocation::new(0, 0, 0)).unwrap();
        acc.add(&Patch::new(2, vec![3.0; 4]).unwrap(), PatchLocation::new(1, 0, 0)).unwrap();
        let avg = acc.average(&Image::zeros(3, 2)).unwrap();
        assert_eq!(avg.pixels(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(acc.add(&full, PatchLocation::new(2, 0, 0)).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let x = Image::from_fn(8, 6, |x, y| ((x * 7 + y * 3) % 5) as f64 - 1.3);
        let y = Image::from_fn(4, 3, |x, y| ((x + 2 * y) % 3) as f64 + 0.25);
        let hx = downsample(&x).unwrap();
        let hty = downsample_adjoint(&y);
        let lhs: f64 = hx.pixels().iter().zip(y.pixels()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.pixels().iter().zip(hty.pixels()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn gram_diagonal_matches_columns() {
        let (w, h) = (6, 4);
        let diag = downsample_gram_diagonal(w, h);
        for p in 0..w * h {
            let mut e = Image::zeros(w, h);
            e.pixels_mut()[p] = 1.0;
            let col = downsample(&e).unwrap();
            let norm2: f64 = col.pixels().iter().map(|v| v * v).sum();
            assert!((diag[p] - norm2).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_constant_and_range() {
        let up = bilinear_upscale2x(&Image::filled(3, 2, 0.6));
        assert_eq!(up.dims(), (6, 4));
        assert!(up.pixels().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        let step = Image::from_fn(2, 1, |x, _| x as f64);
        let up = bilinear_upscale2x(&step);
        assert_eq!(up.pixels()[..4], [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn pad_centered_places_content() {
        let img = Image::filled(28, 28, 1.0);
        let padded = img.pad_centered(32, 32).unwrap();
        assert_eq!(padded.get(1, 1), 0.0);
        assert_eq!(padded.get(2, 2), 1.0);
        assert_eq!(padded.get(29, 29), 1.0);
        assert_eq!(padded.get(30, 30), 0.0);
    }

    #[test]
    fn byte_mapping() {
        let img = Image::new(3, 1, vec![-0.2, 0.5, 1.7]).unwrap();
        assert_eq!(img.to_bytes(), vec![0, 128, 255]);
        let back = Image::from_bytes(3, 1, &[0, 51, 255]).unwrap();
        assert_eq!(back.pixels(), &[0.0, 0.2, 1.0]);
    }
}
