//! Scoring generated images against a training corpus: Parzen
//! log-likelihood, originality and spread, plus the rank-aware LL variant.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{PatchDictionary, TopK};
use crate::epll::location_set;
use crate::error::{Error, Result};
use crate::image::{squared_distance, Image, Patch, PatchLocation};
use crate::provenance::config_hash;

/// `1 / sqrt(2 pi)`: the width at which `(2 pi sigma^2)^(d/2) = 1` for every `d`.
pub fn default_sigma() -> f64 {
    1.0 / (2.0 * PI).sqrt()
}

/// Which layer-0 locations enter the image log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlGrid {
    /// Every location, stride 1.
    FullyOverlapping,
    /// The synthesis grid: stride `side - overlap`, shifted by `offset`.
    Stride { overlap: usize, offset: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlConfig {
    pub sigma: f64,
    pub patch_side: usize,
    pub grid: LlGrid,
    /// Sum over only the `k` HR-nearest dictionary patches when set.
    pub shortlist: Option<usize>,
}

impl Default for LlConfig {
    fn default() -> Self {
        Self {
            sigma: default_sigma(),
            patch_side: 6,
            grid: LlGrid::Stride {
                overlap: 2,
                offset: (0, 0),
            },
            shortlist: None,
        }
    }
}

impl LlConfig {
    /// Layer-0 patch size and grid of a synthesis schedule.
    pub fn for_schedule(schedule: &crate::synthesis::SynthesisSchedule) -> Self {
        Self {
            sigma: default_sigma(),
            patch_side: schedule.patch_side,
            grid: LlGrid::Stride {
                overlap: schedule.layers.first().map_or(0, |l| l.overlap),
                offset: (0, 0),
            },
            shortlist: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.patch_side == 0 {
            return Err(Error::config("patch side must be >= 1"));
        }
        if self.shortlist == Some(0) {
            return Err(Error::config("shortlist size must be >= 1"));
        }
        Ok(())
    }

    pub fn locations(&self, width: usize, height: usize) -> Result<Vec<PatchLocation>> {
        let n = self.patch_side;
        match self.grid {
            LlGrid::FullyOverlapping => location_set(width, height, 0, n, n - 1, (0, 0)),
            LlGrid::Stride { overlap, offset } => location_set(width, height, 0, n, overlap, offset),
        }
    }
}

/// `-(d/2) ln(2 pi sigma^2)`.
fn log_norm(dim: usize, sigma: f64) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * sigma * sigma).ln()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Parzen log-density from squared distances to every kernel center, with
/// `total` centers in the full set (`total >= sq_distances.len()`).
pub fn log_density_from_distances(sq_distances: &[f64], dim: usize, sigma: f64, total: usize) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let a: Vec<f64> = sq_distances.iter().map(|d| -d * inv).collect();
    log_sum_exp(&a) - (total as f64).ln() + log_norm(dim, sigma)
}

/// `log (1/|D|) sum_j N(x; y_j, sigma^2 I)`.
pub fn patch_log_density(x: &Patch, dict: &[Patch], sigma: f64) -> Result<f64> {
    if dict.is_empty() {
        return Err(Error::config("empty patch set"));
    }
    if dict.iter().any(|y| y.side() != x.side()) {
        return Err(Error::Dimension("patch sides differ".into()));
    }
    let d: Vec<f64> = dict.iter().map(|y| x.squared_distance(y)).collect();
    Ok(log_density_from_distances(&d, x.values().len(), sigma, dict.len()))
}

/// Same density over the HR patches of a dictionary, optionally restricted
/// to the `shortlist` nearest (still normalized by the full size).
pub fn dictionary_log_density(x: &Patch, dict: &PatchDictionary, sigma: f64, shortlist: Option<usize>) -> Result<f64> {
    if dict.is_empty() {
        return Err(Error::config("empty dictionary"));
    }
    let n = dict.bank().patch_side();
    if x.side() != n {
        return Err(Error::Dimension(format!("patch side {} vs dictionary side {n}", x.side())));
    }
    let d: Vec<f64> = match shortlist {
        None => (0..dict.len()).map(|j| dict.hr_distance(j, x.values())).collect(),
        Some(k) => {
            let mut top = TopK::new(k);
            for j in 0..dict.len() {
                top.push(dict.hr_distance(j, x.values()), j);
            }
            top.into_sorted().iter().map(|c| c.distance).collect()
        }
    };
    Ok(log_density_from_distances(&d, n * n, sigma, dict.len()))
}

fn finish_ll(sum_log_p: f64, locations: usize, side: usize, pixels: usize) -> f64 {
    // Tr(sum R_i^T R_i) = |I| n^2
    pixels as f64 * sum_log_p / (locations * side * side) as f64
}

/// `LL(X) = |X| * sum_i log P_i(R_i X) / Tr(sum_i R_i^T R_i)` over the grid of
/// `config`, with `P_i` the Parzen density of dictionary `i`.
pub fn image_log_likelihood(
    x: &Image,
    dicts: &BTreeMap<PatchLocation, PatchDictionary>,
    config: &LlConfig,
) -> Result<f64> {
    config.validate()?;
    let locs = config.locations(x.width(), x.height())?;
    let mut sum = 0.0;
    for loc in &locs {
        let dict = dicts.get(loc).ok_or_else(|| {
            Error::config(format!("no dictionary for location ({}, {})", loc.x, loc.y))
        })?;
        let p = crate::image::extract_patch(x, *loc, config.patch_side)?;
        sum += dictionary_log_density(&p, dict, config.sigma, config.shortlist)?;
    }
    Ok(finish_ll(sum, locs.len(), config.patch_side, x.len()))
}

/// Window-0 layer-0 dictionaries on the grid of `config`, the model behind
/// [`image_log_likelihood`].
pub fn ll_dictionaries(training: &[Image], config: &LlConfig) -> Result<BTreeMap<PatchLocation, PatchDictionary>> {
    config.validate()?;
    let first = training.first().ok_or_else(|| Error::config("empty training set"))?;
    let pyramids = training
        .iter()
        .map(|t| crate::image::build_pyramid(t, 1))
        .collect::<Result<Vec<_>>>()?;
    let locs = config.locations(first.width(), first.height())?;
    crate::dictionary::build_dictionaries_from_pyramids(&pyramids, 0, &locs, config.patch_side, 0, crate::dictionary::ContextSpec::none())
}

/// Window-0 Parzen model over an aligned training stack. Patch distances at
/// all locations come from one summed-area table per training image, which
/// makes fully-overlapping grids affordable.
#[derive(Debug, Clone)]
pub struct ParzenStack {
    width: usize,
    height: usize,
    count: usize,
    data: Vec<f64>,
}

impl ParzenStack {
    pub fn new(images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::config("empty training set"))?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.dims() != (w, h) {
                return Err(Error::Dimension("training images differ in size".into()));
            }
            data.extend_from_slice(img.pixels());
        }
        Ok(Self {
            width: w,
            height: h,
            count: images.len(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// `log P_i(R_i X)` for each of `locations`.
    pub fn log_densities(&self, x: &Image, locations: &[PatchLocation], side: usize, sigma: f64) -> Result<Vec<f64>> {
        let (w, h) = (self.width, self.height);
        if x.dims() != (w, h) {
            return Err(Error::Dimension(format!(
                "image is {}x{}, training stack is {w}x{h}",
                x.width(),
                x.height()
            )));
        }
        if let Some(bad) = locations.iter().find(|l| !l.fits(side, w, h)) {
            return Err(Error::Bounds(format!("location ({}, {}) exceeds the image", bad.x, bad.y)));
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        let sw = w + 1;
        let mut sat = vec![0.0; sw * (h + 1)];
        let mut max = vec![f64::NEG_INFINITY; locations.len()];
        let mut sum = vec![0.0; locations.len()];
        let xp = x.pixels();
        for img in self.data.chunks_exact(w * h) {
            for y in 0..h {
                let mut row = 0.0;
                for xx in 0..w {
                    let d = img[y * w + xx] - xp[y * w + xx];
                    row += d * d;
                    sat[(y + 1) * sw + xx + 1] = sat[y * sw + xx + 1] + row;
                }
            }
            for (t, loc) in locations.iter().enumerate() {
                let (x0, y0, x1, y1) = (loc.x, loc.y, loc.x + side, loc.y + side);
                let d = sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0] + sat[y0 * sw + x0];
                // rounding in the table can leave tiny negatives
                let a = -d.max(0.0) * inv;
                if a <= max[t] {
                    sum[t] += (a - max[t]).exp();
                } else {
                    sum[t] = sum[t] * (max[t] - a).exp() + 1.0;
                    max[t] = a;
                }
            }
        }
        let offset = -(self.count as f64).ln() + log_norm(side * side, sigma);
        Ok(max.iter().zip(&sum).map(|(m, s)| m + s.ln() + offset).collect())
    }

    pub fn image_log_likelihood(&self, x: &Image, config: &LlConfig) -> Result<f64> {
        config.validate()?;
        if config.shortlist.is_some() {
            return Err(Error::config("the training-stack evaluator is exact only; use dictionaries for shortlist mode"));
        }
        let locs = config.locations(x.width(), x.height())?;
        let lp = self.log_densities(x, &locs, config.patch_side, config.sigma)?;
        Ok(finish_ll(lp.iter().sum(), locs.len(), config.patch_side, x.len()))
    }
}

/// Largest per-image gap between shortlist and exact LL over `images`.
pub fn shortlist_calibration(
    images: &[Image],
    dicts: &BTreeMap<PatchLocation, PatchDictionary>,
    config: &LlConfig,
) -> Result<f64> {
    let exact = LlConfig {
        shortlist: None,
        ..*config
    };
    let gaps: Result<Vec<f64>> = images
        .par_iter()
        .map(|x| Ok((image_log_likelihood(x, dicts, config)? - image_log_likelihood(x, dicts, &exact)?).abs()))
        .collect();
    Ok(gaps?.into_iter().fold(0.0, f64::max))
}

/// Seed-scale LL: each seed is one whole-image patch under the Parzen
/// density of the training seeds.
pub fn seed_log_likelihood(seed: &Image, training_seeds: &[Image], sigma: f64) -> Result<f64> {
    if training_seeds.is_empty() {
        return Err(Error::config("no training seeds"));
    }
    let mut d = Vec::with_capacity(training_seeds.len());
    for t in training_seeds {
        d.push(seed.squared_distance(t)?);
    }
    Ok(log_density_from_distances(&d, seed.len(), sigma, training_seeds.len()))
}

/// Pixels that take part in image-to-image distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    keep: Vec<bool>,
}

impl PixelMask {
    pub fn all(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            keep: vec![true; width * height],
        }
    }

    /// Only the centered `cw x ch` region.
    pub fn central(width: usize, height: usize, cw: usize, ch: usize) -> Result<Self> {
        if cw > width || ch > height {
            return Err(Error::config(format!("central region {cw}x{ch} exceeds {width}x{height}")));
        }
        let (x0, y0) = ((width - cw) / 2, (height - ch) / 2);
        let keep = (0..width * height)
            .map(|p| {
                let (x, y) = (p % width, p / width);
                x >= x0 && x < x0 + cw && y >= y0 && y < y0 + ch
            })
            .collect();
        Ok(Self { width, height, keep })
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((x, y), &k) in a.iter().zip(b).zip(&self.keep) {
            if k {
                acc += (x - y) * (x - y);
            }
        }
        acc.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Originality {
    pub ratio: f64,
    pub d_g: f64,
    pub d_t: f64,
    /// Index of the nearest training image.
    pub nearest: usize,
}

/// Training set prepared for originality queries. The nearest-neighbor
/// distance of each training image within the set is computed once, on demand.
#[derive(Debug)]
pub struct OriginalityIndex {
    width: usize,
    height: usize,
    data: Vec<f64>,
    mask: PixelMask,
    d_t: Vec<OnceLock<f64>>,
}

impl OriginalityIndex {
    pub fn new(training: &[Image], mask: Option<PixelMask>) -> Result<Self> {
        if training.len() < 2 {
            return Err(Error::config("originality needs at least 2 training images"));
        }
        let (w, h) = training[0].dims();
        let mask = mask.unwrap_or_else(|| PixelMask::all(w, h));
        if (mask.width, mask.height) != (w, h) {
            return Err(Error::Dimension("mask size differs from the training images".into()));
        }
        let mut data = Vec::with_capacity(training.len() * w * h);
        for t in training {
            if t.dims() != (w, h) {
                return Err(Error::Dimension("training images differ in size".into()));
            }
            data.extend_from_slice(t.pixels());
        }
        Ok(Self {
            width: w,
            height: h,
            data,
            mask,
            d_t: (0..training.len()).map(|_| OnceLock::new()).collect(),
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        let len = self.width * self.height;
        &self.data[i * len..(i + 1) * len]
    }

    fn nearest(&self, x: &[f64], skip: Option<usize>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..self.d_t.len() {
            if Some(i) == skip {
                continue;
            }
            let d = self.mask.distance(x, self.row(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn score(&self, x: &Image) -> Result<Originality> {
        if x.dims() != (self.width, self.height) {
            return Err(Error::Dimension("image size differs from the training images".into()));
        }
        let (nearest, d_g) = self.nearest(x.pixels(), None);
        let d_t = *self.d_t[nearest].get_or_init(|| self.nearest(self.row(nearest), Some(nearest)).1);
        let ratio = if d_g == 0.0 { 0.0 } else { d_g / d_t };
        Ok(Originality {
            ratio,
            d_g,
            d_t,
            nearest,
        })
    }
}

/// `d_G / d_T` of `x` against `training`.
pub fn originality(x: &Image, training: &[Image], mask: Option<PixelMask>) -> Result<Originality> {
    OriginalityIndex::new(training, mask)?.score(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadConfig {
    pub perplexity: f64,
    /// Relative tolerance on the achieved perplexity.
    pub tolerance: f64,
    pub max_steps: usize,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            tolerance: 1e-6,
            max_steps: 200,
        }
    }
}

/// Conditional neighbor probabilities `p_{j|i}` for squared distances `d`
/// (the point itself excluded), with the Gaussian width found by bisection
/// on `log sigma` in `[1e-8, 1e8]` so that `exp(H) = perplexity`.
/// Returns the probabilities and `sigma`.
pub fn calibrate_conditional(d: &[f64], config: &SpreadConfig) -> Result<(Vec<f64>, f64)> {
    if !(config.perplexity >= 1.0) || config.perplexity >= d.len() as f64 {
        return Err(Error::config(format!(
            "perplexity {} must lie in [1, {})",
            config.perplexity,
            d.len()
        )));
    }
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let eval = |log_sigma: f64| -> (Vec<f64>, f64) {
        let s = log_sigma.exp();
        let beta = 1.0 / (2.0 * s * s);
        let mut p: Vec<f64> = d.iter().map(|&v| (-(v - dmin) * beta).exp()).collect();
        let z: f64 = p.iter().sum();
        let mut h = 0.0;
        for v in &mut p {
            *v /= z;
            if *v > 0.0 {
                h -= *v * v.ln();
            }
        }
        (p, h.exp())
    };
    let (mut lo, mut hi) = (1e-8f64.ln(), 1e8f64.ln());
    let target = config.perplexity;
    let mut last = f64::NAN;
    for _ in 0..config.max_steps {
        let mid = 0.5 * (lo + hi);
        let (p, perp) = eval(mid);
        last = perp;
        if (perp - target).abs() <= config.tolerance * target {
            return Ok((p, mid.exp()));
        }
        // perplexity grows with sigma
        if perp < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical {
        message: format!("perplexity calibration did not reach {target}"),
        residual: (last - target).abs() / target,
    })
}

pub fn pairwise_squared_distances(images: &[&Image]) -> Vec<f64> {
    let n = images.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        squared_distance(images[i].pixels(), images[j].pixels())
                    }
                })
                .collect()
        })
        .collect();
    rows.concat()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpreadReport {
    /// `Spread(i)` per training image; `None` where calibration failed.
    pub per_training: Vec<Option<f64>>,
    /// Mean `|Spread(i)|` over calibrated training images.
    pub aggregate: f64,
    pub failures: usize,
    /// Set when `|G| / |T|` falls outside `[0.5, 2]`.
    pub size_warning: bool,
}

/// Density ratio of generated vs training neighbors around each training image.
pub fn spread(training: &[Image], generated: &[Image], config: &SpreadConfig) -> Result<SpreadReport> {
    if training.is_empty() || generated.is_empty() {
        return Err(Error::config("spread needs non-empty training and generated sets"));
    }
    let nt = training.len();
    let all: Vec<&Image> = training.iter().chain(generated).collect();
    if all.iter().any(|i| i.dims() != all[0].dims()) {
        return Err(Error::Dimension("spread images differ in size".into()));
    }
    let n = all.len();
    let dist = pairwise_squared_distances(&all);
    let per: Vec<Option<f64>> = (0..nt)
        .into_par_iter()
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| row[j]).collect();
            let (p, _) = calibrate_conditional(&others, config).ok()?;
            let (mut g, mut t) = (0.0, 0.0);
            for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
                if j < nt {
                    t += p[k] * row[j];
                } else {
                    g += p[k] * row[j];
                }
            }
            Some((g / t).ln())
        })
        .collect();
    let ok: Vec<f64> = per.iter().flatten().copied().collect();
    let aggregate = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|v| v.abs()).sum::<f64>() / ok.len() as f64
    };
    let ratio = generated.len() as f64 / nt as f64;
    Ok(SpreadReport {
        failures: per.len() - ok.len(),
        per_training: per,
        aggregate,
        size_warning: !(0.5..=2.0).contains(&ratio),
    })
}

/// Writes `values` (row-major `rows x cols`) as little-endian f32 to
/// `<stem>.f32` with a JSON header in `<stem>.json`.
pub fn write_matrix(stem: &Path, values: &[f64], rows: usize, cols: usize, ids: &[String]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::Dimension(format!("{} values for a {rows}x{cols} matrix", values.len())));
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(stem.with_extension("f32"), bytes)?;
    let header = serde_json::json!({
        "rows": rows,
        "cols": cols,
        "dtype": "float32",
        "byte_order": "little",
        "layout": "row-major",
        "ids": ids,
    });
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Pairwise Euclidean distances between `images`, exported with [`write_matrix`].
pub fn export_distance_matrix(stem: &Path, images: &[Image], ids: &[String]) -> Result<()> {
    let refs: Vec<&Image> = images.iter().collect();
    let d: Vec<f64> = pairwise_squared_distances(&refs).iter().map(|v| v.sqrt()).collect();
    write_matrix(stem, &d, images.len(), images.len(), ids)
}

/// Neighborhood model for the per-center covariance of the rank-aware LL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankConfig {
    /// Covariance of center `y` uses its `neighbors` nearest dictionary patches.
    pub neighbors: usize,
    /// Perplexity that fixes the neighbor weights' width.
    pub perplexity: f64,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            neighbors: 30,
            perplexity: 10.0,
        }
    }
}

/// Terms this far below the leading one are dropped; each contributes
/// less than `exp(-50)` relative mass.
const PRUNE_MARGIN: f64 = 50.0;

/// Covariance eigenvalues per (location, center content). Centers that
/// repeat (flat background is common) are decomposed once.
#[derive(Debug, Default)]
pub struct EigenCache {
    map: HashMap<(PatchLocation, Vec<u64>), Vec<f64>>,
}

impl EigenCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Eigenvalues of `sum_z p_{z|y} (z - y)(z - y)^T` for center `center` of `patches`.
pub fn local_covariance_eigenvalues(patches: &[Vec<f64>], center: usize, config: &RankConfig) -> Result<Vec<f64>> {
    let y = &patches[center];
    let dim = y.len();
    let k = config.neighbors.min(patches.len() - 1);
    let mut top = TopK::new(k);
    for (j, z) in patches.iter().enumerate() {
        if j != center {
            top.push(squared_distance(y, z), j);
        }
    }
    let near = top.into_sorted();
    let d: Vec<f64> = near.iter().map(|c| c.distance).collect();
    // gaps this small are rounding noise; no width in the bisection range resolves them
    let ties = d.iter().take_while(|&&v| v - d[0] <= 1e-12).count();
    let p = if ties == d.len() || d.len() as f64 <= config.perplexity {
        // no width reaches the target; uniform is the closest
        vec![1.0 / d.len() as f64; d.len()]
    } else if ties as f64 >= config.perplexity {
        // the sigma -> 0 limit, uniform over the nearest ties, is the closest
        let mut p = vec![0.0; d.len()];
        p[..ties].fill(1.0 / ties as f64);
        p
    } else {
        let cfg = SpreadConfig {
            perplexity: config.perplexity,
            ..SpreadConfig::default()
        };
        calibrate_conditional(&d, &cfg)?.0
    };
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for (c, w) in near.iter().zip(&p) {
        let z = &patches[c.index];
        for r in 0..dim {
            let dr = z[r] - y[r];
            if dr == 0.0 {
                continue;
            }
            for s in 0..dim {
                cov[(r, s)] += w * dr * (z[s] - y[s]);
            }
        }
    }
    let eig = SymmetricEigen::try_new(cov, 1e-12, 10_000).ok_or_else(|| Error::Numerical {
        message: "covariance eigendecomposition failed".into(),
        residual: f64::NAN,
    })?;
    Ok(eig.eigenvalues.iter().copied().collect())
}

/// Parzen density where center `y_j` uses `(2 pi sigma^2)^(-d_j/2)` with
/// `d_j` the numerical rank (eigenvalues above `epsilon`) of its local covariance.
pub fn rank_aware_log_density(
    x: &Patch,
    patches: &[Vec<f64>],
    sigma: f64,
    epsilon: f64,
    config: &RankConfig,
    location: PatchLocation,
    cache: &mut EigenCache,
) -> Result<f64> {
    if patches.len() < 2 {
        return Err(Error::config("rank-aware density needs at least 2 patches"));
    }
    let dim = x.values().len();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let ln_norm = (2.0 * PI * sigma * sigma).ln();
    let a: Vec<f64> = patches.iter().map(|y| -squared_distance(x.values(), y) * inv).collect();
    // rank ranges over [0, dim]; bound each term before decomposing
    let (lo_shift, hi_shift) = {
        let full = -0.5 * dim as f64 * ln_norm;
        (full.min(0.0), full.max(0.0))
    };
    let best_lower = a.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v + lo_shift));
    let mut terms = Vec::new();
    for (j, &aj) in a.iter().enumerate() {
        if aj + hi_shift < best_lower - PRUNE_MARGIN {
            continue;
        }
        let key = (location, patches[j].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let eig = match cache.map.get(&key) {
            Some(e) => e,
            None => {
                let e = local_covariance_eigenvalues(patches, j, config)?;
                cache.map.entry(key).or_insert(e)
            }
        };
        let rank = eig.iter().filter(|&&v| v > epsilon).count();
        terms.push(aj - 0.5 * rank as f64 * ln_norm);
    }
    Ok(log_sum_exp(&terms) - (patches.len() as f64).ln())
}

/// Rank-aware image LL over the grid of `config`.
pub fn rank_aware_image_log_likelihood(
    x: &Image,
    dicts: &BTreeMap<PatchLocation, PatchDictionary>,
    config: &LlConfig,
    epsilon: f64,
    rank: &RankConfig,
    cache: &mut EigenCache,
) -> Result<f64> {
    config.validate()?;
    let locs = config.locations(x.width(), x.height())?;
    let mut sum = 0.0;
    for loc in &locs {
        let dict = dicts.get(loc).ok_or_else(|| {
            Error::config(format!("no dictionary for location ({}, {})", loc.x, loc.y))
        })?;
        let patches: Vec<Vec<f64>> = (0..dict.len()).map(|j| dict.hr_patch(j).into_values()).collect();
        let p = crate::image::extract_patch(x, *loc, config.patch_side)?;
        sum += rank_aware_log_density(&p, &patches, config.sigma, epsilon, rank, *loc, cache)?;
    }
    Ok(finish_ll(sum, locs.len(), config.patch_side, x.len()))
}

/// Mean rank-aware LL of `images` at each `(sigma, epsilon)` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub sigmas: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// `values[s][e]`
    pub values: Vec<Vec<f64>>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sigma", "epsilon", "mean_ll"]).map_err(csv_err)?;
        for (s, row) in self.sigmas.iter().zip(&self.values) {
            for (e, v) in self.epsilons.iter().zip(row) {
                w.write_record([s.to_string(), e.to_string(), v.to_string()]).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn ll_sweep(
    images: &[Image],
    dicts: &BTreeMap<PatchLocation, PatchDictionary>,
    base: &LlConfig,
    sigmas: &[f64],
    epsilons: &[f64],
    rank: &RankConfig,
) -> Result<SweepTable> {
    if sigmas.is_empty() || epsilons.is_empty() || images.is_empty() {
        return Err(Error::config("sweep grids and image set must be non-empty"));
    }
    let mut cache = EigenCache::new();
    let mut values = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let cfg = LlConfig {
            sigma,
            shortlist: None,
            ..*base
        };
        let mut row = Vec::with_capacity(epsilons.len());
        for &eps in epsilons {
            let mut total = 0.0;
            for x in images {
                total += rank_aware_image_log_likelihood(x, dicts, &cfg, eps, rank, &mut cache)?;
            }
            row.push(total / images.len() as f64);
        }
        values.push(row);
    }
    Ok(SweepTable {
        sigmas: sigmas.to_vec(),
        epsilons: epsilons.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub ll: f64,
    pub originality: f64,
    pub d_g: f64,
    pub d_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub training_id: String,
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_ll: f64,
    pub mean_originality: f64,
    pub spread: Option<f64>,
}

/// Scores in order of importance: LL, originality, spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub config_hash: String,
    pub per_image: Vec<ImageScore>,
    pub spread_per_training: Vec<SpreadRow>,
    pub aggregates: Aggregates,
}

/// Everything that determines a report's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessConfig {
    pub ll: LlConfig,
    pub spread: Option<SpreadConfig>,
    pub mask: Option<PixelMask>,
    /// Hash of the dictionaries or corpus scored against.
    pub corpus_hash: String,
}

impl ScoreReport {
    pub fn new(
        config: &AssessConfig,
        per_image: Vec<ImageScore>,
        spread_per_training: Vec<SpreadRow>,
    ) -> Result<Self> {
        let mut r = Self {
            config_hash: config_hash(config)?,
            per_image,
            spread_per_training,
            aggregates: Aggregates {
                mean_ll: f64::NAN,
                mean_originality: f64::NAN,
                spread: None,
            },
        };
        r.aggregates = r.recompute_aggregates();
        Ok(r)
    }

    pub fn recompute_aggregates(&self) -> Aggregates {
        let n = self.per_image.len() as f64;
        let spreads: Vec<f64> = self.spread_per_training.iter().filter_map(|r| r.spread).collect();
        Aggregates {
            mean_ll: self.per_image.iter().map(|s| s.ll).sum::<f64>() / n,
            mean_originality: self.per_image.iter().map(|s| s.originality).sum::<f64>() / n,
            spread: if spreads.is_empty() {
                None
            } else {
                Some(spreads.iter().map(|v| v.abs()).sum::<f64>() / spreads.len() as f64)
            },
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "ll", "originality", "d_g", "d_t"]).map_err(csv_err)?;
        for s in &self.per_image {
            w.write_record([
                s.id.clone(),
                s.ll.to_string(),
                s.originality.to_string(),
                s.d_g.to_string(),
                s.d_t.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dictionaries_from_pyramids, ContextSpec};
    use crate::image::build_pyramid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(rng: &mut ChaCha8Rng, side: usize) -> Patch {
        Patch::new(side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn self_match_is_zero_and_single_center_is_minus_pi_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_patch(&mut rng, 3);
        let s = default_sigma();
        assert!(patch_log_density(&y, std::slice::from_ref(&y), s).unwrap().abs() < 1e-12);
        let x = random_patch(&mut rng, 3);
        let d = x.squared_distance(&y);
        assert!((patch_log_density(&x, &[y], s).unwrap() + PI * d).abs() < 1e-10);
        assert!(patch_log_density(&x, &[], s).is_err());
    }

    #[test]
    fn matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dict: Vec<Patch> = (0..20).map(|_| random_patch(&mut rng, 2)).collect();
        let x = random_patch(&mut rng, 2);
        let sigma = 0.3;
        let mut total = 0.0;
        for y in &dict {
            let d: f64 = x.values().iter().zip(y.values()).map(|(a, b)| (a - b) * (a - b)).sum();
            total += (2.0 * PI * sigma * sigma).powf(-2.0) * (-d / (2.0 * sigma * sigma)).exp();
        }
        let naive = (total / 20.0).ln();
        assert!((patch_log_density(&x, &dict, sigma).unwrap() - naive).abs() < 1e-10);
    }

    fn stack(count: usize, size: usize, salt: u64) -> Vec<Image> {
        (0..count)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(salt + j as u64);
                Image::from_fn(size, size, |_, _| rng.random::<f64>() * 0.3)
            })
            .collect()
    }

    #[test]
    fn stack_and_dictionary_paths_agree() {
        let train = stack(15, 8, 0);
        let pyr: Vec<Vec<Image>> = train.iter().map(|t| build_pyramid(t, 1).unwrap()).collect();
        let x = stack(1, 8, 100).remove(0);
        for grid in [LlGrid::FullyOverlapping, LlGrid::Stride { overlap: 2, offset: (1, 0) }] {
            let cfg = LlConfig {
                sigma: 0.4,
                patch_side: 4,
                grid,
                shortlist: None,
            };
            let locs = cfg.locations(8, 8).unwrap();
            let dicts = build_dictionaries_from_pyramids(&pyr, 0, &locs, 4, 0, ContextSpec::none()).unwrap();
            let a = image_log_likelihood(&x, &dicts, &cfg).unwrap();
            let b = ParzenStack::new(&train).unwrap().image_log_likelihood(&x, &cfg).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            let short = LlConfig {
                shortlist: Some(15),
                ..cfg
            };
            assert!((image_log_likelihood(&x, &dicts, &short).unwrap() - a).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_location_is_config_error() {
        let cfg = LlConfig {
            patch_side: 4,
            ..LlConfig::default()
        };
        let r = image_log_likelihood(&Image::zeros(8, 8), &BTreeMap::new(), &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn training_member_beats_far_image() {
        let train = stack(10, 8, 7);
        let p = ParzenStack::new(&train).unwrap();
        let cfg = LlConfig {
            patch_side: 4,
            grid: LlGrid::FullyOverlapping,
            ..LlConfig::default()
        };
        let own = p.image_log_likelihood(&train[3], &cfg).unwrap();
        let far = p.image_log_likelihood(&Image::filled(8, 8, 1.0), &cfg).unwrap();
        assert!(own > far);
    }

    #[test]
    fn originality_three_points() {
        // 1-D images at 0, 1 and 3; probe at 2.5
        let t: Vec<Image> = [0.0, 1.0, 3.0].iter().map(|&v| Image::filled(1, 1, v)).collect();
        let o = originality(&Image::filled(1, 1, 2.5), &t, None).unwrap();
        assert_eq!(o.nearest, 2);
        assert!((o.d_g - 0.5).abs() < 1e-12);
        assert!((o.d_t - 2.0).abs() < 1e-12);
        assert!((o.ratio - 0.25).abs() < 1e-12);
        let member = originality(&t[1], &t, None).unwrap();
        assert_eq!(member.ratio, 0.0);
        assert!(originality(&t[0], &t[..1], None).is_err());
    }

    #[test]
    fn central_mask_ignores_border() {
        let m = PixelMask::central(4, 4, 2, 2).unwrap();
        assert_eq!(m.kept(), 4);
        let a = Image::zeros(4, 4);
        let mut b = Image::zeros(4, 4);
        b.set(0, 0, 1.0);
        let c = Image::filled(4, 4, 0.5);
        let o = originality(&b, &[a, c], Some(m)).unwrap();
        assert_eq!(o.d_g, 0.0);
    }

    #[test]
    fn calibration_hits_perplexity() {
        let d = [0.1, 0.5, 1.0, 2.0, 3.0, 7.0];
        let cfg = SpreadConfig {
            perplexity: 2.0,
            ..SpreadConfig::default()
        };
        let (p, _) = calibrate_conditional(&d, &cfg).unwrap();
        let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        assert!((h.exp() - 2.0).abs() <= 2e-6);
        assert!(calibrate_conditional(&d, &SpreadConfig { perplexity: 6.0, ..cfg }).is_err());
    }

    #[test]
    fn duplicate_set_has_zero_spread() {
        let t = stack(12, 3, 40);
        let r = spread(&t, &t.clone(), &SpreadConfig { perplexity: 5.0, ..SpreadConfig::default() }).unwrap();
        assert_eq!(r.failures, 0);
        assert!(r.aggregate <= 1e-9);
        assert!(!r.size_warning);
    }

    #[test]
    fn rank_identity_and_zero_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patches: Vec<Vec<f64>> = (0..12).map(|_| random_patch(&mut rng, 2).into_values()).collect();
        let x = random_patch(&mut rng, 2);
        let plain = patch_log_density(
            &x,
            &patches.iter().map(|v| Patch::new(2, v.clone()).unwrap()).collect::<Vec<_>>(),
            default_sigma(),
        )
        .unwrap();
        let cfg = RankConfig {
            neighbors: 6,
            perplexity: 3.0,
        };
        for eps in [0.0, 0.01, 1.0] {
            let mut cache = EigenCache::new();
            let r = rank_aware_log_density(&x, &patches, default_sigma(), eps, &cfg, PatchLocation::new(0, 0, 0), &mut cache)
                .unwrap();
            assert!((r - plain).abs() < 1e-12);
        }
        let same = vec![vec![0.2; 4]; 5];
        let y = Patch::new(2, vec![0.2; 4]).unwrap();
        let mut cache = EigenCache::new();
        for sigma in [0.1, 0.7] {
            let r = rank_aware_log_density(&y, &same, sigma, 1e-9, &cfg, PatchLocation::new(0, 0, 0), &mut cache).unwrap();
            assert!(r.abs() < 1e-12);
        }
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn tied_neighbors_below_target_perplexity() {
        // center plus 4 exact copies and 3 distinct patches: at perplexity 3
        // the weights collapse onto the copies, so the covariance is zero
        let mut patches = vec![vec![0.5; 4]; 5];
        patches.extend([vec![0.1, 0.2, 0.3, 0.4], vec![0.9; 4], vec![0.0, 1.0, 0.0, 1.0]]);
        let cfg = RankConfig {
            neighbors: 7,
            perplexity: 3.0,
        };
        let e = local_covariance_eigenvalues(&patches, 0, &cfg).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-15));
        // with fewer ties than the target the bisection runs and spreads mass
        let few = RankConfig {
            neighbors: 7,
            perplexity: 5.0,
        };
        let e = local_covariance_eigenvalues(&patches, 0, &few).unwrap();
        assert!(e.iter().any(|&v| v > 1e-6));
    }

    #[test]
    fn report_aggregates_recompute() {
        let cfg = AssessConfig {
            ll: LlConfig::default(),
            spread: None,
            mask: None,
            corpus_hash: "x".into(),
        };
        let rows = vec![
            ImageScore { id: "a".into(), ll: -1.0, originality: 1.0, d_g: 1.0, d_t: 1.0 },
            ImageScore { id: "b".into(), ll: -3.0, originality: 0.5, d_g: 1.0, d_t: 2.0 },
        ];
        let spread = vec![
            SpreadRow { training_id: "t0".into(), spread: Some(-0.5) },
            SpreadRow { training_id: "t1".into(), spread: Some(1.5) },
        ];
        let r = ScoreReport::new(&cfg, rows, spread).unwrap();
        assert_eq!(r.aggregates.mean_ll, -2.0);
        assert_eq!(r.aggregates.mean_originality, 0.75);
        assert_eq!(r.aggregates.spread, Some(1.0));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("id,ll,originality,d_g,d_t\na,-1,1,1,1\n"));
    }

    #[test]
    fn matrix_export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![Image::zeros(1, 2), Image::filled(1, 2, 1.0)];
        let stem = dir.path().join("d");
        export_distance_matrix(&stem, &imgs, &["a".into(), "b".into()]).unwrap();
        let bytes = std::fs::read(stem.with_extension("f32")).unwrap();
        assert_eq!(bytes.len(), 16);
        let v = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        assert!((v - 2f32.sqrt()).abs() < 1e-6);
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(header["rows"], 2);
    }
}
