//! Paired LR/HR example dictionaries, one per patch location of a layer.
//!
//! A dictionary for HR location `i` at layer `l` holds one pair per training
//! image `j` and per source location `i'` within the neighbor window of `i`:
//! the HR patch `R_{i'} V_j^l` and the LR patch `Q_{i'/2} V_j^{l+1}`. Pairs are
//! not copied out of the training pyramids; a dictionary stores its source
//! locations and reads patch values from a shared [`LayerBank`] on demand.
//!
//! Pair indices are `source_index * N + image_index`, with sources ordered
//! row-major over the window. Nearest-neighbor queries break distance ties
//! by ascending pair index.

use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Patch, PatchLocation};
use crate::kdtree::KdIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    None,
    /// A band of `extent` LR pixels around the LR patch.
    Square,
    /// The square band plus the horizontally mirrored window from the
    /// opposite half of the image (face symmetry).
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub kind: ContextKind,
    pub extent: usize,
    pub weight: f64,
}

impl Default for ContextSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl ContextSpec {
    pub fn none() -> Self {
        Self {
            kind: ContextKind::None,
            extent: 0,
            weight: 0.0,
        }
    }

    pub fn square(extent: usize, weight: f64) -> Self {
        Self {
            kind: ContextKind::Square,
            extent,
            weight,
        }
    }

    pub fn horizontal(extent: usize, weight: f64) -> Self {
        Self {
            kind: ContextKind::Horizontal,
            extent,
            weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::config(format!("context weight must be >= 0, got {}", self.weight)));
        }
        if self.kind == ContextKind::None && self.extent != 0 {
            return Err(Error::config("context kind 'none' requires extent 0"));
        }
        Ok(())
    }

    /// Length of the descriptor for an LR patch of side `half`.
    pub fn descriptor_len(&self, half: usize) -> usize {
        let win = half + 2 * self.extent;
        match self.kind {
            ContextKind::None => half * half,
            ContextKind::Square => win * win,
            ContextKind::Horizontal => 2 * win * win,
        }
    }
}

/// Gather plan for one LR location: descriptor element `t` is
/// `scale[t] * padded_lr[index[t]]`.
#[derive(Debug, Clone)]
struct DescriptorLayout {
    index: Vec<u32>,
    scale: Vec<f64>,
}

/// Training data for one synthesis layer `l`: HR level `l` and replicate-padded
/// LR level `l + 1` of every training image.
#[derive(Debug)]
pub struct LayerBank {
    layer: usize,
    patch_side: usize,
    context: ContextSpec,
    hr_width: usize,
    hr_height: usize,
    lr_width: usize,
    lr_height: usize,
    pad: usize,
    hr: Vec<f64>,
    lr_padded: Vec<f64>,
    count: usize,
    layouts: Vec<DescriptorLayout>,
}

impl LayerBank {
    /// Builds the bank from per-image pyramids (`pyramids[j][level]`).
    pub fn from_pyramids(
        pyramids: &[Vec<Image>],
        layer: usize,
        patch_side: usize,
        context: ContextSpec,
    ) -> Result<Self> {
        if pyramids.is_empty() {
            return Err(Error::config("empty training set"));
        }
        let hr: Vec<&Image> = pyramids
            .iter()
            .map(|p| {
                p.get(layer)
                    .ok_or_else(|| Error::config(format!("pyramid lacks level {layer}")))
            })
            .collect::<Result<_>>()?;
        let lr: Vec<&Image> = pyramids
            .iter()
            .map(|p| {
                p.get(layer + 1)
                    .ok_or_else(|| Error::config(format!("pyramid lacks level {}", layer + 1)))
            })
            .collect::<Result<_>>()?;
        Self::from_levels(&hr, &lr, layer, patch_side, context)
    }

    pub fn from_levels(
        hr: &[&Image],
        lr: &[&Image],
        layer: usize,
        patch_side: usize,
        context: ContextSpec,
    ) -> Result<Self> {
        context.validate()?;
        if hr.is_empty() || hr.len() != lr.len() {
            return Err(Error::config("empty or mismatched training set"));
        }
        if patch_side < 2 || !patch_side.is_multiple_of(2) {
            return Err(Error::config(format!("patch side must be even and >= 2, got {patch_side}")));
        }
        let (hw, hh) = hr[0].dims();
        let (lw, lh) = lr[0].dims();
        if hw != 2 * lw || hh != 2 * lh {
            return Err(Error::Dimension(format!(
                "HR level {hw}x{hh} is not twice LR level {lw}x{lh}"
            )));
        }
        if patch_side > hw || patch_side > hh {
            return Err(Error::Dimension(format!(
                "patch side {patch_side} exceeds layer size {hw}x{hh}"
            )));
        }
        if hr.iter().any(|i| i.dims() != (hw, hh)) || lr.iter().any(|i| i.dims() != (lw, lh)) {
            return Err(Error::Dimension("training pyramids do not share dimensions".into()));
        }
        let pad = context.extent;
        let (pw, ph) = (lw + 2 * pad, lh + 2 * pad);
        let mut lr_padded = Vec::with_capacity(lr.len() * pw * ph);
        for img in lr {
            for y in 0..ph {
                for x in 0..pw {
                    lr_padded.push(img.get_clamped(x as isize - pad as isize, y as isize - pad as isize));
                }
            }
        }
        let mut hr_data = Vec::with_capacity(hr.len() * hw * hh);
        for img in hr {
            hr_data.extend_from_slice(img.pixels());
        }
        let half = patch_side / 2;
        let mut layouts = Vec::with_capacity((lw - half + 1) * (lh - half + 1));
        for ly in 0..=lh - half {
            for lx in 0..=lw - half {
                layouts.push(make_layout(lx, ly, half, lw, pw, pad, &context));
            }
        }
        Ok(Self {
            layer,
            patch_side,
            context,
            hr_width: hw,
            hr_height: hh,
            lr_width: lw,
            lr_height: lh,
            pad,
            hr: hr_data,
            lr_padded,
            count: hr.len(),
            layouts,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn context(&self) -> ContextSpec {
        self.context
    }

    pub fn image_count(&self) -> usize {
        self.count
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        (self.hr_width, self.hr_height)
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        (self.lr_width, self.lr_height)
    }

    pub fn descriptor_len(&self) -> usize {
        self.context.descriptor_len(self.patch_side / 2)
    }

    /// HR training level of image `image`.
    pub fn hr_level(&self, image: usize) -> Image {
        let len = self.hr_width * self.hr_height;
        Image::new(self.hr_width, self.hr_height, self.hr[image * len..(image + 1) * len].to_vec())
            .expect("validated at build")
    }

    /// LR training level of image `image`, without the context padding.
    pub fn lr_level(&self, image: usize) -> Image {
        let pw = self.lr_width + 2 * self.pad;
        let base = image * self.padded_len();
        Image::from_fn(self.lr_width, self.lr_height, |x, y| {
            self.lr_padded[base + (y + self.pad) * pw + x + self.pad]
        })
    }

    fn padded_len(&self) -> usize {
        (self.lr_width + 2 * self.pad) * (self.lr_height + 2 * self.pad)
    }

    fn layout(&self, lr_loc: PatchLocation) -> &DescriptorLayout {
        let half = self.patch_side / 2;
        &self.layouts[lr_loc.y * (self.lr_width - half + 1) + lr_loc.x]
    }

    /// HR patch of training image `image` at `loc`.
    pub fn hr_patch(&self, image: usize, loc: PatchLocation) -> Patch {
        let n = self.patch_side;
        let base = image * self.hr_width * self.hr_height;
        let mut v = Vec::with_capacity(n * n);
        for r in 0..n {
            let s = base + (loc.y + r) * self.hr_width + loc.x;
            v.extend_from_slice(&self.hr[s..s + n]);
        }
        Patch::new(n, v).expect("side checked at build")
    }

    /// Squared distance between `probe` and `R_loc V_image`.
    pub(crate) fn hr_distance(&self, image: usize, loc: PatchLocation, probe: &[f64]) -> f64 {
        let n = self.patch_side;
        let base = image * self.hr_width * self.hr_height;
        let mut acc = 0.0;
        for r in 0..n {
            let s = base + (loc.y + r) * self.hr_width + loc.x;
            for (a, b) in self.hr[s..s + n].iter().zip(&probe[r * n..(r + 1) * n]) {
                acc += (a - b) * (a - b);
            }
        }
        acc
    }

    /// Core LR patch (no context) of training image `image` at `lr_loc`.
    pub fn lr_patch(&self, image: usize, lr_loc: PatchLocation) -> Patch {
        let half = self.patch_side / 2;
        let pw = self.lr_width + 2 * self.pad;
        let base = image * self.padded_len();
        let mut v = Vec::with_capacity(half * half);
        for r in 0..half {
            let s = base + (lr_loc.y + r + self.pad) * pw + lr_loc.x + self.pad;
            v.extend_from_slice(&self.lr_padded[s..s + half]);
        }
        Patch::new(half, v).expect("side checked at build")
    }

    /// Context-augmented descriptor of training image `image` at `lr_loc`.
    pub fn descriptor(&self, image: usize, lr_loc: PatchLocation) -> Vec<f64> {
        let layout = self.layout(lr_loc);
        let img = &self.lr_padded[image * self.padded_len()..(image + 1) * self.padded_len()];
        layout
            .index
            .iter()
            .zip(&layout.scale)
            .map(|(&i, &s)| s * img[i as usize])
            .collect()
    }

    /// Squared descriptor distance from `probe` to every training image at `lr_loc`.
    fn descriptor_distances(&self, lr_loc: PatchLocation, probe: &[f64], out: &mut Vec<f64>) {
        let layout = self.layout(lr_loc);
        let plen = self.padded_len();
        out.clear();
        out.extend(self.lr_padded.chunks_exact(plen).map(|img| {
            let mut acc = 0.0;
            for ((&i, &s), &q) in layout.index.iter().zip(&layout.scale).zip(probe) {
                let d = q - s * img[i as usize];
                acc += d * d;
            }
            acc
        }));
    }
}

fn make_layout(
    lx: usize,
    ly: usize,
    half: usize,
    lr_width: usize,
    padded_width: usize,
    pad: usize,
    ctx: &ContextSpec,
) -> DescriptorLayout {
    let mut index = Vec::new();
    let mut scale = Vec::new();
    let at = |x: usize, y: usize| (y * padded_width + x) as u32;
    // core, in padded coordinates
    for r in 0..half {
        for c in 0..half {
            index.push(at(lx + c + pad, ly + r + pad));
            scale.push(1.0);
        }
    }
    if ctx.kind == ContextKind::None {
        return DescriptorLayout { index, scale };
    }
    let e = ctx.extent;
    let win = half + 2 * e;
    // square band: window [lx - e, lx + half + e) in unpadded coordinates
    for r in 0..win {
        for c in 0..win {
            let in_core = r >= e && r < e + half && c >= e && c < e + half;
            if !in_core {
                index.push(at(lx + c, ly + r));
                scale.push(ctx.weight);
            }
        }
    }
    if ctx.kind == ContextKind::Horizontal {
        // mirrored window, flipped so that column c reads mirror(x_c)
        for r in 0..win {
            for c in 0..win {
                let x = lx as isize - e as isize + c as isize;
                let mx = lr_width as isize - 1 - x;
                index.push(at((mx + pad as isize) as usize, ly + r));
                scale.push(ctx.weight);
            }
        }
    }
    DescriptorLayout { index, scale }
}

/// Context-augmented descriptor of an arbitrary LR image (the synthesis probe),
/// laid out exactly like the training descriptors.
pub fn probe_descriptor(lr: &Image, lr_loc: PatchLocation, half: usize, ctx: &ContextSpec) -> Result<Vec<f64>> {
    ctx.validate()?;
    if !lr_loc.fits(half, lr.width(), lr.height()) {
        return Err(Error::Bounds(format!(
            "LR patch of side {half} at ({}, {}) exceeds {}x{}",
            lr_loc.x,
            lr_loc.y,
            lr.width(),
            lr.height()
        )));
    }
    let pad = ctx.extent;
    let pw = lr.width() + 2 * pad;
    let layout = make_layout(lr_loc.x, lr_loc.y, half, lr.width(), pw, pad, ctx);
    Ok(layout
        .index
        .iter()
        .zip(&layout.scale)
        .map(|(&i, &s)| {
            let (px, py) = (i as usize % pw, i as usize / pw);
            s * lr.get_clamped(px as isize - pad as isize, py as isize - pad as isize)
        })
        .collect())
}

/// A materialized LR/HR example pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lr: Patch,
    pub hr: Patch,
    pub source_image: usize,
    pub source_loc: PatchLocation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnBackend {
    /// Exhaustive scan over all pairs (the reference).
    #[default]
    Exhaustive,
    /// Exact k-d tree over materialized descriptors.
    KdTree,
}

#[derive(Debug)]
pub struct PatchDictionary {
    location: PatchLocation,
    sources: Vec<PatchLocation>,
    bank: Arc<LayerBank>,
    index: Option<KdIndex>,
}

impl PatchDictionary {
    /// Dictionary over explicit source locations (all images of `bank`).
    pub fn from_sources(location: PatchLocation, sources: Vec<PatchLocation>, bank: Arc<LayerBank>) -> Result<Self> {
        let (w, h) = bank.hr_dims();
        let n = bank.patch_side;
        if sources.is_empty() {
            return Err(Error::config(format!("no sources for location ({}, {})", location.x, location.y)));
        }
        for s in sources.iter().chain(std::iter::once(&location)) {
            if s.layer != bank.layer || !s.fits(n, w, h) {
                return Err(Error::Bounds(format!(
                    "source ({}, {}) on layer {} does not fit layer {} ({w}x{h}, n={n})",
                    s.x, s.y, s.layer, bank.layer
                )));
            }
        }
        Ok(Self {
            location,
            sources,
            bank,
            index: None,
        })
    }

    pub fn location(&self) -> PatchLocation {
        self.location
    }

    pub fn layer(&self) -> usize {
        self.location.layer
    }

    pub fn sources(&self) -> &[PatchLocation] {
        &self.sources
    }

    pub fn bank(&self) -> &Arc<LayerBank> {
        &self.bank
    }

    pub fn len(&self) -> usize {
        self.sources.len() * self.bank.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn descriptor_len(&self) -> usize {
        self.bank.descriptor_len()
    }

    #[inline]
    fn split(&self, index: usize) -> (PatchLocation, usize) {
        (self.sources[index / self.bank.count], index % self.bank.count)
    }

    pub fn pair(&self, index: usize) -> PatchPair {
        let (src, image) = self.split(index);
        PatchPair {
            lr: self.bank.lr_patch(image, src.halved()),
            hr: self.bank.hr_patch(image, src),
            source_image: image,
            source_loc: src,
        }
    }

    pub fn source(&self, index: usize) -> (usize, PatchLocation) {
        let (src, image) = self.split(index);
        (image, src)
    }

    pub fn hr_patch(&self, index: usize) -> Patch {
        let (src, image) = self.split(index);
        self.bank.hr_patch(image, src)
    }

    pub(crate) fn hr_distance(&self, index: usize, probe: &[f64]) -> f64 {
        let (src, image) = self.split(index);
        self.bank.hr_distance(image, src, probe)
    }

    pub fn descriptor(&self, index: usize) -> Vec<f64> {
        let (src, image) = self.split(index);
        self.bank.descriptor(image, src.halved())
    }

    /// All descriptors, row-major, in pair-index order.
    pub fn descriptors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.descriptor_len());
        for p in 0..self.len() {
            out.extend(self.descriptor(p));
        }
        out
    }

    pub fn has_index(&self) -> bool {
        self.index.is_some()
    }

    /// Builds (or rebuilds) the k-d index over this dictionary's descriptors.
    pub fn build_index(&mut self) {
        self.index = Some(KdIndex::build(self.descriptors(), self.descriptor_len()));
    }

    /// `min(k, len)` nearest pairs by squared descriptor distance, ascending,
    /// ties broken by ascending pair index. Uses the k-d index when built.
    pub fn knn_query(&self, probe: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(probe, k)?;
        match &self.index {
            Some(index) => Ok(index.query(probe, k)),
            None => Ok(self.knn_exhaustive_unchecked(probe, k)),
        }
    }

    /// The reference exhaustive scan, regardless of any index.
    pub fn knn_exhaustive(&self, probe: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(probe, k)?;
        Ok(self.knn_exhaustive_unchecked(probe, k))
    }

    fn check_query(&self, probe: &[f64], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if probe.len() != self.descriptor_len() {
            return Err(Error::config(format!(
                "probe has {} dimensions, dictionary descriptors have {}",
                probe.len(),
                self.descriptor_len()
            )));
        }
        Ok(())
    }

    fn knn_exhaustive_unchecked(&self, probe: &[f64], k: usize) -> Vec<Neighbor> {
        let n = self.bank.count;
        let mut top = TopK::new(k);
        // sources sharing an LR location share their descriptor distances
        let mut cache: Vec<(PatchLocation, Vec<f64>)> = Vec::new();
        for (s, src) in self.sources.iter().enumerate() {
            let lr_loc = src.halved();
            let pos = match cache.iter().position(|(l, _)| *l == lr_loc) {
                Some(p) => p,
                None => {
                    let mut d = Vec::with_capacity(n);
                    self.bank.descriptor_distances(lr_loc, probe, &mut d);
                    cache.push((lr_loc, d));
                    cache.len() - 1
                }
            };
            for (j, &d) in cache[pos].1.iter().enumerate() {
                top.push(d, s * n + j);
            }
        }
        top.into_sorted()
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    distance: f64,
    index: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

/// Keeps the `k` smallest `(distance, index)` entries.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Entry>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, distance: f64, index: usize) {
        let e = Entry { distance, index };
        if self.heap.len() < self.k {
            self.heap.push(e);
        } else if let Some(worst) = self.heap.peek() {
            if e < *worst {
                self.heap.pop();
                self.heap.push(e);
            }
        }
    }

    /// Whether an entry at `distance` could still enter the set.
    #[inline]
    pub(crate) fn admits(&self, distance: f64) -> bool {
        self.heap.len() < self.k || self.heap.peek().is_some_and(|w| distance <= w.distance)
    }

    pub(crate) fn into_sorted(self) -> Vec<Neighbor> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|e| Neighbor {
                index: e.index,
                distance: e.distance,
            })
            .collect()
    }
}

/// Source locations within `±window` of `loc` (both axes) that keep an
/// `side x side` patch inside `width x height`, row-major.
pub fn window_sources(
    loc: PatchLocation,
    window: usize,
    side: usize,
    width: usize,
    height: usize,
) -> Vec<PatchLocation> {
    let w = window as isize;
    let mut out = Vec::new();
    for dy in -w..=w {
        for dx in -w..=w {
            let (x, y) = (loc.x as isize + dx, loc.y as isize + dy);
            if x < 0 || y < 0 {
                continue;
            }
            let cand = PatchLocation::new(x as usize, y as usize, loc.layer);
            if cand.fits(side, width, height) {
                out.push(cand);
            }
        }
    }
    out
}

/// One dictionary per requested location, sharing `bank`.
pub fn build_dictionaries(
    bank: &Arc<LayerBank>,
    locations: &[PatchLocation],
    window: usize,
    backend: KnnBackend,
) -> Result<BTreeMap<PatchLocation, PatchDictionary>> {
    let (w, h) = bank.hr_dims();
    let n = bank.patch_side;
    let mut out = BTreeMap::new();
    for &loc in locations {
        if loc.layer != bank.layer {
            return Err(Error::config(format!(
                "location {loc:?} is not on layer {}",
                bank.layer
            )));
        }
        if !loc.fits(n, w, h) {
            return Err(Error::Bounds(format!(
                "dictionary location ({}, {}) does not fit a {n}x{n} patch in {w}x{h}",
                loc.x, loc.y
            )));
        }
        if out.contains_key(&loc) {
            continue;
        }
        let mut dict = PatchDictionary {
            location: loc,
            sources: window_sources(loc, window, n, w, h),
            bank: Arc::clone(bank),
            index: None,
        };
        if backend == KnnBackend::KdTree {
            dict.build_index();
        }
        out.insert(loc, dict);
    }
    Ok(out)
}

/// Convenience form taking training pyramids directly.
pub fn build_dictionaries_from_pyramids(
    pyramids: &[Vec<Image>],
    layer: usize,
    locations: &[PatchLocation],
    patch_side: usize,
    window: usize,
    context: ContextSpec,
) -> Result<BTreeMap<PatchLocation, PatchDictionary>> {
    let bank = Arc::new(LayerBank::from_pyramids(pyramids, layer, patch_side, context)?);
    build_dictionaries(&bank, locations, window, KnnBackend::Exhaustive)
}
