//! Multi-scale synthesis: per-layer ADMM runs driven by a schedule, from a
//! tiny seed up to the full image.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{build_dictionaries, ContextSpec, KnnBackend, LayerBank, PatchDictionary};
use crate::epll::{location_set, AdmmState, IterationParams, IterationReport, LayerInputs, SolverSettings};
use crate::error::{Error, Result};
use crate::image::{bilinear_upscale2x, build_pyramid, downsample, Image, PatchLocation};
use crate::pgm;
use crate::provenance::config_hash;
use crate::sampler::derive_seed;

pub const SCHEDULE_VERSION: u32 = 1;

/// Temperature used by deterministic mode.
pub const DETERMINISTIC_H: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    /// Overlap between neighboring patches, in HR pixels.
    pub overlap: usize,
    /// Neighbor-window size for dictionary enlargement.
    pub window: usize,
    pub context: ContextSpec,
    /// One entry per ADMM iteration (`K_l` of them).
    pub iterations: Vec<IterationParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSchedule {
    pub version: u32,
    pub name: String,
    /// Size of the finest layer `X_0`.
    pub width: usize,
    pub height: usize,
    pub patch_side: usize,
    /// Layers ordered finest first (`l = 0 .. L-1`).
    pub layers: Vec<LayerSchedule>,
    /// Shortlist size for posterior sampling.
    pub k: usize,
    pub solver: SolverSettings,
}

fn it(lambda: f64, rho: f64, h: f64, offset: (usize, usize)) -> IterationParams {
    IterationParams { lambda, rho, h, offset }
}

fn pow2(e: f64) -> f64 {
    2f64.powf(e)
}

impl SynthesisSchedule {
    /// Digit preset: 4x4 -> 8x8 -> 16x16 -> 32x32 with 6x6 patches.
    pub fn mnist_digit() -> Self {
        let spin = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let ctx = ContextSpec::square(2, 0.5);
        let h01 = [3.0, 4.0, 5.0, 6.0].map(pow2);
        let layer0 = LayerSchedule {
            overlap: 2,
            window: 2,
            context: ctx,
            iterations: (0..4)
                .map(|k| it(pow2(-4.0), pow2([-10.0, -5.0, 0.0, 5.0][k]), h01[k], spin[k]))
                .collect(),
        };
        let layer1 = LayerSchedule {
            overlap: 2,
            window: 1,
            context: ctx,
            iterations: (0..4)
                .map(|k| it(pow2(-4.0), pow2([-10.0, -6.67, -3.33, 0.0][k]), h01[k], spin[k]))
                .collect(),
        };
        let layer2 = LayerSchedule {
            overlap: 2,
            window: 0,
            context: ctx,
            iterations: vec![it(0.0, 0.01, 100.0, (0, 0)), it(0.1, 100.0, 100.0, (0, 0))],
        };
        Self {
            version: SCHEDULE_VERSION,
            name: "mnist-digit".into(),
            width: 32,
            height: 32,
            patch_side: 6,
            layers: vec![layer0, layer1, layer2],
            // a short list truncates the posterior hard on [0,1] pixels; see README
            k: 1024,
            solver: SolverSettings::default(),
        }
    }

    /// Face preset: 8x8 -> ... -> 128x128 with 8x8 patches.
    pub fn aligned_face() -> Self {
        let ctx = ContextSpec::horizontal(2, 0.5);
        let spin5 = [(0, 0), (2, 0), (1, 1), (0, 2), (2, 2)];
        let spin9 = [(0, 0), (1, 2), (2, 0), (0, 1), (2, 2), (1, 0), (0, 2), (2, 1), (1, 1)];
        let spin4 = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let layer = |overlap: usize, h: &[f64], lambda: &[f64], rho: &[f64], offsets: &[(usize, usize)]| LayerSchedule {
            overlap,
            window: 0,
            context: ctx,
            iterations: (0..h.len()).map(|k| it(lambda[k], rho[k], h[k], offsets[k])).collect(),
        };
        let p = |v: &[f64]| v.iter().map(|&e| pow2(e)).collect::<Vec<_>>();
        let lambda9 = p(&[-3.0, -2.625, -2.25, -1.875, -1.5, -1.125, -0.75, -0.375, 0.0]);
        let layers = vec![
            layer(
                2,
                &p(&[1.0, -0.25, -1.5, -2.75, -4.0]),
                &p(&[-3.0, -2.25, -1.5, -0.75, 0.0]),
                &p(&[-3.0, -1.25, 0.5, 2.25, 4.0]),
                &spin5,
            ),
            layer(
                2,
                &p(&[2.0, 1.25, 0.5, -0.25, -1.0, -1.75, -2.5, -3.25, -4.0]),
                &lambda9,
                &p(&[-3.0, -2.125, -1.25, -0.375, 0.5, 1.375, 2.25, 3.125, 4.0]),
                &spin9,
            ),
            layer(
                2,
                &p(&[0.0, -0.25, -0.5, -0.75, -1.0, -1.25, -1.5, -1.75, -2.0]),
                &lambda9,
                &p(&[-3.0, -2.375, -1.75, -1.125, -0.5, 0.125, 0.75, 1.375, 2.0]),
                &spin9,
            ),
            layer(4, &[10.0; 4], &[0.001; 4], &[0.001; 4], &spin4),
        ];
        Self {
            version: SCHEDULE_VERSION,
            name: "aligned-face".into(),
            width: 128,
            height: 128,
            patch_side: 8,
            layers,
            k: 1024,
            solver: SolverSettings::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist-digit" => Ok(Self::mnist_digit()),
            "aligned-face" => Ok(Self::aligned_face()),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected mnist-digit or aligned-face)"
            ))),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["mnist-digit", "aligned-face"]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(w, h)` of layer `l`, for `l = 0 ..= L` (`L` being the seed).
    pub fn layer_size(&self, l: usize) -> (usize, usize) {
        (self.width >> l, self.height >> l)
    }

    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        (0..=self.depth()).map(|l| self.layer_size(l)).collect()
    }

    pub fn seed_size(&self) -> (usize, usize) {
        self.layer_size(self.depth())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEDULE_VERSION {
            return Err(Error::config(format!(
                "schedule version {} is not supported (expected {SCHEDULE_VERSION})",
                self.version
            )));
        }
        let n = self.patch_side;
        if n < 2 || !n.is_multiple_of(2) {
            return Err(Error::config(format!("patch side must be even and >= 2, got {n}")));
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_iterations == 0 {
            return Err(Error::config("solver tolerance and max_iterations must be positive"));
        }
        let depth = self.depth();
        let factor = 1usize << depth.min(usize::BITS as usize - 1);
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::config(format!(
                "{}x{} does not halve exactly {depth} times",
                self.width, self.height
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, h) = self.layer_size(l);
            if n > w || n > h {
                return Err(Error::config(format!("patch side {n} exceeds layer {l} size {w}x{h}")));
            }
            if layer.overlap >= n {
                return Err(Error::config(format!(
                    "layer {l}: overlap {} must be smaller than patch side {n}",
                    layer.overlap
                )));
            }
            if layer.iterations.is_empty() {
                return Err(Error::config(format!("layer {l} has no iterations")));
            }
            layer.context.validate()?;
            let stride = n - layer.overlap;
            for (k, p) in layer.iterations.iter().enumerate() {
                p.validate()
                    .map_err(|e| Error::config(format!("layer {l}, iteration {k}: {e}")))?;
                if p.offset.0 >= stride || p.offset.1 >= stride {
                    return Err(Error::config(format!(
                        "layer {l}, iteration {k}: offset ({}, {}) must lie in [0, {stride})",
                        p.offset.0, p.offset.1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every location any iteration of layer `l` will visit.
    pub fn layer_locations(&self, l: usize) -> Result<Vec<PatchLocation>> {
        let layer = &self.layers[l];
        let (w, h) = self.layer_size(l);
        let mut all = std::collections::BTreeSet::new();
        for p in &layer.iterations {
            all.extend(location_set(w, h, l, self.patch_side, layer.overlap, p.offset)?);
        }
        Ok(all.into_iter().collect())
    }

    /// Same schedule with every temperature at [`DETERMINISTIC_H`]: the
    /// sampler then returns the LR-nearest candidate.
    pub fn deterministic(&self) -> Self {
        let mut s = self.clone();
        for layer in &mut s.layers {
            for p in &mut layer.iterations {
                p.h = DETERMINISTIC_H;
            }
        }
        s
    }

    /// Applies a JSON object of field overrides on top of this schedule.
    /// Objects merge recursively; arrays and scalars replace.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, overrides);
        let s: Self = serde_json::from_value(base)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Zero-pads `image` centered to `pad_to`, then halves it down to `seed_size`.
pub fn make_seed(image: &Image, pad_to: (usize, usize), seed_size: (usize, usize)) -> Result<Image> {
    let (pw, ph) = pad_to;
    let (sw, sh) = seed_size;
    if sw == 0 || sh == 0 || pw % sw != 0 || ph % sh != 0 {
        return Err(Error::config(format!("{pw}x{ph} is not a multiple of seed size {sw}x{sh}")));
    }
    let (rx, ry) = (pw / sw, ph / sh);
    if rx != ry || !rx.is_power_of_two() {
        return Err(Error::config(format!(
            "pad size {pw}x{ph} over seed size {sw}x{sh} is not a common power of 2"
        )));
    }
    let mut img = image.pad_centered(pw, ph)?;
    for _ in 0..rx.trailing_zeros() {
        img = downsample(&img)?;
    }
    Ok(img)
}

/// Training data and dictionaries for one layer of one image class.
#[derive(Debug)]
pub struct LayerModel {
    pub bank: Arc<LayerBank>,
    pub dictionaries: BTreeMap<PatchLocation, PatchDictionary>,
}

/// Per-layer dictionaries for one image class under one schedule.
#[derive(Debug)]
pub struct ClassModel {
    pub schedule_hash: String,
    pub layers: Vec<LayerModel>,
}

impl ClassModel {
    /// Builds every layer's dictionaries from finest-level training images.
    pub fn build(training: &[Image], schedule: &SynthesisSchedule, backend: KnnBackend) -> Result<Self> {
        schedule.validate()?;
        if training.is_empty() {
            return Err(Error::config("empty training set"));
        }
        let size = (schedule.width, schedule.height);
        if let Some(bad) = training.iter().find(|t| t.dims() != size) {
            return Err(Error::Dimension(format!(
                "training image is {}x{}, schedule expects {}x{}",
                bad.width(),
                bad.height(),
                size.0,
                size.1
            )));
        }
        let pyramids: Vec<Vec<Image>> = training
            .iter()
            .map(|t| build_pyramid(t, schedule.depth()))
            .collect::<Result<_>>()?;
        Self::from_pyramids(&pyramids, schedule, backend)
    }

    pub fn from_pyramids(pyramids: &[Vec<Image>], schedule: &SynthesisSchedule, backend: KnnBackend) -> Result<Self> {
        let mut layers = Vec::with_capacity(schedule.depth());
        for (l, ls) in schedule.layers.iter().enumerate() {
            let bank = Arc::new(LayerBank::from_pyramids(pyramids, l, schedule.patch_side, ls.context)?);
            let locations = schedule.layer_locations(l)?;
            let dictionaries = build_dictionaries(&bank, &locations, ls.window, backend)?;
            layers.push(LayerModel { bank, dictionaries });
        }
        Ok(Self {
            schedule_hash: schedule.hash()?,
            layers,
        })
    }

    pub fn image_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.bank.image_count())
    }
}

/// Runs layer `l`'s iterations starting from a bilinear upscale of `y`.
pub fn layer_synthesis(
    y: &Image,
    layer: usize,
    model: &LayerModel,
    schedule: &SynthesisSchedule,
    root_seed: u64,
) -> Result<(Image, Vec<IterationReport>)> {
    let ls = schedule
        .layers
        .get(layer)
        .ok_or_else(|| Error::config(format!("schedule has no layer {layer}")))?;
    let expected = schedule.layer_size(layer + 1);
    if y.dims() != expected {
        return Err(Error::Dimension(format!(
            "layer {layer} input is {}x{}, expected {}x{}",
            y.width(),
            y.height(),
            expected.0,
            expected.1
        )));
    }
    let (w, h) = schedule.layer_size(layer);
    let mut state = AdmmState::new(bilinear_upscale2x(y));
    let inputs = LayerInputs {
        lr_image: y,
        dictionaries: &model.dictionaries,
        layer,
        patch_side: schedule.patch_side,
        k: schedule.k,
        root_seed,
    };
    let mut reports = Vec::with_capacity(ls.iterations.len());
    for params in &ls.iterations {
        let locations = location_set(w, h, layer, schedule.patch_side, ls.overlap, params.offset)?;
        reports.push(state.iterate(&inputs, &locations, params, &schedule.solver)?);
    }
    Ok((state.into_estimate(), reports))
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    /// `X_L .. X_0`, coarsest first; the last entry is the output.
    pub layers: Vec<Image>,
    pub reports: Vec<IterationReport>,
}

impl Synthesis {
    pub fn output(&self) -> &Image {
        self.layers.last().expect("at least the seed")
    }
}

/// Upscales `seed` through every layer of `schedule`.
pub fn synthesize(seed: &Image, schedule: &SynthesisSchedule, model: &ClassModel, root_seed: u64) -> Result<Synthesis> {
    if seed.dims() != schedule.seed_size() {
        let (w, h) = schedule.seed_size();
        return Err(Error::Dimension(format!(
            "seed is {}x{}, schedule expects {w}x{h}",
            seed.width(),
            seed.height()
        )));
    }
    if model.layers.len() != schedule.depth() {
        return Err(Error::config(format!(
            "model has {} layers, schedule has {}",
            model.layers.len(),
            schedule.depth()
        )));
    }
    let mut layers = vec![seed.clone()];
    let mut reports = Vec::new();
    for l in (0..schedule.depth()).rev() {
        let (x, r) = layer_synthesis(layers.last().unwrap(), l, &model.layers[l], schedule, root_seed)?;
        layers.push(x);
        reports.extend(r);
    }
    Ok(Synthesis { layers, reports })
}

/// Multivariate Gaussian over flattened seed images, for drawing seeds
/// that do not come from a held-out image.
#[derive(Debug, Clone)]
pub struct GaussianSeedModel {
    width: usize,
    height: usize,
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianSeedModel {
    /// Fits mean and covariance (plus `ridge` on the diagonal) to `seeds`.
    pub fn fit(seeds: &[Image], ridge: f64) -> Result<Self> {
        let first = seeds.first().ok_or_else(|| Error::config("no seeds to fit"))?;
        let (w, h) = first.dims();
        let d = w * h;
        if seeds.iter().any(|s| s.dims() != (w, h)) {
            return Err(Error::Dimension("seeds differ in size".into()));
        }
        let n = seeds.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in seeds {
            mean += DVector::from_column_slice(s.pixels());
        }
        mean /= n;
        let mut cov = DMatrix::identity(d, d) * ridge;
        for s in seeds {
            let c = DVector::from_column_slice(s.pixels()) - &mean;
            cov += &c * c.transpose() / n;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical {
                message: "seed covariance is not positive definite".into(),
                residual: ridge,
            })?
            .l();
        Ok(Self {
            width: w,
            height: h,
            mean,
            chol,
        })
    }

    /// One draw, clamped to `[0, 1]`.
    pub fn sample(&self, root_seed: u64, index: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, &[u64::MAX, index]));
        let z = DVector::from_fn(self.mean.len(), |_, _| standard_normal(&mut rng));
        let v = &self.mean + &self.chol * z;
        Image::from_fn(self.width, self.height, |x, y| v[y * self.width + x].clamp(0.0, 1.0))
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Provenance of one synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed_id: String,
    pub class: Option<String>,
    pub root_seed: u64,
    pub schedule_hash: String,
    /// File names of `X_L .. X_0` inside the run directory.
    pub layer_files: Vec<String>,
}

/// Wall-clock timing, kept apart from [`RunRecord`] so reruns write
/// identical `run.json` bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_time_s: f64,
}

/// Writes `seed.pgm`, `layer_<l>.pgm`, `final.pgm`, `run.json` and `timing.json`.
pub fn write_run_dir(
    dir: &Path,
    synthesis: &Synthesis,
    seed_id: &str,
    class: Option<&str>,
    root_seed: u64,
    schedule_hash: &str,
    wall_time_s: f64,
) -> Result<RunRecord> {
    std::fs::create_dir_all(dir)?;
    let depth = synthesis.layers.len() - 1;
    let mut files = Vec::with_capacity(depth + 1);
    for (i, img) in synthesis.layers.iter().enumerate() {
        let l = depth - i;
        let name = if l == depth {
            "seed.pgm".to_string()
        } else {
            format!("layer_{l}.pgm")
        };
        pgm::write(dir.join(&name), img)?;
        files.push(name);
    }
    pgm::write(dir.join("final.pgm"), synthesis.output())?;
    let record = RunRecord {
        seed_id: seed_id.to_string(),
        class: class.map(str::to_string),
        root_seed,
        schedule_hash: schedule_hash.to_string(),
        layer_files: files,
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&RunTiming { wall_time_s })?,
    )?;
    Ok(record)
}

/// Convenience: synthesize and time one run.
pub fn timed_synthesize(
    seed: &Image,
    schedule: &SynthesisSchedule,
    model: &ClassModel,
    root_seed: u64,
) -> Result<(Synthesis, f64)> {
    let start = Instant::now();
    let s = synthesize(seed, schedule, model, root_seed)?;
    Ok((s, start.elapsed().as_secs_f64()))
}
