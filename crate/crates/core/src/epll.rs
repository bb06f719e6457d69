//! One pyramid layer of randomized EPLL solved by ADMM.
//!
//! Each iteration draws a patch `z_i` per active location (z-step), fuses
//! them with the LR fidelity term (x-step) and updates the scaled duals
//! `u_i` (u-step). Duals exist only for the active location set and are
//! reset whenever cycle-spinning changes that set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{probe_descriptor, PatchDictionary};
use crate::error::{Error, Result};
use crate::image::{
    downsample, downsample_adjoint, downsample_gram_diagonal, extract_patch, Image, Patch,
    PatchAccumulator, PatchLocation,
};
use crate::sampler::{draw_index, location_rng, posterior_from_distances, PosteriorParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationParams {
    pub lambda: f64,
    pub rho: f64,
    pub h: f64,
    pub offset: (usize, usize),
}

impl IterationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.h > 0.0) {
            return Err(Error::config(format!("h must be > 0, got {}", self.h)));
        }
        Ok(())
    }
}

/// Conjugate-gradient stopping rule for the x-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 200,
        }
    }
}

/// Fully-overlapping-style grid with stride `side - overlap`, shifted by `offset`.
/// Locations whose patch would leave the image are dropped.
pub fn location_set(
    width: usize,
    height: usize,
    layer: usize,
    side: usize,
    overlap: usize,
    offset: (usize, usize),
) -> Result<Vec<PatchLocation>> {
    if overlap >= side {
        return Err(Error::config(format!(
            "overlap {overlap} must be smaller than patch side {side}"
        )));
    }
    let stride = side - overlap;
    if offset.0 >= stride || offset.1 >= stride {
        return Err(Error::config(format!(
            "offset ({}, {}) must lie in [0, {stride})",
            offset.0, offset.1
        )));
    }
    let mut out = Vec::new();
    let mut y = offset.1;
    while y + side <= height {
        let mut x = offset.0;
        while x + side <= width {
            out.push(PatchLocation::new(x, y, layer));
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    estimate: Image,
    duals: BTreeMap<PatchLocation, Patch>,
    iteration: usize,
}

impl AdmmState {
    pub fn new(estimate: Image) -> Self {
        Self {
            estimate,
            duals: BTreeMap::new(),
            iteration: 0,
        }
    }

    pub fn estimate(&self) -> &Image {
        &self.estimate
    }

    pub fn into_estimate(self) -> Image {
        self.estimate
    }

    pub fn duals(&self) -> &BTreeMap<PatchLocation, Patch> {
        &self.duals
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Makes `locations` the active set. If it differs from the current
    /// one, every dual restarts at zero.
    pub fn activate(&mut self, locations: &[PatchLocation], side: usize) {
        let same = self.duals.len() == locations.len()
            && locations.iter().all(|l| self.duals.contains_key(l));
        if !same {
            self.duals = locations.iter().map(|&l| (l, Patch::zeros(side))).collect();
        }
    }

    pub fn active(&self) -> Vec<PatchLocation> {
        self.duals.keys().copied().collect()
    }
}

/// A patch chosen by the z-step together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub patch: Patch,
    pub pair_index: usize,
    pub source_image: usize,
    pub source_loc: PatchLocation,
    /// Squared LR descriptor distance of the chosen pair.
    pub lr_distance: f64,
}

/// Inputs shared by every iteration of one layer.
pub struct LayerInputs<'a> {
    /// `X_{l+1}`, the fixed coarser layer.
    pub lr_image: &'a Image,
    pub dictionaries: &'a BTreeMap<PatchLocation, PatchDictionary>,
    pub layer: usize,
    pub patch_side: usize,
    /// Shortlist size for sampling.
    pub k: usize,
    pub root_seed: u64,
}

/// Draws one patch per active location from the shortlisted posterior.
pub fn z_step(
    state: &AdmmState,
    inputs: &LayerInputs<'_>,
    params: &IterationParams,
) -> Result<BTreeMap<PatchLocation, Choice>> {
    params.validate()?;
    let posterior = PosteriorParams {
        h: params.h,
        rho: params.rho,
        k: inputs.k,
    };
    posterior.validate()?;
    let n = inputs.patch_side;
    let active: Vec<(&PatchLocation, &Patch)> = state.duals.iter().collect();
    let chosen: Result<Vec<(PatchLocation, Choice)>> = active
        .par_iter()
        .map(|&(&loc, dual)| {
            let dict = inputs.dictionaries.get(&loc).ok_or_else(|| {
                Error::config(format!(
                    "no dictionary for location ({}, {}) on layer {}",
                    loc.x, loc.y, loc.layer
                ))
            })?;
            let bank = dict.bank();
            let lr_probe = probe_descriptor(inputs.lr_image, loc.halved(), n / 2, &bank.context())?;
            let mut hr_probe = extract_patch(&state.estimate, loc, n)?.into_values();
            for (v, u) in hr_probe.iter_mut().zip(dual.values()) {
                *v += u;
            }
            let shortlist = dict.knn_query(&lr_probe, inputs.k)?;
            let lr_sq: Vec<f64> = shortlist.iter().map(|c| c.distance).collect();
            let hr_sq: Vec<f64> = if posterior.rho == 0.0 {
                vec![0.0; shortlist.len()]
            } else {
                shortlist.iter().map(|c| dict.hr_distance(c.index, &hr_probe)).collect()
            };
            let probs = posterior_from_distances(&lr_sq, &hr_sq, &posterior)?;
            let mut rng = location_rng(inputs.root_seed, inputs.layer, state.iteration, loc.x, loc.y);
            let pick = shortlist[draw_index(&probs, &mut rng)];
            let (source_image, source_loc) = dict.source(pick.index);
            Ok((
                loc,
                Choice {
                    patch: dict.hr_patch(pick.index),
                    pair_index: pick.index,
                    source_image,
                    source_loc,
                    lr_distance: pick.distance,
                },
            ))
        })
        .collect();
    Ok(chosen?.into_iter().collect())
}

/// Solves `(lambda H^T H + rho sum R^T R) X = lambda H^T Y + rho sum R^T (z - u)`
/// over the pixels covered by at least one active patch. Uncovered pixels
/// keep their value from `previous`.
pub fn x_step(
    z: &BTreeMap<PatchLocation, Patch>,
    duals: &BTreeMap<PatchLocation, Patch>,
    lr_image: &Image,
    lambda: f64,
    rho: f64,
    previous: &Image,
    solver: &SolverSettings,
) -> Result<Image> {
    let (w, h) = previous.dims();
    let mut acc = PatchAccumulator::new(w, h);
    for (loc, zi) in z {
        let mut v = zi.clone();
        if let Some(u) = duals.get(loc) {
            for (a, b) in v.values_mut().iter_mut().zip(u.values()) {
                *a -= b;
            }
        }
        acc.add(&v, *loc)?;
    }
    if lambda == 0.0 {
        return acc.average(previous);
    }
    if lr_image.dims() != (w / 2, h / 2) || w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Dimension(format!(
            "LR image {}x{} does not match HR estimate {w}x{h}",
            lr_image.width(),
            lr_image.height()
        )));
    }
    let counts: Vec<f64> = acc.counts().iter().map(|&c| f64::from(c)).collect();
    let covered: Vec<bool> = acc.counts().iter().map(|&c| c > 0).collect();
    if !covered.iter().any(|&c| c) {
        return Ok(previous.clone());
    }

    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let img = Image::new(w, h, v.to_vec())?;
        let hth = downsample_adjoint(&downsample(&img)?);
        Ok(hth
            .pixels()
            .iter()
            .zip(v)
            .zip(&counts)
            .map(|((&a, &x), &c)| lambda * a + rho * c * x)
            .collect())
    };

    // right-hand side restricted to covered pixels, with the fixed
    // uncovered values moved across
    let hty = downsample_adjoint(lr_image);
    let fixed: Vec<f64> = previous
        .pixels()
        .iter()
        .zip(&covered)
        .map(|(&p, &c)| if c { 0.0 } else { p })
        .collect();
    let a_fixed = apply(&fixed)?;
    let b: Vec<f64> = (0..w * h)
        .map(|p| {
            if covered[p] {
                lambda * hty.pixels()[p] + rho * acc.sums()[p] - a_fixed[p]
            } else {
                0.0
            }
        })
        .collect();
    let gram = downsample_gram_diagonal(w, h);
    let precond: Vec<f64> = (0..w * h)
        .map(|p| {
            let d = lambda * gram[p] + rho * counts[p];
            if covered[p] && d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        })
        .collect();
    let mask = |v: &mut Vec<f64>| {
        for (x, &c) in v.iter_mut().zip(&covered) {
            if !c {
                *x = 0.0;
            }
        }
    };
    let x0: Vec<f64> = previous
        .pixels()
        .iter()
        .zip(&covered)
        .map(|(&p, &c)| if c { p } else { 0.0 })
        .collect();
    let apply_masked = |v: &[f64]| -> Result<Vec<f64>> {
        let mut r = apply(v)?;
        mask(&mut r);
        Ok(r)
    };
    let solution = conjugate_gradient(apply_masked, &b, x0, &precond, solver)?;
    let pixels = solution
        .iter()
        .zip(previous.pixels())
        .zip(&covered)
        .map(|((&s, &p), &c)| if c { s } else { p })
        .collect();
    Image::new(w, h, pixels)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG. Fails with the final relative residual if the
/// tolerance is not met within `max_iterations`.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    mut x: Vec<f64>,
    precond: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; b.len()]);
    }
    let ax = apply(&x)?;
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut rel = dot(&r, &r).sqrt() / b_norm;
    if rel <= settings.tolerance {
        return Ok(x);
    }
    let mut z: Vec<f64> = r.iter().zip(precond).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..settings.max_iterations {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= settings.tolerance {
            return Ok(x);
        }
        for i in 0..z.len() {
            z[i] = r[i] * precond[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Numerical {
        message: "conjugate gradient did not converge".into(),
        residual: rel,
    })
}

/// `u_i += R_i X - z_i` for every location in `z`.
pub fn u_step(
    duals: &mut BTreeMap<PatchLocation, Patch>,
    z: &BTreeMap<PatchLocation, Patch>,
    estimate: &Image,
) -> Result<()> {
    for (loc, zi) in z {
        let rx = extract_patch(estimate, *loc, zi.side())?;
        let u = duals
            .entry(*loc)
            .or_insert_with(|| Patch::zeros(zi.side()));
        for ((ui, xi), zv) in u.values_mut().iter_mut().zip(rx.values()).zip(zi.values()) {
            *ui += xi - zv;
        }
    }
    Ok(())
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub layer: usize,
    pub iteration: usize,
    pub lambda: f64,
    pub rho: f64,
    pub h: f64,
    pub offset: (usize, usize),
    pub active_patches: usize,
    /// `lambda/2 |H X - Y|^2`
    pub data_term: f64,
    /// `rho/2 sum |R_i X - z_i + u_i|^2` before the dual update
    pub coupling_term: f64,
    /// `sum |lr_probe - lr(z_i)|^2 / h`, the prior energy of the drawn patches
    pub prior_energy: f64,
    pub objective: f64,
}

impl AdmmState {
    /// One full z/x/u sweep with `params`, over `locations`.
    pub fn iterate(
        &mut self,
        inputs: &LayerInputs<'_>,
        locations: &[PatchLocation],
        params: &IterationParams,
        solver: &SolverSettings,
    ) -> Result<IterationReport> {
        self.activate(locations, inputs.patch_side);
        let choices = z_step(self, inputs, params)?;
        let z: BTreeMap<PatchLocation, Patch> =
            choices.iter().map(|(l, c)| (*l, c.patch.clone())).collect();
        let next = x_step(&z, &self.duals, inputs.lr_image, params.lambda, params.rho, &self.estimate, solver)?;

        let mut coupling = 0.0;
        for (loc, zi) in &z {
            let rx = extract_patch(&next, *loc, zi.side())?;
            let u = &self.duals[loc];
            for ((x, zv), uv) in rx.values().iter().zip(zi.values()).zip(u.values()) {
                coupling += (x - zv + uv) * (x - zv + uv);
            }
        }
        let data = if next.width() % 2 == 0 && next.height() % 2 == 0 {
            let hx = downsample(&next)?;
            hx.squared_distance(inputs.lr_image).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        let prior_energy: f64 = choices.values().map(|c| c.lr_distance / params.h).sum();

        u_step(&mut self.duals, &z, &next)?;
        self.estimate = next;
        let report = IterationReport {
            layer: inputs.layer,
            iteration: self.iteration,
            lambda: params.lambda,
            rho: params.rho,
            h: params.h,
            offset: params.offset,
            active_patches: z.len(),
            data_term: 0.5 * params.lambda * data,
            coupling_term: 0.5 * params.rho * coupling,
            prior_energy,
            objective: 0.5 * params.lambda * data + 0.5 * params.rho * coupling + prior_energy,
        };
        self.iteration += 1;
        Ok(report)
    }
}
