//! Posterior sampling over dictionary candidates.
//!
//! Candidate `j` gets log-weight
//! `-|lr_probe - lr_j|^2 / h - (rho / 2) |hr_probe - hr_j|^2`, where the LR
//! term uses the context-augmented descriptor and `hr_probe = R_i X + u_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::squared_distance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    /// Randomness temperature of the LR prior.
    pub h: f64,
    /// ADMM penalty weight on HR consistency.
    pub rho: f64,
    /// Size of the nearest-neighbor shortlist.
    pub k: usize,
}

impl PosteriorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::config(format!("h must be > 0, got {}", self.h)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        Ok(())
    }
}

/// One shortlisted candidate: its LR descriptor and HR patch values.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub descriptor: &'a [f64],
    pub hr: &'a [f64],
}

/// Normalized posterior over `candidates`.
pub fn posterior_weights(
    candidates: &[Candidate<'_>],
    lr_probe: &[f64],
    hr_probe: &[f64],
    params: &PosteriorParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    if candidates.is_empty() {
        return Err(Error::config("no candidates to sample from"));
    }
    let mut lr = Vec::with_capacity(candidates.len());
    let mut hr = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.descriptor.len() != lr_probe.len() || c.hr.len() != hr_probe.len() {
            return Err(Error::config("candidate and probe dimensions differ"));
        }
        lr.push(squared_distance(lr_probe, c.descriptor));
        hr.push(squared_distance(hr_probe, c.hr));
    }
    posterior_from_distances(&lr, &hr, params)
}

/// Posterior from precomputed squared LR and HR distances.
pub fn posterior_from_distances(lr_sq: &[f64], hr_sq: &[f64], params: &PosteriorParams) -> Result<Vec<f64>> {
    debug_assert_eq!(lr_sq.len(), hr_sq.len());
    let log_w: Vec<f64> = lr_sq
        .iter()
        .zip(hr_sq)
        .map(|(&l, &r)| {
            let hr_term = if params.rho == 0.0 { 0.0 } else { 0.5 * params.rho * r };
            -l / params.h - hr_term
        })
        .collect();
    softmax(&log_w)
}

/// Max-shifted softmax; the partition function is never formed unshifted.
pub fn softmax(log_w: &[f64]) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Internal(format!(
            "posterior log-weights are degenerate (max = {max})"
        )));
    }
    let mut w: Vec<f64> = log_w.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

/// Inverse-CDF draw from one uniform variate.
pub fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum: take the last
    // candidate with non-zero mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws one candidate index from the posterior.
pub fn draw_patch<R: Rng + ?Sized>(
    candidates: &[Candidate<'_>],
    lr_probe: &[f64],
    hr_probe: &[f64],
    params: &PosteriorParams,
    rng: &mut R,
) -> Result<usize> {
    let probs = posterior_weights(candidates, lr_probe, hr_probe, params)?;
    Ok(draw_index(&probs, rng))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a tuple of counters into a new seed.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Independent generator for one (layer, iteration, location) triple.
pub fn location_rng(root: u64, layer: usize, iteration: usize, x: usize, y: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, &[layer as u64, iteration as u64, x as u64, y as u64]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(h: f64, rho: f64) -> PosteriorParams {
        PosteriorParams { h, rho, k: 16 }
    }

    #[test]
    fn single_and_symmetric() {
        let p = posterior_from_distances(&[3.0], &[1.0], &params(1.0, 1.0)).unwrap();
        assert_eq!(p, vec![1.0]);
        let p = posterior_from_distances(&[2.0, 2.0], &[5.0, 5.0], &params(0.5, 2.0)).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn closed_form_two_candidates() {
        // softmax(-1, -2), computed independently
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        let expected = [e1 / (e1 + e2), e2 / (e1 + e2)];
        assert!((expected[0] - 0.7311).abs() < 1e-4);
        let p = posterior_from_distances(&[1.0, 2.0], &[0.0, 0.0], &params(1.0, 0.0)).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn candidates_path_matches_distances() {
        let descs = [[0.0, 1.0], [1.0, 1.0], [2.0, 0.0]];
        let hrs = [[0.5], [0.0], [1.0]];
        let cands: Vec<Candidate> = descs
            .iter()
            .zip(&hrs)
            .map(|(d, h)| Candidate { descriptor: d, hr: h })
            .collect();
        let p = posterior_weights(&cands, &[0.0, 0.0], &[0.25], &params(2.0, 3.0)).unwrap();
        let q = posterior_from_distances(&[1.0, 2.0, 4.0], &[0.0625, 0.0625, 0.5625], &params(2.0, 3.0)).unwrap();
        assert_eq!(p, q);
        assert!(posterior_weights(&[], &[0.0], &[0.0], &params(1.0, 0.0)).is_err());
    }

    #[test]
    fn invalid_params() {
        assert!(params(0.0, 1.0).validate().is_err());
        assert!(params(1.0, -1.0).validate().is_err());
        assert!(PosteriorParams { h: 1.0, rho: 0.0, k: 0 }.validate().is_err());
    }

    #[test]
    fn degenerate_log_weights_error() {
        assert!(matches!(softmax(&[f64::NEG_INFINITY; 3]), Err(Error::Internal(_))));
    }

    #[test]
    fn derived_streams_differ_and_repeat() {
        let a: u64 = location_rng(7, 0, 1, 2, 3).random();
        let b: u64 = location_rng(7, 0, 1, 3, 2).random();
        let c: u64 = location_rng(7, 0, 1, 2, 3).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
