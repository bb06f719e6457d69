#![allow(dead_code)]

use std::path::PathBuf;

use patchsynth::corpus::{read_idx_corpus, Corpus};
use patchsynth::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `PATCHSYNTH_MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("PATCHSYNTH_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Loads one official split ("train" or "t10k"), padded to 32x32, or None
/// with a notice when the files are missing.
pub fn mnist(split: &str) -> Option<Corpus> {
    let dir = mnist_dir();
    let images = dir.join(format!("{split}-images-idx3-ubyte"));
    let labels = dir.join(format!("{split}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        eprintln!("MNIST {split} files not found in {}; skipping", dir.display());
        return None;
    }
    Some(read_idx_corpus(&images, &labels, split, (32, 32)).expect("MNIST files parse"))
}

/// Smooth random images: a few Gaussian bumps each.
pub fn bumps(count: usize, size: usize, salt: u64) -> Vec<Image> {
    (0..count)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(salt.wrapping_mul(1000) + j as u64);
            let centers: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.random::<f64>() * size as f64,
                        rng.random::<f64>() * size as f64,
                        1.5 + rng.random::<f64>() * size as f64 / 8.0,
                    )
                })
                .collect();
            Image::from_fn(size, size, |x, y| {
                let v: f64 = centers
                    .iter()
                    .map(|&(cx, cy, r)| (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                v.min(1.0)
            })
        })
        .collect()
}

/// Independent uniform pixels: every patch is unique.
pub fn textured(count: usize, size: usize, salt: u64) -> Vec<Image> {
    (0..count)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(salt.wrapping_mul(7919) + j as u64);
            Image::from_fn(size, size, |_, _| rng.random::<f64>())
        })
        .collect()
}

pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.squared_distance(b).unwrap() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
