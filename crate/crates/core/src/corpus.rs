//! IDX ingestion and the on-disk corpus format.
//!
//! A stored corpus is a directory holding `<split>-images.idx` and
//! `<split>-labels.idx` (IDX again, after padding) plus `<split>.json`, the
//! manifest whose checksum covers both data files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::provenance::sha256_hex;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let s = bytes.get(offset..offset + 4).ok_or_else(|| Error::Ingest {
        offset: offset as u64,
        message: format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
    })?;
    Ok(u32::from_be_bytes(s.try_into().expect("4 bytes")))
}

/// Raw images from an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.rows * self.cols;
        &self.data[i * len..(i + 1) * len]
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingest {
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Ingest {
            offset: bytes.len().min(expected) as u64,
            message: format!("expected {expected} bytes for {count} {rows}x{cols} images, file has {}", bytes.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        data: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Ingest {
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Ingest {
            offset: bytes.len().min(expected) as u64,
            message: format!("expected {expected} bytes for {count} labels, file has {}", bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.data.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.data);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Images were zero-padded, centered, to this size.
    pub pad_to: (usize, usize),
    /// Bytes map to `[0, 1]` by `v / 255`.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub split: String,
    pub image_count: usize,
    pub width: usize,
    pub height: usize,
    /// `(label, count)` for every label present, ascending.
    pub classes: Vec<(u8, usize)>,
    /// SHA-256 over the stored image file followed by the label file.
    pub checksum: String,
    pub preprocessing: Preprocessing,
}

/// Labeled images in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
}

impl Corpus {
    /// Indices (into `images`) of every image with `label`, in file order.
    pub fn class_indices(&self, label: u8) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn class_images(&self, label: u8) -> Vec<Image> {
        self.class_indices(label).into_iter().map(|i| self.images[i].clone()).collect()
    }
}

fn pad_bytes(src: &[u8], rows: usize, cols: usize, pw: usize, ph: usize) -> Vec<u8> {
    let (x0, y0) = ((pw - cols) / 2, (ph - rows) / 2);
    let mut out = vec![0u8; pw * ph];
    for r in 0..rows {
        out[(y0 + r) * pw + x0..(y0 + r) * pw + x0 + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    out
}

fn checksum(images: &[u8], labels: &[u8]) -> String {
    let mut all = Vec::with_capacity(images.len() + labels.len());
    all.extend_from_slice(images);
    all.extend_from_slice(labels);
    sha256_hex(&all)
}

fn split_paths(dir: &Path, split: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{split}-images.idx")),
        dir.join(format!("{split}-labels.idx")),
        dir.join(format!("{split}.json")),
    )
}

/// Parses IDX image and label bytes, pads to `pad_to` and builds the
/// stored representation. Returns the manifest and both encoded files.
pub fn prepare_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    split: &str,
    pad_to: (usize, usize),
) -> Result<(CorpusManifest, Vec<u8>, Vec<u8>)> {
    let raw = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != raw.count {
        return Err(Error::Ingest {
            offset: 4,
            message: format!("{} images but {} labels", raw.count, labels.len()),
        });
    }
    let (pw, ph) = pad_to;
    if pw < raw.cols || ph < raw.rows {
        return Err(Error::config(format!(
            "cannot pad {}x{} images to {pw}x{ph}",
            raw.cols, raw.rows
        )));
    }
    let mut data = Vec::with_capacity(raw.count * pw * ph);
    for i in 0..raw.count {
        data.extend(pad_bytes(raw.image(i), raw.rows, raw.cols, pw, ph));
    }
    let stored = IdxImages {
        count: raw.count,
        rows: ph,
        cols: pw,
        data,
    };
    let img_file = encode_idx_images(&stored);
    let lbl_file = encode_idx_labels(&labels);
    let mut counts = [0usize; 256];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let manifest = CorpusManifest {
        format: "idx".into(),
        split: split.into(),
        image_count: raw.count,
        width: pw,
        height: ph,
        classes: (0..=255u8).filter(|&l| counts[l as usize] > 0).map(|l| (l, counts[l as usize])).collect(),
        checksum: checksum(&img_file, &lbl_file),
        preprocessing: Preprocessing {
            pad_to,
            normalize: true,
        },
    };
    Ok((manifest, img_file, lbl_file))
}

/// Reads IDX files, pads, and writes the stored corpus under `out_dir`.
pub fn ingest_idx(
    images_path: &Path,
    labels_path: &Path,
    split: &str,
    pad_to: (usize, usize),
    out_dir: &Path,
) -> Result<CorpusManifest> {
    let (manifest, img_file, lbl_file) = prepare_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?, split, pad_to)?;
    std::fs::create_dir_all(out_dir)?;
    let (ip, lp, mp) = split_paths(out_dir, split);
    std::fs::write(ip, img_file)?;
    std::fs::write(lp, lbl_file)?;
    std::fs::write(mp, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a stored split, verifying its checksum.
pub fn load_corpus(dir: &Path, split: &str) -> Result<Corpus> {
    let (ip, lp, mp) = split_paths(dir, split);
    let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(mp)?)?;
    let img_file = std::fs::read(ip)?;
    let lbl_file = std::fs::read(lp)?;
    let sum = checksum(&img_file, &lbl_file);
    if sum != manifest.checksum {
        return Err(Error::Format(format!(
            "corpus checksum mismatch for split '{split}': manifest {}, files {sum}",
            manifest.checksum
        )));
    }
    corpus_from_idx(manifest, &img_file, &lbl_file)
}

fn corpus_from_idx(manifest: CorpusManifest, img_file: &[u8], lbl_file: &[u8]) -> Result<Corpus> {
    let raw = parse_idx_images(img_file)?;
    let labels = parse_idx_labels(lbl_file)?;
    let images = (0..raw.count)
        .map(|i| Image::from_bytes(raw.cols, raw.rows, raw.image(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        manifest,
        images,
        labels,
    })
}

/// Reads official IDX files directly into memory (padding applied, nothing written).
pub fn read_idx_corpus(images_path: &Path, labels_path: &Path, split: &str, pad_to: (usize, usize)) -> Result<Corpus> {
    let (manifest, img_file, lbl_file) = prepare_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?, split, pad_to)?;
    corpus_from_idx(manifest, &img_file, &lbl_file)
}

/// Stores in-memory images (quantized to 8 bits) as a corpus split, for
/// sources that are not IDX files, e.g. a directory of PGMs.
pub fn store_images(images: &[Image], labels: &[u8], split: &str, out_dir: &Path) -> Result<CorpusManifest> {
    let first = images.first().ok_or_else(|| Error::config("no images to store"))?;
    let (w, h) = first.dims();
    if labels.len() != images.len() {
        return Err(Error::config(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let mut data = Vec::with_capacity(images.len() * w * h);
    for (i, img) in images.iter().enumerate() {
        if img.dims() != (w, h) {
            return Err(Error::Dimension(format!("image {i} is {:?}, expected {:?}", img.dims(), (w, h))));
        }
        data.extend(img.to_bytes());
    }
    let raw = IdxImages {
        count: images.len(),
        rows: h,
        cols: w,
        data,
    };
    let (mut manifest, img_file, lbl_file) = prepare_idx(&encode_idx_images(&raw), &encode_idx_labels(labels), split, (w, h))?;
    manifest.format = "pgm".into();
    std::fs::create_dir_all(out_dir)?;
    let (ip, lp, mp) = split_paths(out_dir, split);
    std::fs::write(ip, img_file)?;
    std::fs::write(lp, lbl_file)?;
    std::fs::write(mp, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Vec<u8>, Vec<u8>) {
        let imgs = IdxImages {
            count: 3,
            rows: 2,
            cols: 2,
            data: vec![0, 255, 10, 20, 1, 2, 3, 4, 9, 9, 9, 9],
        };
        (encode_idx_images(&imgs), encode_idx_labels(&[1, 0, 1]))
    }

    #[test]
    fn round_trip_with_padding() {
        let (i, l) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        std::fs::write(src.join("i"), &i).unwrap();
        std::fs::write(src.join("l"), &l).unwrap();
        let m = ingest_idx(&src.join("i"), &src.join("l"), "train", (4, 4), dir.path()).unwrap();
        assert_eq!(m.image_count, 3);
        assert_eq!(m.classes, vec![(0, 1), (1, 2)]);
        let c = load_corpus(dir.path(), "train").unwrap();
        assert_eq!(c.images[0].dims(), (4, 4));
        assert_eq!(c.images[0].get(2, 1), 1.0);
        assert_eq!(c.images[0].get(0, 0), 0.0);
        assert_eq!(c.class_indices(1), vec![0, 2]);
    }

    #[test]
    fn checksum_detects_tampering() {
        let (i, l) = tiny();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("i"), &i).unwrap();
        std::fs::write(dir.path().join("l"), &l).unwrap();
        ingest_idx(&dir.path().join("i"), &dir.path().join("l"), "test", (2, 2), dir.path()).unwrap();
        let p = dir.path().join("test-images.idx");
        let mut bytes = std::fs::read(&p).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_corpus(dir.path(), "test"), Err(Error::Format(_))));
    }

    #[test]
    fn ingest_errors_carry_offsets() {
        let (i, l) = tiny();
        let mut bad = i.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Ingest { offset: 0, .. })));
        match parse_idx_images(&i[..i.len() - 2]) {
            Err(Error::Ingest { offset, message }) => {
                assert_eq!(offset, (i.len() - 2) as u64);
                assert!(message.contains("expected 28 bytes"));
                assert!(message.contains("has 26"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_images(&i[..6]), Err(Error::Ingest { .. })));
        let short_labels = encode_idx_labels(&[1, 0]);
        assert!(matches!(prepare_idx(&i, &short_labels, "x", (2, 2)), Err(Error::Ingest { .. })));
        assert!(matches!(parse_idx_labels(&i), Err(Error::Ingest { offset: 0, .. })));
        let _ = l;
    }

    #[test]
    fn stored_images_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![
            Image::from_fn(3, 2, |x, y| (x + y) as f64 / 4.0),
            Image::filled(3, 2, 1.0),
        ];
        let m = store_images(&imgs, &[0, 0], "faces", dir.path()).unwrap();
        assert_eq!(m.format, "pgm");
        assert_eq!(m.classes, vec![(0, 2)]);
        let c = load_corpus(dir.path(), "faces").unwrap();
        assert_eq!(c.images[1], imgs[1]);
        assert!((c.images[0].get(2, 1) - 191.0 / 255.0).abs() < 1e-12);
        assert!(store_images(&imgs, &[0], "x", dir.path()).is_err());
    }
}
