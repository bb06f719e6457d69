//! Binary dictionary archives, one per (class, layer), with a JSON sidecar.
//!
//! Layout (all integers little-endian `u32`, floats little-endian `f64`):
//!
//! ```text
//! magic "PSDICT01" | version | hash_len | config hash (utf-8)
//! layer | patch_side | window | ctx_len | context (JSON)
//! image_count | hr_w | hr_h | lr_w | lr_h
//! HR levels (image_count * hr_w * hr_h) | LR levels (image_count * lr_w * lr_h)
//! location_count, then per location:
//!   record_len | x | y | source_count | (sx, sy, first_image, image_count) * source_count
//! ```
//!
//! Each source record stands for the pairs of one source location over a
//! contiguous image range; archives written here always cover every image.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dictionary::{ContextSpec, KnnBackend, LayerBank, PatchDictionary};
use crate::error::{Error, Result};
use crate::image::{Image, PatchLocation};
use crate::synthesis::{ClassModel, LayerModel, SynthesisSchedule};

pub const MAGIC: &[u8; 8] = b"PSDICT01";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveSidecar {
    pub version: u32,
    pub config_hash: String,
    pub class: String,
    pub layer: usize,
    pub patch_side: usize,
    pub window: usize,
    pub context: ContextSpec,
    pub image_count: usize,
    pub locations: usize,
    pub pairs: usize,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "archive truncated at byte {}: need {n} more bytes, {} left",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Serializes one layer's bank and dictionaries.
pub fn encode_layer(model: &LayerModel, window: usize, config_hash: &str) -> Result<Vec<u8>> {
    let bank = &model.bank;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(ARCHIVE_VERSION as usize)?;
    w.bytes(config_hash.as_bytes())?;
    w.u32(bank.layer())?;
    w.u32(bank.patch_side())?;
    w.u32(window)?;
    w.bytes(&serde_json::to_vec(&bank.context())?)?;
    let count = bank.image_count();
    let (hw, hh) = bank.hr_dims();
    let (lw, lh) = bank.lr_dims();
    for v in [count, hw, hh, lw, lh] {
        w.u32(v)?;
    }
    for j in 0..count {
        w.f64s(bank.hr_level(j).pixels());
    }
    for j in 0..count {
        w.f64s(bank.lr_level(j).pixels());
    }
    w.u32(model.dictionaries.len())?;
    for (loc, dict) in &model.dictionaries {
        let mut rec = Writer(Vec::new());
        rec.u32(loc.x)?;
        rec.u32(loc.y)?;
        rec.u32(dict.sources().len())?;
        for s in dict.sources() {
            for v in [s.x, s.y, 0, count] {
                rec.u32(v)?;
            }
        }
        w.bytes(&rec.0)?;
    }
    Ok(w.0)
}

/// Parses an archive back into a layer model; returns it with the stored
/// config hash and window.
pub fn decode_layer(bytes: &[u8], backend: KnnBackend) -> Result<(LayerModel, String, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dictionary archive (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("archive version {version} unsupported")));
    }
    let hash = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let layer = r.u32()?;
    let side = r.u32()?;
    let window = r.u32()?;
    let context: ContextSpec = serde_json::from_slice(r.bytes()?)?;
    let (count, hw, hh, lw, lh) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let mut hr = Vec::with_capacity(count);
    for _ in 0..count {
        hr.push(Image::new(hw, hh, r.f64s(hw * hh)?)?);
    }
    let mut lr = Vec::with_capacity(count);
    for _ in 0..count {
        lr.push(Image::new(lw, lh, r.f64s(lw * lh)?)?);
    }
    let hr_refs: Vec<&Image> = hr.iter().collect();
    let lr_refs: Vec<&Image> = lr.iter().collect();
    let bank = Arc::new(LayerBank::from_levels(&hr_refs, &lr_refs, layer, side, context)?);
    let nloc = r.u32()?;
    let mut dictionaries = BTreeMap::new();
    for _ in 0..nloc {
        let rec = r.bytes()?;
        let mut rr = Reader { buf: rec, pos: 0 };
        let loc = PatchLocation::new(rr.u32()?, rr.u32()?, layer);
        let nsrc = rr.u32()?;
        let mut sources = Vec::with_capacity(nsrc);
        for _ in 0..nsrc {
            let (sx, sy, first, n) = (rr.u32()?, rr.u32()?, rr.u32()?, rr.u32()?);
            if first != 0 || n != count {
                return Err(Error::Format(format!(
                    "source record covers images {first}..{} of {count}; partial ranges are not supported",
                    first + n
                )));
            }
            sources.push(PatchLocation::new(sx, sy, layer));
        }
        if rr.pos != rec.len() {
            return Err(Error::Format("trailing bytes in location record".into()));
        }
        let mut dict = PatchDictionary::from_sources(loc, sources, Arc::clone(&bank))?;
        if backend == KnnBackend::KdTree {
            dict.build_index();
        }
        dictionaries.insert(loc, dict);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after archive".into()));
    }
    Ok((LayerModel { bank, dictionaries }, hash, window))
}

pub fn layer_paths(dir: &Path, class: &str, layer: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{class}.layer{layer}.psd")),
        dir.join(format!("{class}.layer{layer}.json")),
    )
}

/// Writes every layer of `model` under `dir`.
pub fn write_class_model(dir: &Path, class: &str, model: &ClassModel, schedule: &SynthesisSchedule) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let window = schedule.layers[l].window;
        let (bin, json) = layer_paths(dir, class, l);
        std::fs::write(&bin, encode_layer(layer, window, &model.schedule_hash)?)?;
        let sidecar = ArchiveSidecar {
            version: ARCHIVE_VERSION,
            config_hash: model.schedule_hash.clone(),
            class: class.to_string(),
            layer: l,
            patch_side: layer.bank.patch_side(),
            window,
            context: layer.bank.context(),
            image_count: layer.bank.image_count(),
            locations: layer.dictionaries.len(),
            pairs: layer.dictionaries.values().map(|d| d.len()).sum(),
        };
        std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
        written.push(bin);
        written.push(json);
    }
    Ok(written)
}

/// Loads a class model, refusing archives built under another schedule
/// unless `force` is set.
pub fn read_class_model(
    dir: &Path,
    class: &str,
    schedule: &SynthesisSchedule,
    backend: KnnBackend,
    force: bool,
) -> Result<ClassModel> {
    let expected = schedule.hash()?;
    let mut layers = Vec::with_capacity(schedule.depth());
    for l in 0..schedule.depth() {
        let (bin, _) = layer_paths(dir, class, l);
        let (layer, hash, _) = decode_layer(&std::fs::read(&bin)?, backend)?;
        if hash != expected && !force {
            return Err(Error::config(format!(
                "archive {} was built with config {hash}, current schedule is {expected}",
                bin.display()
            )));
        }
        layers.push(layer);
    }
    Ok(ClassModel {
        schedule_hash: expected,
        layers,
    })
}
