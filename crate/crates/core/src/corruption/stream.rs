//! Ordered, reproducible corrupted streams with a CSV manifest.
//!
//! Image `i` (its position in the sorted source listing) is corrupted with
//! seed `per_image_seed(spec.seed, i)`, so skipping an unreadable file never
//! changes the pixels of any other image. Streamed images are quantized to
//! 8 bits, which makes an in-memory stream identical to one written to PNG
//! and read back.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::{apply_corruption, CorruptionKind, CorruptionSpec};
use crate::detector::{quantize, to_batch};
use crate::error::{Error, Result};
use crate::imageio::{list_images, load_rgb, save_png};
use crate::rng::derive_seed;
use crate::tta::ImageBatch;

pub const STATUS_OK: &str = "ok";

pub fn per_image_seed(stream_seed: u64, index: usize) -> u64 {
    derive_seed(stream_seed, &[index as u64])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub filename: String,
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
    /// `ok`, or `skipped: <reason>`.
    pub status: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn skipped(&self) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(|r| r.status != STATUS_OK)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(row)?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Batches of corrupted images, produced lazily in manifest order.
#[derive(Debug, Clone)]
pub struct CorruptedStream {
    clean: Arc<Vec<Array3<f64>>>,
    /// Source index of each streamed image (its seed key).
    source_index: Vec<usize>,
    spec: CorruptionSpec,
    batch_size: usize,
    cursor: usize,
}

impl CorruptedStream {
    fn new(
        clean: Arc<Vec<Array3<f64>>>,
        source_index: Vec<usize>,
        spec: CorruptionSpec,
        batch_size: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(Self { clean, source_index, spec, batch_size, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.source_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_index.is_empty()
    }

    pub fn spec(&self) -> &CorruptionSpec {
        &self.spec
    }

    fn corrupt(&self, pos: usize) -> Result<Array3<f64>> {
        let spec = self.spec.with_seed(per_image_seed(self.spec.seed, self.source_index[pos]));
        let mut out = apply_corruption(self.clean[pos].view(), &spec)?;
        out.mapv_inplace(quantize);
        Ok(out)
    }
}

impl Iterator for CorruptedStream {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.len() {
            return None;
        }
        let first = self.cursor;
        let end = (first + self.batch_size).min(self.len());
        self.cursor = end;
        let images: Result<Vec<Array3<f64>>> = (first..end).map(|p| self.corrupt(p)).collect();
        Some(images.map(|imgs| {
            let views: Vec<ArrayView3<'_, f64>> = imgs.iter().map(|i| i.view()).collect();
            ImageBatch { first_index: first, images: to_batch(&views) }
        }))
    }
}

/// Stream over images already in memory; image `i` uses source index `i`.
pub fn in_memory_batches(
    clean: Arc<Vec<Array3<f64>>>,
    spec: CorruptionSpec,
    batch_size: usize,
) -> Result<CorruptedStream> {
    let n = clean.len();
    CorruptedStream::new(clean, (0..n).collect(), spec, batch_size)
}

/// Corrupts every image (quantized, as streamed).
pub fn corrupt_all(clean: &[Array3<f64>], spec: &CorruptionSpec) -> Result<Vec<Array3<f64>>> {
    let stream = in_memory_batches(Arc::new(clean.to_vec()), *spec, 1)?;
    (0..stream.len()).map(|p| stream.corrupt(p)).collect()
}

fn manifest_row(index: usize, filename: String, spec: &CorruptionSpec, status: String) -> ManifestRow {
    ManifestRow {
        index,
        filename,
        kind: spec.kind,
        severity: spec.severity,
        seed: per_image_seed(spec.seed, index),
        status,
    }
}

/// Reads the PNG/JPEG files of `clean_dir` in name order. Files that fail
/// to decode are marked skipped in the manifest and left out of the stream.
pub fn build_stream(clean_dir: &Path, spec: CorruptionSpec, batch_size: usize) -> Result<(CorruptedStream, Manifest)> {
    spec.validate()?;
    let mut clean = Vec::new();
    let mut source_index = Vec::new();
    let mut manifest = Manifest::default();
    for (index, path) in list_images(clean_dir)?.into_iter().enumerate() {
        let filename = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let status = match load_rgb(&path) {
            Ok(img) if img.dim().2 == 3 => {
                clean.push(img);
                source_index.push(index);
                STATUS_OK.to_string()
            }
            Ok(img) => format!("skipped: unexpected shape {:?}", img.dim()),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                format!("skipped: {e}")
            }
        };
        manifest.rows.push(manifest_row(index, filename, &spec, status));
    }
    let stream = CorruptedStream::new(Arc::new(clean), source_index, spec, batch_size)?;
    Ok((stream, manifest))
}

/// Writes the corrupted version of every readable image in `clean_dir` to
/// `out_dir` as PNG (same stem), plus `manifest.csv`.
pub fn materialize(clean_dir: &Path, out_dir: &Path, spec: CorruptionSpec) -> Result<Manifest> {
    let (stream, manifest) = build_stream(clean_dir, spec, 1)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ok_rows: Vec<&ManifestRow> = manifest.rows.iter().filter(|r| r.status == STATUS_OK).collect();
    for (pos, row) in ok_rows.iter().enumerate() {
        let img = stream.corrupt(pos)?;
        let stem = Path::new(&row.filename).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_png(&img, &out_dir.join(format!("{stem}.png")))?;
    }
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
