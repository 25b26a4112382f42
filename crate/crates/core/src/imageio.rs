//! Reading and writing 8-bit RGB images and labeled image directories.
//!
//! A labeled directory holds PNG/JPEG files plus a `labels.csv` with columns
//! `filename,class_id,cx,cy,w,h` (one row per object, pixel units).

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::detection::BoxXywh;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;

pub const LABELS_FILE: &str = "labels.csv";

/// Loads an image as `H x W x 3` values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn to_rgb8(img: &Array3<f64>) -> RgbImage {
    let (h, w, _) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    to_rgb8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// PNG/JPEG files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelRow {
    filename: String,
    class_id: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Labeled images in file-name order.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub filenames: Vec<String>,
    pub images: Vec<Array3<f64>>,
    pub ground_truth: Vec<Vec<GroundTruth>>,
}

pub fn write_labeled_dir(dir: &Path, images: &[Array3<f64>], ground_truth: &[Vec<GroundTruth>]) -> Result<()> {
    if images.len() != ground_truth.len() {
        return Err(Error::invalid("one ground-truth list per image is required"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = images.len().max(1).to_string().len().max(5);
    let labels_path = dir.join(LABELS_FILE);
    let mut writer = csv::Writer::from_path(&labels_path)?;
    for (i, (img, objects)) in images.iter().zip(ground_truth).enumerate() {
        let filename = format!("{i:0width$}.png");
        save_png(img, &dir.join(&filename))?;
        for gt in objects {
            writer.serialize(LabelRow {
                filename: filename.clone(),
                class_id: gt.class_id,
                cx: gt.bbox.cx,
                cy: gt.bbox.cy,
                w: gt.bbox.w,
                h: gt.bbox.h,
            })?;
        }
    }
    writer.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

/// Reads ground truth from `dir/labels.csv`, keyed by file name.
pub fn read_labels(dir: &Path) -> Result<std::collections::BTreeMap<String, Vec<GroundTruth>>> {
    let path = dir.join(LABELS_FILE);
    let mut reader = csv::Reader::from_path(&path)?;
    let mut map: std::collections::BTreeMap<String, Vec<GroundTruth>> = Default::default();
    for row in reader.deserialize() {
        let row: LabelRow = row?;
        map.entry(row.filename)
            .or_default()
            .push(GroundTruth { class_id: row.class_id, bbox: BoxXywh { cx: row.cx, cy: row.cy, w: row.w, h: row.h } });
    }
    Ok(map)
}

pub fn read_labeled_dir(dir: &Path) -> Result<LabeledImages> {
    let labels = read_labels(dir)?;
    let mut out = LabeledImages { filenames: Vec::new(), images: Vec::new(), ground_truth: Vec::new() };
    for path in list_images(dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        out.images.push(load_rgb(&path)?);
        out.ground_truth.push(labels.get(&name).cloned().unwrap_or_default());
        out.filenames.push(name);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::generate_scenes;

    #[test]
    fn labeled_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_scenes(3, 1).unwrap();
        let images: Vec<_> = scenes.scenes.iter().map(|s| s.image.clone()).collect();
        write_labeled_dir(dir.path(), &images, &scenes.ground_truth()).unwrap();
        let back = read_labeled_dir(dir.path()).unwrap();
        assert_eq!(back.filenames, vec!["00000.png", "00001.png", "00002.png"]);
        // Scene pixels are already quantized to 1/255, so PNG is lossless.
        assert_eq!(back.images, images);
        assert_eq!(back.ground_truth, scenes.ground_truth());
    }

    #[test]
    fn list_skips_non_images() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        fs::write(dir.path().join("b.PNG"), "x").unwrap();
        fs::write(dir.path().join("a.jpg"), "x").unwrap();
        let names: Vec<_> = list_images(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, vec!["a.jpg", "b.PNG"]);
    }
}
