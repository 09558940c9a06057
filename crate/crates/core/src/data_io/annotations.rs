//! Generic annotation JSON plus image files on disk.
//!
//! ```json
//! {"meta": {"keypoint_names": ["a", "b"], "input_size": [H, W]},
//!  "images": [{"id": "0", "file": "images/0.ppm", "bbox": [x, y, w, h],
//!              "head_bbox": null, "keypoints": [[x, y, v], ...]}]}
//! ```
//!
//! `keypoints: null` marks an unlabeled image. Image paths are relative to
//! the annotation file. Images must already be at the input size.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datamodel::{validate_sample, BBox, Dataset, DatasetMeta, ImageSample, Keypoint};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub keypoint_names: Vec<String>,
    pub input_size: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub head_bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub keypoints: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub meta: MetaRecord,
    pub images: Vec<ImageRecord>,
}

pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb8 buffer"))
}

/// Writes an image, format chosen by extension; values are rounded to 8 bits.
pub fn write_image(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let raw: Vec<u8> = pixels
        .as_standard_layout()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from the array");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn record_error(id: &str, message: impl Into<String>) -> Error {
    Error::Annotation {
        record: id.to_string(),
        message: message.into(),
    }
}

fn sample_from_record(rec: &ImageRecord, base: &Path, meta: &DatasetMeta) -> Result<ImageSample> {
    let keypoints = match &rec.keypoints {
        None => None,
        Some(kps) => Some(
            kps.iter()
                .enumerate()
                .map(|(i, &[x, y, v])| match v {
                    0.0 => Ok(Keypoint::hidden(x, y)),
                    1.0 => Ok(Keypoint::visible(x, y)),
                    _ => Err(record_error(
                        &rec.id,
                        format!("keypoint {i}: visibility must be 0 or 1, got {v}"),
                    )),
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let pixels =
        read_image(&base.join(&rec.file)).map_err(|e| record_error(&rec.id, e.to_string()))?;
    let sample = ImageSample {
        id: rec.id.clone(),
        pixels,
        bbox: BBox::from_array(rec.bbox),
        head_bbox: rec.head_bbox.map(BBox::from_array),
        labeled: keypoints.is_some(),
        keypoints,
    };
    let report = validate_sample(&sample, meta);
    if !report.is_ok() {
        return Err(record_error(&rec.id, report.messages().join("; ")));
    }
    Ok(sample)
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).at(path)?;
    let file: AnnotationFile = serde_json::from_str(&text)?;
    let [h, w] = file.meta.input_size;
    let meta = DatasetMeta::new(file.meta.keypoint_names, (h, w))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(file.images.len());
    for rec in &file.images {
        if !seen.insert(rec.id.as_str()) {
            return Err(record_error(&rec.id, "duplicate image id"));
        }
        samples.push(sample_from_record(rec, base, &meta)?);
    }
    Ok(Dataset { meta, samples })
}

/// Writes `annotations.json` and one PPM per image under `dir/images`.
/// Returns the annotation file path.
pub fn save_annotations(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).at(dir)?;
    let mut images = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let file = format!("images/{}.ppm", s.id);
        write_image(&dir.join(&file), &s.pixels)?;
        images.push(ImageRecord {
            id: s.id.clone(),
            file,
            bbox: s.bbox.to_array(),
            head_bbox: s.head_bbox.map(BBox::to_array),
            keypoints: if s.labeled {
                s.keypoints.as_ref().map(|k| {
                    k.iter()
                        .map(|p| [p.x, p.y, if p.visible { 1.0 } else { 0.0 }])
                        .collect()
                })
            } else {
                None
            },
        });
    }
    let file = AnnotationFile {
        meta: MetaRecord {
            keypoint_names: ds.meta.keypoint_names.clone(),
            input_size: [ds.meta.input_size.0, ds.meta.input_size.1],
        },
        images,
    };
    let path = dir.join("annotations.json");
    fs::write(&path, serde_json::to_vec_pretty(&file)?).at(&path)?;
    Ok(path)
}
