//! Domain types shared across the crate.
//!
//! Coordinates are continuous input-pixel units with the origin at the
//! centre of the top-left pixel. Heatmaps live on a grid four times coarser,
//! so input point `(x, y)` lands on heatmap cell `(y / 4, x / 4)`.

use std::collections::HashSet;
use std::fmt;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input pixels per heatmap cell along each axis.
pub const HEATMAP_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn diagonal(&self) -> f64 {
        (self.w * self.w + self.h * self.h).sqrt()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn visible(x: f64, y: f64) -> Self {
        Self::new(x, y, true)
    }

    pub fn hidden(x: f64, y: f64) -> Self {
        Self::new(x, y, false)
    }
}

/// One image with optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `(H_in, W_in, 3)`, values in `[0, 1]`.
    pub pixels: Array3<f32>,
    pub bbox: BBox,
    pub head_bbox: Option<BBox>,
    pub keypoints: Option<Vec<Keypoint>>,
    pub labeled: bool,
}

impl ImageSample {
    pub fn visibility(&self) -> Option<Vec<bool>> {
        self.keypoints
            .as_ref()
            .map(|kps| kps.iter().map(|k| k.visible).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub keypoint_names: Vec<String>,
    /// `(H_in, W_in)`
    pub input_size: (usize, usize),
    /// `(H_hm, W_hm)`
    pub heatmap_size: (usize, usize),
}

impl DatasetMeta {
    /// Builds metadata with the heatmap grid derived from the input size.
    pub fn new(keypoint_names: Vec<String>, input_size: (usize, usize)) -> Result<Self> {
        let meta = Self {
            keypoint_names,
            input_size,
            heatmap_size: (input_size.0 / HEATMAP_STRIDE, input_size.1 / HEATMAP_STRIDE),
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.keypoint_names.len();
        if k < 2 {
            return Err(Error::InvalidMeta(format!(
                "need K >= 2 keypoints, got {k}"
            )));
        }
        let unique: HashSet<&str> = self.keypoint_names.iter().map(String::as_str).collect();
        if unique.len() != k {
            return Err(Error::InvalidMeta("duplicate keypoint names".into()));
        }
        let (h, w) = self.input_size;
        let (hh, hw) = self.heatmap_size;
        if hh == 0 || hw == 0 || h != HEATMAP_STRIDE * hh || w != HEATMAP_STRIDE * hw {
            return Err(Error::InvalidMeta(format!(
                "input size {h}x{w} must be exactly {HEATMAP_STRIDE}x the heatmap size {hh}x{hw}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    GroundTruth,
    Predicted,
}

/// `K` spatial score maps on the heatmap grid, indexed `[keypoint, row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub values: Array3<f64>,
    pub kind: HeatmapKind,
}

impl HeatmapStack {
    pub fn new(values: Array3<f64>, kind: HeatmapKind) -> Self {
        Self { values, kind }
    }

    pub fn zeros(k: usize, h: usize, w: usize, kind: HeatmapKind) -> Self {
        Self::new(Array3::zeros((k, h, w)), kind)
    }

    pub fn num_keypoints(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// Weights of the supervised, semantic-consistency, equivariance and
/// invariance terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1e3,
            lambda2: 0.5,
            lambda3: 1e2,
            lambda4: 1e2,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in self
            .as_array()
            .iter()
            .zip(["lambda1", "lambda2", "lambda3", "lambda4"])
        {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingKeypoints,
    KeypointCount {
        expected: usize,
        actual: usize,
    },
    DegenerateBbox,
    NonFiniteCoordinate {
        index: usize,
    },
    VisibleOutOfBounds {
        index: usize,
    },
    PixelShape {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    PixelRange,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingKeypoints => write!(f, "labeled sample without keypoints"),
            Violation::KeypointCount { expected, actual } => {
                write!(f, "keypoint count: expected {expected}, got {actual}")
            }
            Violation::DegenerateBbox => write!(f, "degenerate bbox"),
            Violation::NonFiniteCoordinate { index } => {
                write!(f, "non-finite coordinate for keypoint {index}")
            }
            Violation::VisibleOutOfBounds { index } => {
                write!(f, "visible keypoint {index} outside the image")
            }
            Violation::PixelShape { expected, actual } => {
                write!(f, "pixel shape: expected {expected:?}, got {actual:?}")
            }
            Violation::PixelRange => write!(f, "pixel values outside [0, 1]"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// Checks every sample invariant against `meta`. Never fails; all problems
/// come back in the report.
pub fn validate_sample(sample: &ImageSample, meta: &DatasetMeta) -> ValidationReport {
    let mut violations = Vec::new();
    let (h_in, w_in) = meta.input_size;

    let dims = sample.pixels.dim();
    if dims != (h_in, w_in, 3) {
        violations.push(Violation::PixelShape {
            expected: (h_in, w_in, 3),
            actual: dims,
        });
    }
    if sample
        .pixels
        .iter()
        .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
    {
        violations.push(Violation::PixelRange);
    }

    let b = &sample.bbox;
    let finite = [b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite());
    if !finite || b.w <= 0.0 || b.h <= 0.0 {
        violations.push(Violation::DegenerateBbox);
    }

    match &sample.keypoints {
        None if sample.labeled => violations.push(Violation::MissingKeypoints),
        None => {}
        Some(kps) => {
            if kps.len() != meta.num_keypoints() {
                violations.push(Violation::KeypointCount {
                    expected: meta.num_keypoints(),
                    actual: kps.len(),
                });
            }
            for (index, kp) in kps.iter().enumerate() {
                if !kp.x.is_finite() || !kp.y.is_finite() {
                    violations.push(Violation::NonFiniteCoordinate { index });
                } else if kp.visible
                    && !(kp.x >= 0.0 && kp.x < w_in as f64 && kp.y >= 0.0 && kp.y < h_in as f64)
                {
                    violations.push(Violation::VisibleOutOfBounds { index });
                }
            }
        }
    }

    ValidationReport { violations }
}

/// A collection of samples sharing one metadata block.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Validates every sample, failing on the first offender.
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        for s in &self.samples {
            let report = validate_sample(s, &self.meta);
            if !report.is_ok() {
                return Err(Error::InvalidSample {
                    id: s.id.clone(),
                    violations: report.messages(),
                });
            }
        }
        Ok(())
    }

    /// Splits off a contiguous subset by index range, keeping metadata.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.samples[range].to_vec(),
        }
    }
}
