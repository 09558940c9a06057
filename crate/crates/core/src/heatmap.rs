//! Ground-truth Gaussian rendering and argmax decoding.

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetMeta, HeatmapKind, HeatmapStack, Keypoint, HEATMAP_STRIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Gaussian width in heatmap cells.
    pub sigma: f64,
    /// Cut-off distance as a multiple of `sigma`.
    pub truncate_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            truncate_radius: 3.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.truncate_radius >= 1.0 && self.truncate_radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "truncate_radius must be >= 1, got {}",
                self.truncate_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedHeatmaps {
    pub stack: HeatmapStack,
    /// Visible keypoints whose Gaussian support missed the grid entirely.
    pub off_grid: Vec<usize>,
}

/// Renders one unit-peak Gaussian per visible keypoint; invisible channels
/// stay zero.
pub fn render_heatmaps(
    keypoints: &[Keypoint],
    meta: &DatasetMeta,
    cfg: &RenderConfig,
) -> Result<RenderedHeatmaps> {
    cfg.validate()?;
    let k = meta.num_keypoints();
    if keypoints.len() != k {
        return Err(Error::Shape {
            expected: format!("{k} keypoints"),
            actual: format!("{} keypoints", keypoints.len()),
        });
    }
    let (hh, hw) = meta.heatmap_size;
    let mut values = Array3::<f64>::zeros((k, hh, hw));
    let mut off_grid = Vec::new();
    let scale = HEATMAP_STRIDE as f64;
    let radius = cfg.truncate_radius * cfg.sigma;
    let two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;

    for (i, kp) in keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let cx = kp.x / scale;
        let cy = kp.y / scale;
        let r0 = (cy - radius).ceil().max(0.0);
        let r1 = (cy + radius).floor().min(hh as f64 - 1.0);
        let c0 = (cx - radius).ceil().max(0.0);
        let c1 = (cx + radius).floor().min(hw as f64 - 1.0);
        let mut touched = false;
        if r0 <= r1 && c0 <= c1 {
            let mut channel = values.index_axis_mut(ndarray::Axis(0), i);
            for r in r0 as usize..=r1 as usize {
                for c in c0 as usize..=c1 as usize {
                    let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                    if d2.sqrt() <= radius {
                        channel[[r, c]] = (-d2 / two_sigma_sq).exp();
                        touched = true;
                    }
                }
            }
        }
        if !touched {
            off_grid.push(i);
        }
    }

    Ok(RenderedHeatmaps {
        stack: HeatmapStack::new(values, HeatmapKind::GroundTruth),
        off_grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Row-major argmax of one channel; the first occurrence wins ties and NaN
/// cells are never selected. Returns `(row, col, value)`.
pub fn argmax_cell(channel: ArrayView2<'_, f64>) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for ((r, c), &v) in channel.indexed_iter() {
        if v > best.2 {
            best = (r, c, v);
        }
    }
    if best.2 == f64::NEG_INFINITY {
        best.2 = channel.first().copied().unwrap_or(0.0);
    }
    best
}

/// Decodes one peak per channel and maps it back to input pixels.
pub fn decode_peaks(stack: &HeatmapStack, meta: &DatasetMeta) -> Result<Vec<Peak>> {
    let (k, h, w) = stack.values.dim();
    if k != meta.num_keypoints() || (h, w) != meta.heatmap_size {
        return Err(Error::Shape {
            expected: format!(
                "({}, {}, {})",
                meta.num_keypoints(),
                meta.heatmap_size.0,
                meta.heatmap_size.1
            ),
            actual: format!("({k}, {h}, {w})"),
        });
    }
    let scale = HEATMAP_STRIDE as f64;
    Ok(stack
        .values
        .outer_iter()
        .map(|channel| {
            let (r, c, score) = argmax_cell(channel);
            Peak {
                x: scale * c as f64,
                y: scale * r as f64,
                score,
            }
        })
        .collect())
}
