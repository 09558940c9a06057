//! Browser demo over three core operations. Each operation has a plain Rust
//! entry point, which the tests call, and a thin wasm-bindgen wrapper that
//! hands JSON to the page.

use kps_core::datamodel::{BBox, DatasetMeta, HeatmapStack, Keypoint};
use kps_core::evaluation::pck_score;
use kps_core::heatmap::{decode_peaks, render_heatmaps, Peak, RenderConfig};
use kps_core::warp::{sample_warp, warp_heatmaps, warp_points};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub type DemoResult<T> = Result<T, String>;

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapView {
    /// Heatmap grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Channel-wise maximum, row-major.
    pub max_map: Vec<f64>,
    pub peaks: Vec<Peak>,
    pub off_grid: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WarpView {
    pub grid: (usize, usize),
    /// Rendered heatmaps, then warped on the grid.
    pub warped_render: Vec<f64>,
    /// Keypoints warped first, then rendered.
    pub render_warped: Vec<f64>,
    pub warped_points: Vec<(f64, f64, bool)>,
    pub peaks_warped_render: Vec<Peak>,
    pub peaks_render_warped: Vec<Peak>,
    pub max_abs_diff: f64,
    /// Frame corners after the warp, for drawing the quadrilateral.
    pub corners: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PckView {
    pub distance: f64,
    pub radius: f64,
    pub correct: bool,
}

fn meta(size: usize, k: usize) -> DemoResult<DatasetMeta> {
    let names = (0..k).map(|i| format!("k{i}")).collect();
    DatasetMeta::new(names, (size, size)).map_err(|e| e.to_string())
}

fn keypoints(xy: &[f64]) -> DemoResult<Vec<Keypoint>> {
    if xy.is_empty() || !xy.len().is_multiple_of(2) {
        return Err(format!("expected x,y pairs, got {} numbers", xy.len()));
    }
    Ok(xy
        .chunks(2)
        .map(|p| Keypoint::visible(p[0], p[1]))
        .collect())
}

fn max_map(stack: &HeatmapStack) -> Vec<f64> {
    let (_, h, w) = stack.values.dim();
    let mut out = vec![0.0f64; h * w];
    for ch in stack.values.outer_iter() {
        for ((r, c), &v) in ch.indexed_iter() {
            out[r * w + c] = out[r * w + c].max(v);
        }
    }
    out
}

/// Renders one Gaussian per point on a `size`×`size` input and decodes it.
pub fn render_and_decode(xy: &[f64], size: usize, sigma: f64) -> DemoResult<HeatmapView> {
    let kps = keypoints(xy)?;
    let m = meta(size, kps.len())?;
    let cfg = RenderConfig {
        sigma,
        ..RenderConfig::default()
    };
    let r = render_heatmaps(&kps, &m, &cfg).map_err(|e| e.to_string())?;
    Ok(HeatmapView {
        grid: m.heatmap_size,
        max_map: max_map(&r.stack),
        peaks: decode_peaks(&r.stack, &m).map_err(|e| e.to_string())?,
        off_grid: r.off_grid,
    })
}

/// Compares warping rendered heatmaps against rendering warped points.
pub fn warp_commutation(
    xy: &[f64],
    size: usize,
    sigma: f64,
    gamma: f64,
    seed: u64,
) -> DemoResult<WarpView> {
    let kps = keypoints(xy)?;
    let m = meta(size, kps.len())?;
    let cfg = RenderConfig {
        sigma,
        ..RenderConfig::default()
    };
    let spec = sample_warp(&m, gamma, seed).map_err(|e| e.to_string())?;
    let rendered = render_heatmaps(&kps, &m, &cfg)
        .map_err(|e| e.to_string())?
        .stack;
    let a = warp_heatmaps(&rendered, &spec, &m).map_err(|e| e.to_string())?;

    let pts: Vec<(f64, f64)> = kps.iter().map(|k| (k.x, k.y)).collect();
    let moved = warp_points(&pts, &spec);
    let moved_kps: Vec<Keypoint> = moved
        .iter()
        .map(|p| Keypoint::new(p.x, p.y, p.inside))
        .collect();
    let b = render_heatmaps(&moved_kps, &m, &cfg)
        .map_err(|e| e.to_string())?
        .stack;

    let max_abs_diff = a
        .values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let s = size as f64;
    let corners = warp_points(&[(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)], &spec)
        .into_iter()
        .map(|p| (p.x, p.y))
        .collect();
    Ok(WarpView {
        grid: m.heatmap_size,
        warped_render: max_map(&a),
        render_warped: max_map(&b),
        warped_points: moved.iter().map(|p| (p.x, p.y, p.inside)).collect(),
        peaks_warped_render: decode_peaks(&a, &m).map_err(|e| e.to_string())?,
        peaks_render_warped: decode_peaks(&b, &m).map_err(|e| e.to_string())?,
        max_abs_diff,
        corners,
    })
}

/// Scores one prediction against one ground-truth point, normalised by the
/// longer side of a `w`×`h` box.
pub fn pck_single(
    pred: (f64, f64),
    gt: (f64, f64),
    w: f64,
    h: f64,
    alpha: f64,
) -> DemoResult<PckView> {
    let bbox = BBox::new(0.0, 0.0, w, h);
    let score = pck_score(
        &[vec![pred]],
        &[vec![Keypoint::visible(gt.0, gt.1)]],
        &[bbox],
        alpha,
    )
    .map_err(|e| e.to_string())?;
    Ok(PckView {
        distance: (pred.0 - gt.0).hypot(pred.1 - gt.1),
        radius: alpha * bbox.max_side(),
        correct: score.correct == 1,
    })
}

fn to_js<T: Serialize>(r: DemoResult<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = renderAndDecode)]
pub fn render_and_decode_js(xy: Vec<f64>, size: usize, sigma: f64) -> Result<String, JsError> {
    to_js(render_and_decode(&xy, size, sigma))
}

#[wasm_bindgen(js_name = warpCommutation)]
pub fn warp_commutation_js(
    xy: Vec<f64>,
    size: usize,
    sigma: f64,
    gamma: f64,
    seed: u32,
) -> Result<String, JsError> {
    to_js(warp_commutation(&xy, size, sigma, gamma, seed as u64))
}

#[wasm_bindgen(js_name = pckSingle)]
pub fn pck_single_js(
    px: f64,
    py: f64,
    gx: f64,
    gy: f64,
    w: f64,
    h: f64,
    alpha: f64,
) -> Result<String, JsError> {
    to_js(pck_single((px, py), (gx, gy), w, h, alpha))
}
