//! Random perspective warps and their application to images, points and
//! heatmap stacks.
//!
//! A [`WarpSpec`] holds the homography `H` taking source coordinates to
//! warped coordinates. Resampling looks each output location up at `H⁻¹·p`
//! with bilinear interpolation and zero fill.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetMeta, HeatmapStack, HEATMAP_STRIDE};
use crate::error::{Error, Result};

pub const MAX_SAMPLING_ATTEMPTS: usize = 10;
const MIN_ABS_DET: f64 = 1e-9;
const MIN_ABS_W: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    /// Row-major homography, normalised so that `h[2][2] == 1`.
    pub h: [[f64; 3]; 3],
    /// Corner displacements `(dx, dy)` in input pixels, clockwise from the
    /// top-left corner. `h` maps `corner + offset` onto `corner`.
    pub corner_offsets: [(f64, f64); 4],
    pub seed: u64,
    /// `(H_in, W_in)` of the frame the corners refer to.
    pub frame: (usize, usize),
}

fn corners(frame: (usize, usize)) -> [(f64, f64); 4] {
    let (h, w) = (frame.0 as f64 - 1.0, frame.1 as f64 - 1.0);
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

fn to_matrix(h: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| h[r][c])
}

fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

fn project(m: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let p = m * Vector3::new(x, y, 1.0);
    if p.z.abs() < MIN_ABS_W {
        None
    } else {
        Some((p.x / p.z, p.y / p.z))
    }
}

/// Solves for the homography taking each `src[i]` to `dst[i]`.
pub fn homography_from_points(
    src: &[(f64, f64); 4],
    dst: &[(f64, f64); 4],
) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let sol = a.lu().solve(&b)?;
    Some(Matrix3::new(
        sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
    ))
}

fn is_convex(quad: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (x0, y0) = quad[i];
        let (x1, y1) = quad[(i + 1) % 4];
        let (x2, y2) = quad[(i + 2) % 4];
        let cross = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1);
        if cross == 0.0 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

impl WarpSpec {
    pub fn identity(frame: (usize, usize)) -> Self {
        Self {
            h: from_matrix(&Matrix3::identity()),
            corner_offsets: [(0.0, 0.0); 4],
            seed: 0,
            frame,
        }
    }

    /// Wraps an arbitrary homography; the corner offsets are recovered as the
    /// points `H` sends onto the frame corners.
    pub fn from_homography(h: Matrix3<f64>, frame: (usize, usize)) -> Result<Self> {
        let det = h.determinant();
        if det.abs() <= MIN_ABS_DET || h[(2, 2)].abs() < MIN_ABS_W {
            return Err(Error::SingularWarp { det });
        }
        let h = h / h[(2, 2)];
        let inv = h.try_inverse().ok_or(Error::SingularWarp { det })?;
        let mut corner_offsets = [(0.0, 0.0); 4];
        for (off, &(cx, cy)) in corner_offsets.iter_mut().zip(corners(frame).iter()) {
            let (sx, sy) = project(&inv, cx, cy).ok_or(Error::SingularWarp { det })?;
            *off = (sx - cx, sy - cy);
        }
        Ok(Self {
            h: from_matrix(&h),
            corner_offsets,
            seed: 0,
            frame,
        })
    }

    pub fn translation(dx: f64, dy: f64, frame: (usize, usize)) -> Self {
        Self::from_homography(
            Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
            frame,
        )
        .expect("translations are invertible")
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        to_matrix(&self.h)
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn is_identity(&self) -> bool {
        self.matrix() == Matrix3::identity()
    }

    /// Homography conjugated onto the heatmap grid.
    pub fn heatmap_matrix(&self) -> Matrix3<f64> {
        let s = HEATMAP_STRIDE as f64;
        let down = Matrix3::new(1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0, 0.0, 0.0, 1.0);
        let up = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
        down * self.matrix() * up
    }
}

/// Draws corner displacements uniformly in `[-γ·side, γ·side]` and builds
/// the homography mapping the displaced quadrilateral onto the frame.
/// Non-convex or near-singular draws are retried.
pub fn sample_warp(meta: &DatasetMeta, gamma: f64, rng_seed: u64) -> Result<WarpSpec> {
    if !(0.0..0.5).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "warp gamma must lie in [0, 0.5), got {gamma}"
        )));
    }
    let frame = meta.input_size;
    let (max_dy, max_dx) = (gamma * frame.0 as f64, gamma * frame.1 as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dst = corners(frame);
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let mut offsets = [(0.0, 0.0); 4];
        for o in offsets.iter_mut() {
            let ux: f64 = rng.random();
            let uy: f64 = rng.random();
            *o = ((2.0 * ux - 1.0) * max_dx, (2.0 * uy - 1.0) * max_dy);
        }
        let mut src = dst;
        for (s, o) in src.iter_mut().zip(offsets.iter()) {
            s.0 += o.0;
            s.1 += o.1;
        }
        if !is_convex(&src) {
            continue;
        }
        let Some(h) = homography_from_points(&src, &dst) else {
            continue;
        };
        if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() <= MIN_ABS_DET {
            continue;
        }
        return Ok(WarpSpec {
            h: from_matrix(&h),
            corner_offsets: offsets,
            seed: rng_seed,
            frame,
        });
    }
    Err(Error::WarpSampling {
        attempts: MAX_SAMPLING_ATTEMPTS,
    })
}

/// Returns the spec for `H⁻¹`, renormalised so its bottom-right entry is 1.
pub fn invert_warp(spec: &WarpSpec) -> Result<WarpSpec> {
    let m = spec.matrix();
    let det = m.determinant();
    if det.abs() <= MIN_ABS_DET {
        return Err(Error::SingularWarp { det });
    }
    let inv = m.try_inverse().ok_or(Error::SingularWarp { det })?;
    let mut out = WarpSpec::from_homography(inv, spec.frame)?;
    out.seed = spec.seed;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpedPoint {
    pub x: f64,
    pub y: f64,
    pub inside: bool,
}

/// Applies `H` projectively. Points at infinity come back as `(-1, -1)`
/// flagged outside.
pub fn warp_points(points: &[(f64, f64)], spec: &WarpSpec) -> Vec<WarpedPoint> {
    let m = spec.matrix();
    let (fh, fw) = (spec.frame.0 as f64, spec.frame.1 as f64);
    points
        .iter()
        .map(|&(x, y)| match project(&m, x, y) {
            Some((px, py)) => WarpedPoint {
                x: px,
                y: py,
                inside: px >= 0.0 && px < fw && py >= 0.0 && py < fh,
            },
            None => WarpedPoint {
                x: -1.0,
                y: -1.0,
                inside: false,
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    index: u32,
    weight: f64,
}

/// Precomputed bilinear lookup for one destination grid: cell `p` of the
/// output reads the source at `lookup·p`.
///
/// The sampler is a sparse linear map, so it also provides its adjoint,
/// which the training losses need for gradients through a warp.
#[derive(Debug, Clone)]
pub struct GridSampler {
    out_shape: (usize, usize),
    src_shape: (usize, usize),
    /// Four taps per output cell; out-of-range taps carry zero weight.
    taps: Vec<[Tap; 4]>,
    /// Output cells whose lookup lies inside the source grid.
    inside: Vec<bool>,
}

impl GridSampler {
    pub fn new(
        lookup: &Matrix3<f64>,
        out_shape: (usize, usize),
        src_shape: (usize, usize),
    ) -> Self {
        let (oh, ow) = out_shape;
        let (sh, sw) = src_shape;
        let mut taps = Vec::with_capacity(oh * ow);
        let mut inside = Vec::with_capacity(oh * ow);
        let zero = Tap {
            index: 0,
            weight: 0.0,
        };
        for r in 0..oh {
            for c in 0..ow {
                let mut cell = [zero; 4];
                let mut in_frame = false;
                if let Some((sx, sy)) = project(lookup, c as f64, r as f64) {
                    in_frame =
                        sx >= 0.0 && sx <= (sw - 1) as f64 && sy >= 0.0 && sy <= (sh - 1) as f64;
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let corners = [
                        (x0, y0, (1.0 - fx) * (1.0 - fy)),
                        (x0 + 1.0, y0, fx * (1.0 - fy)),
                        (x0, y0 + 1.0, (1.0 - fx) * fy),
                        (x0 + 1.0, y0 + 1.0, fx * fy),
                    ];
                    for (slot, &(x, y, w)) in cell.iter_mut().zip(corners.iter()) {
                        if w != 0.0 && x >= 0.0 && y >= 0.0 && x < sw as f64 && y < sh as f64 {
                            *slot = Tap {
                                index: (y as usize * sw + x as usize) as u32,
                                weight: w,
                            };
                        }
                    }
                }
                taps.push(cell);
                inside.push(in_frame);
            }
        }
        Self {
            out_shape,
            src_shape,
            taps,
            inside,
        }
    }

    /// Sampler realising `warp` on the heatmap grid of `meta`.
    pub fn for_heatmaps(spec: &WarpSpec, meta: &DatasetMeta) -> Result<Self> {
        let hm = spec.heatmap_matrix();
        let inv = hm.try_inverse().ok_or(Error::SingularWarp {
            det: hm.determinant(),
        })?;
        Ok(Self::new(&inv, meta.heatmap_size, meta.heatmap_size))
    }

    /// Sampler realising the inverse of `warp` on the heatmap grid: cell `p`
    /// reads the warped frame at `H·p`.
    pub fn inverse_for_heatmaps(spec: &WarpSpec, meta: &DatasetMeta) -> Result<Self> {
        let det = spec.determinant();
        if det.abs() <= MIN_ABS_DET {
            return Err(Error::SingularWarp { det });
        }
        Ok(Self::new(
            &spec.heatmap_matrix(),
            meta.heatmap_size,
            meta.heatmap_size,
        ))
    }

    pub fn inside_mask(&self) -> &[bool] {
        &self.inside
    }

    pub fn apply(&self, src: ArrayView2<'_, f64>, mut dst: ArrayViewMut2<'_, f64>) {
        debug_assert_eq!(src.dim(), self.src_shape);
        debug_assert_eq!(dst.dim(), self.out_shape);
        let src = src.as_standard_layout();
        let s = src.as_slice().expect("standard layout");
        for (out, cell) in dst.iter_mut().zip(&self.taps) {
            *out = cell.iter().map(|t| t.weight * s[t.index as usize]).sum();
        }
    }

    /// Accumulates the adjoint: `src_grad += Sᵀ·dst_grad`.
    pub fn apply_adjoint(&self, dst_grad: ArrayView2<'_, f64>, src_grad: &mut Array2<f64>) {
        debug_assert_eq!(dst_grad.dim(), self.out_shape);
        let g = src_grad.as_slice_mut().expect("standard layout");
        for (&d, cell) in dst_grad.iter().zip(&self.taps) {
            if d == 0.0 {
                continue;
            }
            for t in cell {
                g[t.index as usize] += t.weight * d;
            }
        }
    }

    pub fn apply_stack(&self, stack: &Array3<f64>) -> Array3<f64> {
        let (k, _, _) = stack.dim();
        let mut out = Array3::zeros((k, self.out_shape.0, self.out_shape.1));
        for (src, dst) in stack.outer_iter().zip(out.outer_iter_mut()) {
            self.apply(src, dst);
        }
        out
    }

    pub fn adjoint_stack(&self, grad: &Array3<f64>) -> Array3<f64> {
        let (k, _, _) = grad.dim();
        let mut out = Array3::zeros((k, self.src_shape.0, self.src_shape.1));
        for (g, mut o) in grad.outer_iter().zip(out.outer_iter_mut()) {
            let mut tmp = Array2::zeros(self.src_shape);
            self.apply_adjoint(g, &mut tmp);
            o.assign(&tmp);
        }
        out
    }
}

/// Resamples an `(H, W, C)` image under the warp; samples falling outside the
/// source read as zero.
pub fn warp_image(pixels: &Array3<f32>, spec: &WarpSpec) -> Array3<f32> {
    let (h, w, ch) = pixels.dim();
    let Some(inv) = spec.matrix().try_inverse() else {
        return Array3::zeros((h, w, ch));
    };
    let mut out = Array3::<f32>::zeros((h, w, ch));
    let src = pixels.as_standard_layout();
    let s = src.as_slice().expect("standard layout");
    let out_slice = out.as_slice_mut().expect("fresh array");
    for r in 0..h {
        for c in 0..w {
            let Some((sx, sy)) = project(&inv, c as f64, r as f64) else {
                continue;
            };
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let base = (r * w + c) * ch;
            for (x, y, wt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ] {
                if wt == 0.0 || x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    continue;
                }
                let sb = (y as usize * w + x as usize) * ch;
                for k in 0..ch {
                    out_slice[base + k] += wt as f32 * s[sb + k];
                }
            }
        }
    }
    out
}

/// Warps every channel of a heatmap stack on the heatmap grid.
pub fn warp_heatmaps(
    stack: &HeatmapStack,
    spec: &WarpSpec,
    meta: &DatasetMeta,
) -> Result<HeatmapStack> {
    let sampler = GridSampler::for_heatmaps(spec, meta)?;
    Ok(HeatmapStack::new(
        sampler.apply_stack(&stack.values),
        stack.kind,
    ))
}

/// Composes two specs: the result applies `first`, then `second`.
pub fn compose(first: &WarpSpec, second: &WarpSpec) -> Result<WarpSpec> {
    WarpSpec::from_homography(second.matrix() * first.matrix(), first.frame)
}
