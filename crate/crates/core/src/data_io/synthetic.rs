//! Procedural keypoint dataset: a rigid cartoon animal with named anchor
//! points, posed by a random similarity plus mild perspective, over a noisy
//! background with distractor blobs.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, Dataset, DatasetMeta, ImageSample, Keypoint};
use crate::error::{Error, Result};
use crate::sampling::mix_seed;
use crate::warp::homography_from_points;

/// Anchor names in template order; the first `K` are used.
pub const ANCHOR_NAMES: [&str; 7] = [
    "nose",
    "tail",
    "fin",
    "front_foot",
    "back_foot",
    "eye",
    "back_knee",
];

/// Anchor positions in template units (x right, y down, object spans about
/// 2.5 units).
const ANCHORS: [(f64, f64); 7] = [
    (1.22, -0.36),
    (-1.3, 0.0),
    (-0.05, -0.82),
    (0.5, 0.78),
    (-0.45, 0.78),
    (1.0, -0.45),
    (-0.45, 0.55),
];

const BODY: [(f64, f64); 6] = [
    (-0.9, 0.0),
    (-0.5, -0.45),
    (0.4, -0.5),
    (0.8, -0.1),
    (0.6, 0.35),
    (-0.4, 0.4),
];
const TAIL: [(f64, f64); 3] = [(-0.8, -0.14), (-1.3, 0.0), (-0.8, 0.14)];
const FIN: [(f64, f64); 3] = [(-0.3, -0.42), (0.2, -0.45), (-0.05, -0.82)];
const FRONT_LEG: [(f64, f64); 4] = [(0.44, 0.3), (0.58, 0.3), (0.58, 0.78), (0.42, 0.78)];
const BACK_LEG: [(f64, f64); 4] = [(-0.52, 0.3), (-0.38, 0.3), (-0.38, 0.78), (-0.54, 0.78)];
const HEAD: ((f64, f64), (f64, f64)) = ((0.95, -0.33), (0.3, 0.22));
const EYE: ((f64, f64), f64) = ((1.0, -0.45), 0.06);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub num_keypoints: usize,
    /// `(H, W)`
    pub image_size: (usize, usize),
    /// Template units to pixels at scale 1, as a fraction of the short side.
    pub base_scale: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Scale drawn from `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    /// Maximum centre offset as a fraction of the side.
    pub translation: f64,
    /// Corner jitter of the perspective component, fraction of the side.
    pub perspective: f64,
    /// Number of distractor blobs is drawn from `0..=max_clutter`.
    pub max_clutter: usize,
    /// Random per-image recolouring of object and background.
    pub color_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 2800,
            num_keypoints: 5,
            image_size: (128, 128),
            base_scale: 0.19,
            rotation_deg: 30.0,
            scale_jitter: 0.2,
            translation: 0.15,
            perspective: 0.05,
            max_clutter: 4,
            color_jitter: 1.0,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn meta(&self) -> Result<DatasetMeta> {
        if !(2..=ANCHOR_NAMES.len()).contains(&self.num_keypoints) {
            return Err(Error::InvalidArgument(format!(
                "synthetic K must be in 2..={}, got {}",
                ANCHOR_NAMES.len(),
                self.num_keypoints
            )));
        }
        DatasetMeta::new(
            ANCHOR_NAMES[..self.num_keypoints]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            self.image_size,
        )
    }
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn inside_ellipse(c: (f64, f64), r: (f64, f64), x: f64, y: f64) -> bool {
    let (dx, dy) = ((x - c.0) / r.0, (y - c.1) / r.1);
    dx * dx + dy * dy <= 1.0
}

type Rgb = [f64; 3];

/// Object colour at template coordinates, if any part covers them.
fn object_color(x: f64, y: f64, body: Rgb) -> Option<Rgb> {
    let shade = |c: Rgb, f: f64| [c[0] * f, c[1] * f, c[2] * f];
    let lighten = |c: Rgb, t: f64| {
        [
            c[0] + (1.0 - c[0]) * t,
            c[1] + (1.0 - c[1]) * t,
            c[2] + (1.0 - c[2]) * t,
        ]
    };
    if inside_ellipse(EYE.0, (EYE.1, EYE.1), x, y) {
        return Some([0.05, 0.05, 0.05]);
    }
    if inside_ellipse(HEAD.0, HEAD.1, x, y) {
        return Some(lighten(body, 0.45));
    }
    if inside_polygon(&FIN, x, y) {
        return Some(shade(body, 0.55));
    }
    if inside_polygon(&BODY, x, y) {
        return Some(body);
    }
    if inside_polygon(&TAIL, x, y) {
        return Some(lighten(body, 0.25));
    }
    if inside_polygon(&FRONT_LEG, x, y) || inside_polygon(&BACK_LEG, x, y) {
        return Some(shade(body, 0.35));
    }
    None
}

fn random_color(rng: &mut ChaCha8Rng, jitter: f64, base: Rgb) -> Rgb {
    let mut c = base;
    for v in &mut c {
        *v = (*v + jitter * (rng.random::<f64>() - 0.5)).clamp(0.05, 0.95);
    }
    c
}

fn apply(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = m * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    color: Rgb,
    square: bool,
}

/// Template-to-pixel homography for one draw.
fn sample_pose(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let (h, w) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let mut u = || 2.0 * rng.random::<f64>() - 1.0;
    let angle = (cfg.rotation_deg * u()).to_radians();
    let scale = cfg.base_scale * h.min(w) * (1.0 + cfg.scale_jitter * u());
    let (tx, ty) = (
        (w - 1.0) / 2.0 + cfg.translation * w * u(),
        (h - 1.0) / 2.0 + cfg.translation * h * u(),
    );
    let (s, c) = angle.sin_cos();
    let similarity = Matrix3::new(
        scale * c,
        -scale * s,
        tx,
        scale * s,
        scale * c,
        ty,
        0.0,
        0.0,
        1.0,
    );
    let corners = [
        (0.0, 0.0),
        (w - 1.0, 0.0),
        (w - 1.0, h - 1.0),
        (0.0, h - 1.0),
    ];
    let mut moved = corners;
    for m in &mut moved {
        m.0 += cfg.perspective * w * u();
        m.1 += cfg.perspective * h * u();
    }
    let perspective = homography_from_points(&corners, &moved).unwrap_or_else(Matrix3::identity);
    perspective * similarity
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn generate_one(cfg: &SyntheticConfig, index: usize, meta: &DatasetMeta) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let (h, w) = cfg.image_size;
    let pose = sample_pose(cfg, &mut rng);
    let inv = pose.try_inverse().unwrap_or_else(Matrix3::identity);

    let bg_a = random_color(&mut rng, cfg.color_jitter, [0.45, 0.5, 0.45]);
    let bg_b = random_color(&mut rng, cfg.color_jitter, [0.55, 0.5, 0.5]);
    let body = random_color(&mut rng, cfg.color_jitter, [0.75, 0.45, 0.2]);
    let n_blobs = if cfg.max_clutter == 0 {
        0
    } else {
        rng.random_range(0..=cfg.max_clutter)
    };
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            center: (
                rng.random::<f64>() * w as f64,
                rng.random::<f64>() * h as f64,
            ),
            radii: (
                (0.04 + 0.1 * rng.random::<f64>()) * w as f64,
                (0.04 + 0.1 * rng.random::<f64>()) * h as f64,
            ),
            color: random_color(&mut rng, 1.0, [0.5, 0.5, 0.5]),
            square: rng.random::<bool>(),
        })
        .collect();

    let mut pixels = Array3::<f32>::zeros((h, w, 3));
    const SUB: [f64; 2] = [-0.25, 0.25];
    for r in 0..h {
        for c in 0..w {
            let t = (r as f64 + c as f64) / (h + w) as f64;
            let mut acc = [0.0; 3];
            for dy in SUB {
                for dx in SUB {
                    let (px, py) = (c as f64 + dx, r as f64 + dy);
                    let mut col = [0.0; 3];
                    for (k, v) in col.iter_mut().enumerate() {
                        *v = bg_a[k] * (1.0 - t) + bg_b[k] * t;
                    }
                    for b in &blobs {
                        let (ex, ey) =
                            ((px - b.center.0) / b.radii.0, (py - b.center.1) / b.radii.1);
                        let hit = if b.square {
                            ex.abs() <= 1.0 && ey.abs() <= 1.0
                        } else {
                            ex * ex + ey * ey <= 1.0
                        };
                        if hit {
                            col = b.color;
                        }
                    }
                    let (tx, ty) = apply(&inv, px, py);
                    if let Some(o) = object_color(tx, ty, body) {
                        col = o;
                    }
                    for k in 0..3 {
                        acc[k] += col[k] / 4.0;
                    }
                }
            }
            for (k, v) in acc.iter().enumerate() {
                let n = if cfg.noise > 0.0 {
                    // Box-Muller keeps the draw count per pixel fixed.
                    let (u1, u2): (f64, f64) = (rng.random::<f64>().max(1e-12), rng.random());
                    cfg.noise * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                } else {
                    0.0
                };
                pixels[[r, c, k]] = quantize(v + n);
            }
        }
    }

    let k = meta.num_keypoints();
    let keypoints: Vec<Keypoint> = ANCHORS[..k]
        .iter()
        .map(|&(ax, ay)| {
            let (x, y) = apply(&pose, ax, ay);
            let inside = x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64;
            Keypoint::new(x, y, inside)
        })
        .collect();
    let bbox = padded_bbox(keypoints.iter().map(|p| (p.x, p.y)), 0.05);
    let head_outline = (0..16).map(|i| {
        let a = i as f64 * std::f64::consts::TAU / 16.0;
        apply(
            &pose,
            HEAD.0 .0 + HEAD.1 .0 * a.cos(),
            HEAD.0 .1 + HEAD.1 .1 * a.sin(),
        )
    });
    let head_bbox = padded_bbox(head_outline, 0.0);

    ImageSample {
        id: format!("syn{index:05}"),
        pixels,
        bbox,
        head_bbox: Some(head_bbox),
        keypoints: Some(keypoints),
        labeled: true,
    }
}

/// Axis-aligned box around `points`, grown by `pad` of its extent on each
/// side.
fn padded_bbox(points: impl Iterator<Item = (f64, f64)>, pad: f64) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (w, h) = ((x1 - x0).max(1.0), (y1 - y0).max(1.0));
    BBox::new(
        x0 - pad * w,
        y0 - pad * h,
        w * (1.0 + 2.0 * pad),
        h * (1.0 + 2.0 * pad),
    )
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let meta = cfg.meta()?;
    let samples = (0..cfg.n_images)
        .map(|i| generate_one(cfg, i, &meta))
        .collect();
    Ok(Dataset { meta, samples })
}

/// Train/val/test partition of a generated dataset, by position.
pub fn partition(
    ds: &Dataset,
    n_train: usize,
    n_val: usize,
) -> Result<(Dataset, Dataset, Dataset)> {
    if n_train + n_val > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot take {n_train}+{n_val} from {} samples",
            ds.len()
        )));
    }
    Ok((
        ds.subset(0..n_train),
        ds.subset(n_train..n_train + n_val),
        ds.subset(n_train + n_val..ds.len()),
    ))
}
