//! Semantic keypoint representations: `z_i[c] = max_p F[c, p] · h_i[p]`.

use ndarray::{Array1, Array2, Array3};

use crate::datamodel::HeatmapStack;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRepresentation {
    /// `(K, C)`; row `i` is `z_i`.
    pub z: Array2<f64>,
    /// Flat spatial index of the maximum for each `(i, c)`.
    pub argmax: Array2<usize>,
}

impl KeypointRepresentation {
    pub fn num_keypoints(&self) -> usize {
        self.z.nrows()
    }

    pub fn z_i(&self, i: usize) -> Array1<f64> {
        self.z.row(i).to_owned()
    }

    /// `[z_1, ..., z_K]` in order.
    pub fn z_concat(&self) -> Array1<f64> {
        Array1::from_iter(self.z.iter().copied())
    }
}

/// Masks `features` with each heatmap channel and max-pools over space.
pub fn extract_representations(
    features: &Array3<f64>,
    heatmaps: &HeatmapStack,
) -> Result<KeypointRepresentation> {
    let (c, h, w) = features.dim();
    let (k, hh, hw) = heatmaps.values.dim();
    if (h, w) != (hh, hw) {
        return Err(Error::Shape {
            expected: format!("heatmaps at {h}x{w}"),
            actual: format!("{hh}x{hw}"),
        });
    }
    let f = features.as_standard_layout();
    let fs = f.as_slice().expect("standard layout");
    let hm = heatmaps.values.as_standard_layout();
    let hs = hm.as_slice().expect("standard layout");
    let n = h * w;
    let mut z = Array2::<f64>::zeros((k, c));
    let mut argmax = Array2::<usize>::zeros((k, c));
    for i in 0..k {
        let hi = &hs[i * n..(i + 1) * n];
        for ch in 0..c {
            let fc = &fs[ch * n..(ch + 1) * n];
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0;
            for (p, (&a, &b)) in fc.iter().zip(hi).enumerate() {
                let v = a * b;
                if v > best {
                    best = v;
                    best_p = p;
                }
            }
            if best == f64::NEG_INFINITY {
                best = fc[0] * hi[0];
            }
            z[[i, ch]] = best;
            argmax[[i, ch]] = best_p;
        }
    }
    Ok(KeypointRepresentation { z, argmax })
}

/// Routes `dL/dz` back to the selected cells of both factors.
pub fn representations_backward(
    reps: &KeypointRepresentation,
    features: &Array3<f64>,
    heatmaps: &Array3<f64>,
    dz: &Array2<f64>,
    d_features: &mut Array3<f64>,
    d_heatmaps: &mut Array3<f64>,
) {
    let (_, h, w) = features.dim();
    for ((i, ch), &g) in dz.indexed_iter() {
        if g == 0.0 {
            continue;
        }
        let p = reps.argmax[[i, ch]];
        let (r, col) = (p / w, p % w);
        debug_assert!(r < h);
        d_features[[ch, r, col]] += heatmaps[[i, r, col]] * g;
        d_heatmaps[[i, r, col]] += features[[ch, r, col]] * g;
    }
}
