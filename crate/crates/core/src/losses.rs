//! Training objectives: supervised heatmap regression, semantic consistency,
//! transformation equivariance and invariance, plus the inverse-warp variant
//! used as an ablation.
//!
//! Every `*_with_grad` function returns the loss value together with its
//! gradient with respect to each differentiable input, in `f64`.

use log::warn;
use ndarray::{Array1, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetMeta, HeatmapKind, HeatmapStack, ImageSample, LossWeights};
use crate::error::{Error, Result};
use crate::nn::kcn::{Kcn, KcnGrads};
use crate::nn::repr::KeypointRepresentation;
use crate::warp::{GridSampler, WarpSpec};

/// A loss that averages over a possibly empty selection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskedLoss {
    pub value: f64,
    /// Nothing was selected; `value` is 0 by convention.
    pub empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub sup: f64,
    pub sc: f64,
    pub te: f64,
    pub ti: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBundle {
    pub fn parts(&self) -> [f64; 4] {
        [self.sup, self.sc, self.te, self.ti]
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapSourcePolicy {
    pub use_gt_for_labeled: bool,
    /// When substituting, also use warped ground truth on the warped branch
    /// of the invariance term.
    #[serde(default = "default_true")]
    pub gt_on_warped_branch: bool,
}

fn default_true() -> bool {
    true
}

impl Default for HeatmapSourcePolicy {
    fn default() -> Self {
        Self {
            use_gt_for_labeled: true,
            gt_on_warped_branch: true,
        }
    }
}

impl HeatmapSourcePolicy {
    pub fn off() -> Self {
        Self {
            use_gt_for_labeled: false,
            ..Self::default()
        }
    }
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Sum of squared errors over visible channels and the number of terms.
pub fn supervised_sum(
    pred: &HeatmapStack,
    gt: &HeatmapStack,
    visibility: &[bool],
) -> Result<(f64, usize)> {
    check_same_shape(&gt.values, &pred.values)?;
    let (k, h, w) = pred.values.dim();
    if visibility.len() != k {
        return Err(Error::Shape {
            expected: format!("{k} visibility flags"),
            actual: format!("{}", visibility.len()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (i, _) in visibility.iter().enumerate().filter(|(_, &v)| v) {
        let p = pred.values.index_axis(ndarray::Axis(0), i);
        let g = gt.values.index_axis(ndarray::Axis(0), i);
        sum += Zip::from(&p)
            .and(&g)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        count += h * w;
    }
    Ok((sum, count))
}

/// Mean squared error over visible channels of every sample in the batch.
pub fn supervised_loss_batch(
    items: &[(&HeatmapStack, &HeatmapStack, &[bool])],
) -> Result<MaskedLoss> {
    let mut sum = 0.0;
    let mut count = 0;
    for (pred, gt, vis) in items {
        let (s, c) = supervised_sum(pred, gt, vis)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        warn!("supervised loss: no visible keypoints in batch");
        return Ok(MaskedLoss {
            value: 0.0,
            empty: true,
        });
    }
    Ok(MaskedLoss {
        value: sum / count as f64,
        empty: false,
    })
}

pub fn supervised_loss(
    pred: &HeatmapStack,
    gt: &HeatmapStack,
    visibility: &[bool],
) -> Result<MaskedLoss> {
    supervised_loss_batch(&[(pred, gt, visibility)])
}

/// Gradient of `sum / normalizer` with respect to `pred`.
pub fn supervised_grad(
    pred: &HeatmapStack,
    gt: &HeatmapStack,
    visibility: &[bool],
    normalizer: usize,
) -> Array3<f64> {
    let mut d = Array3::zeros(pred.values.dim());
    if normalizer == 0 {
        return d;
    }
    let s = 2.0 / normalizer as f64;
    for (i, _) in visibility.iter().enumerate().filter(|(_, &v)| v) {
        let mut di = d.index_axis_mut(ndarray::Axis(0), i);
        Zip::from(&mut di)
            .and(pred.values.index_axis(ndarray::Axis(0), i))
            .and(gt.values.index_axis(ndarray::Axis(0), i))
            .for_each(|o, &a, &b| *o = s * (a - b));
    }
    d
}

pub fn supervised_loss_with_grad(
    pred: &HeatmapStack,
    gt: &HeatmapStack,
    visibility: &[bool],
) -> Result<(MaskedLoss, Array3<f64>)> {
    let loss = supervised_loss(pred, gt, visibility)?;
    let (_, count) = supervised_sum(pred, gt, visibility)?;
    Ok((loss, supervised_grad(pred, gt, visibility, count)))
}

/// Cross-entropy of row `i` of `logits` against class `i`, averaged over
/// rows, with its gradient.
pub fn own_index_cross_entropy(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let (k, classes) = logits.dim();
    let mut grad = Array2::zeros((k, classes));
    let mut total = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[i];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = ((v - lse).exp() - if i == j { 1.0 } else { 0.0 }) / k as f64;
        }
    }
    (total / k as f64, grad)
}

pub fn semantic_consistency_loss(reps: &KeypointRepresentation, kcn: &Kcn) -> Result<f64> {
    Ok(semantic_consistency_with_grad(reps, kcn)?.0)
}

/// Returns the loss, `dL/dz` with shape `(K, C)` and the KCN gradients.
pub fn semantic_consistency_with_grad(
    reps: &KeypointRepresentation,
    kcn: &Kcn,
) -> Result<(f64, Array2<f64>, KcnGrads)> {
    let k = reps.num_keypoints();
    if kcn.config.num_classes != k {
        return Err(Error::Shape {
            expected: format!("KCN with {k} classes"),
            actual: format!("{} classes", kcn.config.num_classes),
        });
    }
    let mut logits = Array2::zeros((k, k));
    let mut tapes = Vec::with_capacity(k);
    for i in 0..k {
        let (l, tape) = kcn.forward_tape(&reps.z_i(i))?;
        logits.row_mut(i).assign(&l);
        tapes.push(tape);
    }
    let (loss, d_logits) = own_index_cross_entropy(&logits);
    let mut grads = kcn.zero_grads();
    let mut dz = Array2::zeros(reps.z.dim());
    for (i, tape) in tapes.iter().enumerate() {
        let d = kcn.backward(tape, &d_logits.row(i).to_owned(), &mut grads);
        dz.row_mut(i).assign(&d);
    }
    Ok((loss, dz, grads))
}

/// Mean squared difference between `f(g(x))` and `g(reference)`, with
/// gradients for both. `sampler` realises the warp on the heatmap grid.
pub fn equivariance_with_grad(
    pred_on_warped: &Array3<f64>,
    reference: &Array3<f64>,
    sampler: &GridSampler,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    check_same_shape(pred_on_warped, reference)?;
    let warped_ref = sampler.apply_stack(reference);
    let n = pred_on_warped.len() as f64;
    let diff = pred_on_warped - &warped_ref;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let d_pred = diff.mapv(|d| 2.0 * d / n);
    let d_ref = sampler.adjoint_stack(&d_pred.mapv(|v| -v));
    Ok((loss, d_pred, d_ref))
}

pub fn transformation_equivariance_loss(
    pred_on_warped: &HeatmapStack,
    reference: &HeatmapStack,
    spec: &WarpSpec,
    meta: &DatasetMeta,
) -> Result<f64> {
    let sampler = GridSampler::for_heatmaps(spec, meta)?;
    Ok(equivariance_with_grad(&pred_on_warped.values, &reference.values, &sampler)?.0)
}

/// Mean squared difference of two `(K, C)` representation sets, with
/// gradients for both.
pub fn invariance_with_grad(
    z: &Array2<f64>,
    z_prime: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if z.dim() != z_prime.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", z.dim()),
            actual: format!("{:?}", z_prime.dim()),
        });
    }
    let n = z.len() as f64;
    let diff = z - z_prime;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let dz = diff.mapv(|d| 2.0 * d / n);
    let dzp = dz.mapv(|v| -v);
    Ok((loss, dz, dzp))
}

/// Works on holistic vectors `[z_1, ..., z_K]`.
pub fn transformation_invariance_loss(z: &Array1<f64>, z_prime: &Array1<f64>) -> Result<f64> {
    if z.len() != z_prime.len() {
        return Err(Error::Shape {
            expected: format!("length {}", z.len()),
            actual: format!("length {}", z_prime.len()),
        });
    }
    if z.is_empty() {
        return Ok(0.0);
    }
    let diff = z - z_prime;
    Ok(diff.dot(&diff) / z.len() as f64)
}

/// Inverse-warp comparison: `g⁻¹(f(g(x)))` against `f(x)` over the cells whose
/// inverse lookup lands inside the warped frame.
pub fn inverse_warp_with_grad(
    pred_on_warped: &Array3<f64>,
    pred_on_original: &Array3<f64>,
    spec: &WarpSpec,
    meta: &DatasetMeta,
) -> Result<(MaskedLoss, Array3<f64>, Array3<f64>)> {
    check_same_shape(pred_on_warped, pred_on_original)?;
    let sampler = GridSampler::inverse_for_heatmaps(spec, meta)?;
    let back = sampler.apply_stack(pred_on_warped);
    let (k, h, w) = back.dim();
    let mask = sampler.inside_mask();
    let inside = mask.iter().filter(|&&m| m).count();
    let mut d_orig = Array3::zeros((k, h, w));
    if inside == 0 {
        warn!("inverse-warp loss: the warp leaves no cell inside the frame");
        return Ok((
            MaskedLoss {
                value: 0.0,
                empty: true,
            },
            Array3::zeros(pred_on_warped.dim()),
            d_orig,
        ));
    }
    let n = (k * inside) as f64;
    let mut sum = 0.0;
    let mut d_back = Array3::zeros((k, h, w));
    for ch in 0..k {
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (p / w, p % w);
            let d = back[[ch, r, c]] - pred_on_original[[ch, r, c]];
            sum += d * d;
            d_back[[ch, r, c]] = 2.0 * d / n;
            d_orig[[ch, r, c]] = -2.0 * d / n;
        }
    }
    let d_warped = sampler.adjoint_stack(&d_back);
    Ok((
        MaskedLoss {
            value: sum / n,
            empty: false,
        },
        d_warped,
        d_orig,
    ))
}

pub fn elt_inverse_loss(
    pred_on_warped: &HeatmapStack,
    pred_on_original: &HeatmapStack,
    spec: &WarpSpec,
    meta: &DatasetMeta,
) -> Result<MaskedLoss> {
    Ok(inverse_warp_with_grad(&pred_on_warped.values, &pred_on_original.values, spec, meta)?.0)
}

pub fn total_loss(parts: [f64; 4], weights: LossWeights) -> LossBundle {
    let [sup, sc, te, ti] = parts;
    LossBundle {
        sup,
        sc,
        te,
        ti,
        total: weights.lambda1 * sup
            + weights.lambda2 * sc
            + weights.lambda3 * te
            + weights.lambda4 * ti,
        weights,
    }
}

/// Picks the heatmaps that drive the unsupervised terms for one sample.
pub fn select_heatmap_source<'a>(
    sample: &ImageSample,
    pred: &'a HeatmapStack,
    gt: Option<&'a HeatmapStack>,
    policy: HeatmapSourcePolicy,
) -> Result<&'a HeatmapStack> {
    if !sample.labeled {
        return Ok(pred);
    }
    let gt = gt.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "labeled sample `{}` has no ground-truth heatmaps",
            sample.id
        ))
    })?;
    debug_assert_eq!(gt.kind, HeatmapKind::GroundTruth);
    Ok(if policy.use_gt_for_labeled { gt } else { pred })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BBox;
    use crate::nn::kcn::KcnConfig;
    use approx::assert_abs_diff_eq;

    fn stack(values: Array3<f64>) -> HeatmapStack {
        HeatmapStack::new(values, HeatmapKind::Predicted)
    }

    #[test]
    fn supervised_examples() {
        let gt = HeatmapStack::new(
            Array3::from_shape_fn(
                (2, 64, 64),
                |(k, r, c)| if (k, r, c) == (0, 5, 7) { 1.0 } else { 0.0 },
            ),
            HeatmapKind::GroundTruth,
        );
        let zero = stack(Array3::zeros((2, 64, 64)));
        let l = supervised_loss(&zero, &gt, &[true, false]).unwrap();
        assert_abs_diff_eq!(l.value, 1.0 / 4096.0, epsilon = 1e-18);
        assert!((l.value - 2.4414e-4).abs() < 1e-8);
        assert_eq!(
            supervised_loss(&stack(gt.values.clone()), &gt, &[true, true])
                .unwrap()
                .value,
            0.0
        );

        let double = stack(gt.values.mapv(|v| -v));
        let l2 = supervised_loss(&double, &gt, &[true, false]).unwrap();
        assert_abs_diff_eq!(l2.value, 4.0 * l.value, epsilon = 1e-15);

        let none = supervised_loss(&zero, &gt, &[false, false]).unwrap();
        assert!(none.empty);
        assert_eq!(none.value, 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Array2::zeros((14, 14));
        assert_abs_diff_eq!(
            own_index_cross_entropy(&uniform).0,
            14f64.ln(),
            epsilon = 1e-12
        );
        let two = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let oracle = -(e / (e + 1.0)).ln();
        assert_abs_diff_eq!(own_index_cross_entropy(&two).0, oracle, epsilon = 1e-12);
        assert!((own_index_cross_entropy(&two).0 - 0.3133).abs() < 5e-5);
        let sharp = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 800.0 } else { 0.0 });
        assert!(own_index_cross_entropy(&sharp).0 < 1e-12);
    }

    #[test]
    fn zero_kcn_gives_ln_k() {
        let reps = KeypointRepresentation {
            z: Array2::from_elem((5, 8), 0.3),
            argmax: Array2::zeros((5, 8)),
        };
        let kcn = Kcn::zeros(KcnConfig::new(8, 5));
        assert_abs_diff_eq!(
            semantic_consistency_loss(&reps, &kcn).unwrap(),
            5f64.ln(),
            epsilon = 1e-12
        );
        assert!(semantic_consistency_loss(&reps, &Kcn::zeros(KcnConfig::new(8, 4))).is_err());
    }

    #[test]
    fn invariance_examples() {
        let mut z = Array1::zeros(320);
        z[0] = 1.0;
        let zp = Array1::zeros(320);
        assert_abs_diff_eq!(
            transformation_invariance_loss(&z, &zp).unwrap(),
            1.0 / 320.0,
            epsilon = 1e-18
        );
        assert_eq!(transformation_invariance_loss(&z, &z).unwrap(), 0.0);
        let a = Array1::linspace(-1.0, 2.0, 10);
        let b = Array1::linspace(0.5, -0.3, 10);
        let base = transformation_invariance_loss(&a, &b).unwrap();
        let scaled = transformation_invariance_loss(&(&a * 3.0), &(&b * 3.0)).unwrap();
        assert_abs_diff_eq!(scaled, 9.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn equivariance_identity_and_zero() {
        let meta = DatasetMeta::new(vec!["a".into(), "b".into()], (32, 32)).unwrap();
        let id = WarpSpec::identity(meta.input_size);
        let h = stack(Array3::from_shape_fn((2, 8, 8), |(k, r, c)| {
            (k + r * c) as f64 * 0.01
        }));
        assert_eq!(
            transformation_equivariance_loss(&h, &h, &id, &meta).unwrap(),
            0.0
        );
        let z = stack(Array3::zeros((2, 8, 8)));
        let spec = crate::warp::sample_warp(&meta, 0.125, 4).unwrap();
        assert_eq!(
            transformation_equivariance_loss(&z, &z, &spec, &meta).unwrap(),
            0.0
        );
    }

    #[test]
    fn inverse_warp_masking() {
        let meta = DatasetMeta::new(vec!["a".into(), "b".into()], (32, 32)).unwrap();
        let h = stack(Array3::from_elem((2, 8, 8), 0.5));
        let id = WarpSpec::identity(meta.input_size);
        let l = elt_inverse_loss(&h, &h, &id, &meta).unwrap();
        assert_eq!(
            l,
            MaskedLoss {
                value: 0.0,
                empty: false
            }
        );
        let gone = WarpSpec::translation(1000.0, 0.0, meta.input_size);
        let l = elt_inverse_loss(&h, &stack(Array3::zeros((2, 8, 8))), &gone, &meta).unwrap();
        assert!(l.empty);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = total_loss([0.001, 2.0, 0.01, 0.03], LossWeights::default());
        assert_abs_diff_eq!(b.total, 6.0, epsilon = 1e-12);
        assert_eq!(total_loss([0.0; 4], LossWeights::default()).total, 0.0);
        let sup_only = LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(total_loss([0.25, 9.0, 9.0, 9.0], sup_only).total, 0.25);
    }

    #[test]
    fn heatmap_source_rules() {
        let pred = stack(Array3::zeros((2, 4, 4)));
        let gt = HeatmapStack::new(Array3::ones((2, 4, 4)), HeatmapKind::GroundTruth);
        let mut s = ImageSample {
            id: "s".into(),
            pixels: Array3::zeros((16, 16, 3)),
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
            head_bbox: None,
            keypoints: None,
            labeled: true,
        };
        let on = HeatmapSourcePolicy::default();
        assert_eq!(
            select_heatmap_source(&s, &pred, Some(&gt), on).unwrap(),
            &gt
        );
        assert_eq!(
            select_heatmap_source(&s, &pred, Some(&gt), HeatmapSourcePolicy::off()).unwrap(),
            &pred
        );
        assert!(select_heatmap_source(&s, &pred, None, on).is_err());
        s.labeled = false;
        assert_eq!(select_heatmap_source(&s, &pred, None, on).unwrap(), &pred);
    }
}
