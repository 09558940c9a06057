use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::config::{TeVariant, TrainConfig};
use crate::datamodel::{DatasetMeta, HeatmapStack, ImageSample};
use crate::error::{Error, Result};
use crate::heatmap::render_heatmaps;
use crate::losses::{
    equivariance_with_grad, invariance_with_grad, inverse_warp_with_grad, select_heatmap_source,
    semantic_consistency_with_grad, supervised_grad, supervised_sum, total_loss, LossBundle,
};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::layers::Grads;
use crate::nn::repr::{extract_representations, representations_backward, KeypointRepresentation};
use crate::nn::{Backbone, Kcn, KcnConfig, KcnGrads};
use crate::sampling::mix_seed;
use crate::warp::{sample_warp, warp_heatmaps, warp_image, GridSampler};

/// Unsupervised loss values of one sample; `None` when the term is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLosses {
    pub id: String,
    pub labeled: bool,
    pub sc: Option<f64>,
    pub te: Option<f64>,
    pub ti: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub step: u64,
    pub bundle: LossBundle,
    pub per_sample: Vec<SampleLosses>,
    /// Operations in the order they ran.
    pub trace: Vec<&'static str>,
    /// False when no loss term was active and the update was skipped.
    pub updated: bool,
    /// No visible labeled keypoint in the batch.
    pub sup_empty: bool,
}

/// Owns the networks and the optimiser.
#[derive(Debug, Clone)]
pub struct Trainer<B: Backbone> {
    pub backbone: B,
    pub kcn: Kcn,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub meta: DatasetMeta,
    pub step: u64,
}

/// Gradients collected for one sample's forward pass.
struct Pending {
    d_heat: Array3<f64>,
    d_feat: Array3<f64>,
    feat_used: bool,
}

impl Pending {
    fn new(heat: (usize, usize, usize), feat: (usize, usize, usize)) -> Self {
        Self {
            d_heat: Array3::zeros(heat),
            d_feat: Array3::zeros(feat),
            feat_used: false,
        }
    }
}

fn reps_backward(
    reps: &KeypointRepresentation,
    features: &Array3<f64>,
    heat: &Array3<f64>,
    dz: &ndarray::Array2<f64>,
    pending: &mut Pending,
    heat_is_pred: bool,
) {
    let mut d_heat = Array3::zeros(heat.dim());
    representations_backward(reps, features, heat, dz, &mut pending.d_feat, &mut d_heat);
    pending.feat_used = true;
    if heat_is_pred {
        pending.d_heat += &d_heat;
    }
}

impl<B: Backbone> Trainer<B> {
    pub fn new(backbone: B, meta: DatasetMeta, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        backbone.check_meta(&meta)?;
        let kcn = Kcn::new(
            KcnConfig {
                input_dim: backbone.feature_channels(),
                num_classes: meta.num_keypoints(),
                hidden_dims: config.kcn_hidden.clone(),
            },
            mix_seed(config.seed, 0x6b636e),
        );
        Ok(Self {
            backbone,
            kcn,
            optimizer: Adam::new(AdamConfig::with_lr(config.learning_rate)),
            config,
            meta,
            step: 0,
        })
    }

    fn sample_seed(&self, warp_step: u64, index: usize) -> u64 {
        mix_seed(mix_seed(self.config.seed, warp_step), index as u64)
    }

    /// Evaluates the objective and its gradients on a batch without
    /// touching the parameters. Warps are drawn from `warp_step`. Each
    /// sample's `labeled` flag decides whether its annotations are used.
    pub fn compute(
        &self,
        batch: &[&ImageSample],
        warp_step: u64,
    ) -> Result<(StepOutput, Grads, KcnGrads)> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let cfg = &self.config;
        let w = cfg.weights;
        let n = batch.len() as f64;
        let use_sc = w.lambda2 > 0.0;
        let use_te = w.lambda3 > 0.0;
        let use_ti = w.lambda4 > 0.0;
        let need_warp = use_te || use_ti;
        let mut trace = Vec::new();

        // The supervised mean runs over every visible labeled cell in the batch.
        let (hh, hw) = self.meta.heatmap_size;
        let sup_count: usize = batch
            .iter()
            .filter(|s| s.labeled)
            .map(|s| {
                s.keypoints
                    .as_ref()
                    .map_or(0, |k| k.iter().filter(|p| p.visible).count())
                    * hh
                    * hw
            })
            .sum();

        let mut grads = self.backbone.params().zeros_like();
        let mut kcn_grads = self.kcn.zero_grads();
        let mut sums = [0.0f64; 4];
        let mut per_sample = Vec::with_capacity(batch.len());

        for (index, &sample) in batch.iter().enumerate() {
            let labeled = sample.labeled;
            if !labeled && !(use_sc || need_warp) {
                per_sample.push(SampleLosses {
                    id: sample.id.clone(),
                    labeled,
                    sc: None,
                    te: None,
                    ti: None,
                });
                continue;
            }
            trace.push("forward");
            let (out, tape) = self.backbone.forward_tape(&sample.pixels)?;
            let pred = &out.heatmaps;
            let mut pending = Pending::new(pred.values.dim(), out.features.dim());

            let gt: Option<HeatmapStack> = if labeled {
                trace.push("render_gt");
                let kps = sample.keypoints.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "labeled sample `{}` has no keypoints",
                        sample.id
                    ))
                })?;
                let gt = render_heatmaps(kps, &self.meta, &cfg.render)?.stack;
                let vis: Vec<bool> = kps.iter().map(|k| k.visible).collect();
                trace.push("supervised");
                sums[0] += supervised_sum(pred, &gt, &vis)?.0;
                pending
                    .d_heat
                    .scaled_add(w.lambda1, &supervised_grad(pred, &gt, &vis, sup_count));
                Some(gt)
            } else {
                None
            };
            let mut losses = SampleLosses {
                id: sample.id.clone(),
                labeled,
                sc: None,
                te: None,
                ti: None,
            };
            if use_sc || need_warp {
                trace.push("select_source");
                let src = select_heatmap_source(sample, pred, gt.as_ref(), cfg.policy)?;
                let src_is_pred = std::ptr::eq(src, pred);
                let reps = if use_sc || use_ti {
                    Some(extract_representations(&out.features, src)?)
                } else {
                    None
                };
                if use_sc {
                    trace.push("sc");
                    let reps = reps.as_ref().expect("computed above");
                    let (sc, dz, kg) = semantic_consistency_with_grad(reps, &self.kcn)?;
                    sums[1] += sc;
                    losses.sc = Some(sc);
                    let mut kg = kg;
                    kg.scale(w.lambda2 / n);
                    kcn_grads.add_assign(&kg);
                    reps_backward(
                        reps,
                        &out.features,
                        &src.values,
                        &(dz * (w.lambda2 / n)),
                        &mut pending,
                        src_is_pred,
                    );
                }
                if need_warp {
                    trace.push("sample_warp");
                    let spec = sample_warp(
                        &self.meta,
                        cfg.warp_gamma,
                        self.sample_seed(warp_step, index),
                    )?;
                    let warped = warp_image(&sample.pixels, &spec);
                    trace.push("forward_warped");
                    let (out_w, tape_w) = self.backbone.forward_tape(&warped)?;
                    let mut pending_w =
                        Pending::new(out_w.heatmaps.values.dim(), out_w.features.dim());
                    if use_te {
                        let (te, d_pw, d_ref) = match cfg.te_variant {
                            TeVariant::Forward => {
                                trace.push("te");
                                let sampler = GridSampler::for_heatmaps(&spec, &self.meta)?;
                                equivariance_with_grad(
                                    &out_w.heatmaps.values,
                                    &src.values,
                                    &sampler,
                                )?
                            }
                            TeVariant::Inverse => {
                                trace.push("elt");
                                let (l, dw, dref) = inverse_warp_with_grad(
                                    &out_w.heatmaps.values,
                                    &src.values,
                                    &spec,
                                    &self.meta,
                                )?;
                                (l.value, dw, dref)
                            }
                        };
                        sums[2] += te;
                        losses.te = Some(te);
                        pending_w.d_heat.scaled_add(w.lambda3 / n, &d_pw);
                        if src_is_pred {
                            pending.d_heat.scaled_add(w.lambda3 / n, &d_ref);
                        }
                    }
                    if use_ti {
                        trace.push("ti");
                        let reps = reps.as_ref().expect("computed above");
                        let gt_warped;
                        let (src_w, src_w_is_pred) =
                            if !src_is_pred && cfg.policy.gt_on_warped_branch {
                                gt_warped = warp_heatmaps(src, &spec, &self.meta)?;
                                (&gt_warped, false)
                            } else {
                                (&out_w.heatmaps, true)
                            };
                        let reps_w = extract_representations(&out_w.features, src_w)?;
                        let (ti, dz, dz_w) = invariance_with_grad(&reps.z, &reps_w.z)?;
                        sums[3] += ti;
                        losses.ti = Some(ti);
                        let s = w.lambda4 / n;
                        reps_backward(
                            reps,
                            &out.features,
                            &src.values,
                            &(dz * s),
                            &mut pending,
                            src_is_pred,
                        );
                        reps_backward(
                            &reps_w,
                            &out_w.features,
                            &src_w.values,
                            &(dz_w * s),
                            &mut pending_w,
                            src_w_is_pred,
                        );
                    }
                    trace.push("backward_warped");
                    let df = pending_w.feat_used.then_some(&pending_w.d_feat);
                    self.backbone
                        .backward(&tape_w, &pending_w.d_heat, df, &mut grads);
                }
            }
            trace.push("backward");
            let df = pending.feat_used.then_some(&pending.d_feat);
            self.backbone
                .backward(&tape, &pending.d_heat, df, &mut grads);
            per_sample.push(losses);
        }

        let sup = if sup_count > 0 {
            sums[0] / sup_count as f64
        } else {
            0.0
        };
        let bundle = total_loss([sup, sums[1] / n, sums[2] / n, sums[3] / n], w);
        let active = sup_count > 0
            || per_sample
                .iter()
                .any(|s| s.sc.is_some() || s.te.is_some() || s.ti.is_some());
        let out = StepOutput {
            step: warp_step,
            bundle,
            per_sample,
            trace,
            updated: active,
            sup_empty: sup_count == 0,
        };
        Ok((out, grads, kcn_grads))
    }

    /// One optimiser step on the composite objective. A non-finite loss or
    /// gradient leaves the parameters untouched and returns an error.
    pub fn train_step(&mut self, batch: &[&ImageSample]) -> Result<StepOutput> {
        let step = self.step;
        let (mut out, grads, kcn_grads) = self.compute(batch, step)?;
        self.step += 1;
        if !out.bundle.is_finite() || !grads.is_finite() || !kcn_grads.is_finite() {
            let b = out.bundle;
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "sup={} sc={} te={} ti={} total={}, finite grads: backbone {}, kcn {}",
                    b.sup,
                    b.sc,
                    b.te,
                    b.ti,
                    b.total,
                    grads.is_finite(),
                    kcn_grads.is_finite()
                ),
            });
        }
        if out.updated {
            out.trace.push("adam");
            self.optimizer.step(
                self.backbone.params_mut(),
                &grads,
                &mut self.kcn,
                &kcn_grads,
            );
        }
        Ok(out)
    }
}
