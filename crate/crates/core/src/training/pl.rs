use std::collections::HashSet;

use log::warn;

use super::config::{Method, TrainConfig};
use super::fit::{fit, FitResult};
use crate::datamodel::{Dataset, Keypoint};
use crate::error::{Error, Result};
use crate::heatmap::decode_peaks;
use crate::nn::Backbone;
use crate::sampling::SplitSpec;

#[derive(Debug, Clone)]
pub struct PlResult<B: Backbone> {
    pub stage1: FitResult<B>,
    /// `None` when no pseudo-label survived and stage 1 is the answer.
    pub stage3: Option<FitResult<B>>,
    pub pseudo_labeled_images: usize,
    pub pseudo_labeled_keypoints: usize,
    pub threshold: f64,
}

impl<B: Backbone> PlResult<B> {
    pub fn final_fit(&self) -> &FitResult<B> {
        self.stage3.as_ref().unwrap_or(&self.stage1)
    }
}

/// Self-training skeleton: supervised model, confident peaks on the
/// unlabeled pool become labels, then a fresh model trains on both.
///
/// `backbone` is the untrained network; stage 3 restarts from a copy of it.
pub fn pseudo_label_baseline<B: Backbone>(
    backbone: B,
    train: &Dataset,
    split: &SplitSpec,
    val: &Dataset,
    cfg: &TrainConfig,
    threshold: f64,
) -> Result<PlResult<B>> {
    if split.unlabeled_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "pseudo-labelling needs an unlabeled pool; the split is fully labeled".into(),
        ));
    }
    if threshold.is_nan() {
        return Err(Error::InvalidArgument("threshold must not be NaN".into()));
    }
    let sup_cfg = Method::Supervised.configure(cfg);
    let stage1 = fit(backbone.clone(), train, split, val, &sup_cfg)?;

    let unlabeled: HashSet<&str> = split.unlabeled_ids.iter().map(String::as_str).collect();
    let mut pseudo = train.clone();
    let mut pseudo_ids = Vec::new();
    let mut kept_keypoints = 0;
    for s in pseudo
        .samples
        .iter_mut()
        .filter(|s| unlabeled.contains(s.id.as_str()))
    {
        let out = stage1.best_backbone.forward(&s.pixels)?;
        let peaks = decode_peaks(&out.heatmaps, &train.meta)?;
        let kps: Vec<Keypoint> = peaks
            .iter()
            .map(|p| Keypoint::new(p.x, p.y, p.score.max(0.0) >= threshold))
            .collect();
        let kept = kps.iter().filter(|k| k.visible).count();
        if kept > 0 {
            kept_keypoints += kept;
            pseudo_ids.push(s.id.clone());
            s.keypoints = Some(kps);
        }
    }

    if pseudo_ids.is_empty() {
        warn!(
            "no peak reached the pseudo-label threshold {threshold}; keeping the supervised model"
        );
        return Ok(PlResult {
            stage1,
            stage3: None,
            pseudo_labeled_images: 0,
            pseudo_labeled_keypoints: 0,
            threshold,
        });
    }

    let mut combined = split.clone();
    combined.labeled_ids.extend(pseudo_ids.iter().cloned());
    combined.unlabeled_ids.clear();
    let stage3 = fit(backbone, &pseudo, &combined, val, &sup_cfg)?;
    Ok(PlResult {
        stage1,
        stage3: Some(stage3),
        pseudo_labeled_images: pseudo_ids.len(),
        pseudo_labeled_keypoints: kept_keypoints,
        threshold,
    })
}
