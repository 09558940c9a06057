use std::collections::{HashMap, HashSet};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, ValMetric};
use super::step::Trainer;
use crate::datamodel::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::evaluation::{pck_score, pckh_score, PckScore, PredictionRecord};
use crate::heatmap::decode_peaks;
use crate::nn::{Backbone, Kcn};
use crate::sampling::{compose_batches, mix_seed, Batch, SplitSpec};

/// Patience-based stopping on a metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

/// One line of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub pck: f64,
    pub sup: f64,
    pub sc: f64,
    pub te: f64,
    pub ti: f64,
    pub total: f64,
}

/// One line of the per-step loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub sup: f64,
    pub sc: f64,
    pub te: f64,
    pub ti: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<B: Backbone> {
    pub best_backbone: B,
    pub best_kcn: Kcn,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Operations of the first training step, for call tracing.
    pub first_trace: Vec<&'static str>,
}

/// Decodes one peak per keypoint for every image.
pub fn predict<B: Backbone>(backbone: &B, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    backbone.check_meta(&ds.meta)?;
    ds.samples
        .iter()
        .map(|s| {
            let out = backbone.forward(&s.pixels)?;
            let peaks = decode_peaks(&out.heatmaps, &ds.meta)?;
            Ok(PredictionRecord {
                image_id: s.id.clone(),
                keypoints: peaks.iter().map(|p| [p.x, p.y, p.score]).collect(),
            })
        })
        .collect()
}

/// Scores predictions against the annotated samples of `ds`.
pub fn score_predictions(
    preds: &[PredictionRecord],
    ds: &Dataset,
    metric: ValMetric,
    alpha: Option<f64>,
) -> Result<PckScore> {
    let by_id: HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let mut p = Vec::new();
    let mut g = Vec::new();
    let mut boxes = Vec::new();
    let mut heads = Vec::new();
    for s in &ds.samples {
        let Some(kps) = &s.keypoints else { continue };
        let rec = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for `{}`", s.id)))?;
        p.push(rec.keypoints.iter().map(|k| (k[0], k[1])).collect());
        g.push(kps.clone());
        boxes.push(s.bbox);
        heads.push(s.head_bbox);
    }
    if g.is_empty() {
        return Err(Error::Empty("no annotated images to score".into()));
    }
    let use_pckh = match metric {
        ValMetric::Pck => false,
        ValMetric::Pckh => true,
        ValMetric::Auto => heads.iter().all(Option::is_some),
    };
    if use_pckh {
        pckh_score(&p, &g, &heads, alpha.unwrap_or(0.5))
    } else {
        pck_score(&p, &g, &boxes, alpha.unwrap_or(0.1))
    }
}

/// PCK@`alpha` of `backbone` on the annotated samples of `ds`.
pub fn evaluate<B: Backbone>(backbone: &B, ds: &Dataset, alpha: f64) -> Result<PckScore> {
    score_predictions(&predict(backbone, ds)?, ds, ValMetric::Pck, Some(alpha))
}

/// The training set as seen by the learner: ids outside the labeled pool
/// lose their annotations.
pub(crate) fn training_view(
    train: &Dataset,
    split: &SplitSpec,
) -> Result<HashMap<String, ImageSample>> {
    let labeled: HashSet<&str> = split.labeled_ids.iter().map(String::as_str).collect();
    let wanted: HashSet<&str> = labeled
        .iter()
        .copied()
        .chain(split.unlabeled_ids.iter().map(String::as_str))
        .collect();
    let mut view = HashMap::with_capacity(wanted.len());
    for s in &train.samples {
        if !wanted.contains(s.id.as_str()) {
            continue;
        }
        let mut s = s.clone();
        if labeled.contains(s.id.as_str()) {
            if s.keypoints.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "split labels `{}` but it has no keypoints",
                    s.id
                )));
            }
            s.labeled = true;
        } else {
            s.labeled = false;
            s.keypoints = None;
        }
        view.insert(s.id.clone(), s);
    }
    if let Some(missing) = wanted.iter().find(|id| !view.contains_key(**id)) {
        return Err(Error::InvalidArgument(format!(
            "split id `{missing}` is not in the training set"
        )));
    }
    Ok(view)
}

/// Batches of one epoch. With a fixed step count, successive passes over
/// the split are concatenated and the surplus dropped.
pub(crate) fn epoch_batches(
    split: &SplitSpec,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let epoch_seed = mix_seed(cfg.seed, epoch as u64);
    let Some(n) = cfg.batches_per_epoch else {
        return compose_batches(split, &cfg.batch, epoch_seed);
    };
    let mut out = Vec::with_capacity(n);
    let mut pass = 0u64;
    while out.len() < n {
        let more = compose_batches(split, &cfg.batch, mix_seed(epoch_seed, pass))?;
        if more.is_empty() {
            return Err(Error::Empty("split yields no batches".into()));
        }
        out.extend(more);
        pass += 1;
    }
    out.truncate(n);
    Ok(out)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Trains until the validation metric stops improving for `patience`
/// epochs or `max_epochs` is reached, keeping the best weights.
pub fn fit<B: Backbone>(
    backbone: B,
    train: &Dataset,
    split: &SplitSpec,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<FitResult<B>> {
    if val.samples.iter().all(|s| s.keypoints.is_none()) {
        return Err(Error::Empty(
            "validation set has no annotated images".into(),
        ));
    }
    let view = training_view(train, split)?;
    let mut trainer = Trainer::new(backbone, train.meta.clone(), cfg.clone())?;
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = (trainer.backbone.clone(), trainer.kcn.clone());
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut first_trace = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let batches = epoch_batches(split, cfg, epoch)?;
        let mut parts: [Vec<f64>; 5] = Default::default();
        for batch in &batches {
            let samples: Vec<&ImageSample> = batch.iter().map(|item| &view[&item.id]).collect();
            let out = trainer.train_step(&samples)?;
            if first_trace.is_empty() {
                first_trace = out.trace.clone();
            }
            let b = out.bundle;
            for (dst, v) in parts.iter_mut().zip([b.sup, b.sc, b.te, b.ti, b.total]) {
                dst.push(v);
            }
            steps.push(StepRecord {
                step: out.step,
                sup: b.sup,
                sc: b.sc,
                te: b.te,
                ti: b.ti,
                total: b.total,
            });
        }
        let preds = predict(&trainer.backbone, val)?;
        let metric = score_predictions(&preds, val, cfg.val_metric, None)?
            .percent
            .ok_or_else(|| Error::Empty("validation set has no visible keypoints".into()))?;
        history.push(EpochRecord {
            epoch,
            split: "val".into(),
            pck: metric,
            sup: mean(&parts[0]),
            sc: mean(&parts[1]),
            te: mean(&parts[2]),
            ti: mean(&parts[3]),
            total: mean(&parts[4]),
        });
        let decision = stopper.update(epoch, metric);
        info!(
            "epoch {epoch}: val {metric:.2} total {:.4}",
            mean(&parts[4])
        );
        if decision.improved {
            best = (trainer.backbone.clone(), trainer.kcn.clone());
        }
        if decision.stop {
            break;
        }
    }
    let (best_backbone, best_kcn) = best;
    let best_epoch = stopper.best_epoch.unwrap_or(0);
    let best_metric = stopper.best.unwrap_or(f64::NAN);
    if history.is_empty() {
        warn!("fit ran no epochs");
    }
    Ok(FitResult {
        best_backbone,
        best_kcn,
        best_epoch,
        best_metric,
        history,
        steps,
        first_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let mut s = EarlyStopping::new(1);
        let metrics = [50.0, 40.0, 30.0, 20.0];
        let mut ran = 0;
        for (e, m) in metrics.iter().enumerate() {
            ran += 1;
            if s.update(e, *m).stop {
                break;
            }
        }
        assert_eq!(ran, 2);
        assert_eq!(s.best_epoch, Some(0));
        assert_eq!(s.best, Some(50.0));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = EarlyStopping::new(2);
        assert!(s.update(0, 10.0).improved);
        assert!(!s.update(1, 10.0).improved);
        assert!(s.update(2, 10.0).stop);
    }
}
