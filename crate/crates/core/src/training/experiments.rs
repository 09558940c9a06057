//! Experiment grids: method tables over labeled fractions, the heatmap
//! source comparison, unlabeled-pool reduction and the loss-weight sweep.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use super::fit::{evaluate, fit, EpochRecord, FitResult, StepRecord};
use super::pl::pseudo_label_baseline;
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_runs, MetricRecord, PckScore, ResultsTable};
use crate::nn::{Kcn, ReferenceCnn, ReferenceCnnConfig};
use crate::sampling::{generate_split, mix_seed, subsample_unlabeled, SplitSpec};

/// Reporting threshold for test PCK.
pub const TEST_ALPHA: f64 = 0.1;

/// Default grid for the loss-weight sensitivity sweep.
pub const SWEEP_LAMBDA2: [f64; 3] = [0.1, 0.5, 1.0];
pub const SWEEP_LAMBDA34: [f64; 3] = [10.0, 100.0, 1000.0];

/// Datasets and defaults shared by every run of a grid.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    pub base: TrainConfig,
    /// Seeds split generation; repeats derive their own seeds from it.
    pub split_seed: u64,
    pub pl_threshold: f64,
}

/// What one training run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub fraction: f64,
    pub repeat: usize,
    pub config: TrainConfig,
    pub test: PckScore,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub backbone: ReferenceCnn,
    pub kcn: Kcn,
}

impl RunOutcome {
    pub fn test_percent(&self) -> f64 {
        self.test.percent.unwrap_or(f64::NAN)
    }
}

/// One row of the weight sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub val_pck: f64,
    pub test_pck: Option<f64>,
    pub epochs: usize,
    /// False when training stopped on a non-finite loss.
    pub finite: bool,
}

/// Per-run seed: the same repeat gives every method the same
/// initialisation.
pub fn run_seed(base: u64, repeat: usize) -> u64 {
    mix_seed(base, repeat as u64)
}

/// The untrained backbone a run with `cfg` starts from.
pub fn initial_backbone(train: &Dataset, cfg: &TrainConfig) -> Result<ReferenceCnn> {
    ReferenceCnn::new(ReferenceCnnConfig {
        widths: cfg.widths,
        ..ReferenceCnnConfig::for_meta(&train.meta, mix_seed(cfg.seed, 0x6b6c6e))
    })
}

impl Experiment<'_> {
    pub fn split(&self, fraction: f64, repeat: usize) -> Result<SplitSpec> {
        generate_split(&self.train.ids(), fraction, repeat, self.split_seed)
    }

    /// Trains `cfg` from scratch on `split` and scores the best weights on
    /// the test set.
    pub fn run_config(
        &self,
        method: Method,
        cfg: &TrainConfig,
        split: &SplitSpec,
    ) -> Result<RunOutcome> {
        let init = initial_backbone(self.train, cfg)?;
        let result: FitResult<ReferenceCnn> = if method == Method::Pl {
            let pl =
                pseudo_label_baseline(init, self.train, split, self.val, cfg, self.pl_threshold)?;
            info!(
                "pseudo labels: {} images, {} keypoints",
                pl.pseudo_labeled_images, pl.pseudo_labeled_keypoints
            );
            pl.stage3.unwrap_or(pl.stage1)
        } else {
            fit(init, self.train, split, self.val, cfg)?
        };
        let test = evaluate(&result.best_backbone, self.test, TEST_ALPHA)?;
        Ok(RunOutcome {
            method,
            fraction: split.fraction,
            repeat: split.repeat_index,
            config: cfg.clone(),
            test,
            best_epoch: result.best_epoch,
            best_val: result.best_metric,
            history: result.history,
            steps: result.steps,
            backbone: result.best_backbone,
            kcn: result.best_kcn,
        })
    }

    /// Runs `method` on the given split with a repeat-specific seed.
    pub fn run(&self, method: Method, split: &SplitSpec) -> Result<RunOutcome> {
        let mut cfg = method.configure(&self.base);
        cfg.seed = run_seed(self.base.seed, split.repeat_index);
        self.run_config(method, &cfg, split)
    }

    fn cell(&self, name: &str, scores: &[PckScore]) -> Result<Option<MetricRecord>> {
        if scores.is_empty() {
            return Ok(None);
        }
        aggregate_runs(name, TEST_ALPHA, scores).map(Some)
    }

    /// Methods as rows, labeled fractions as columns. Cells that do not
    /// apply (pseudo-labelling without an unlabeled pool) stay empty.
    pub fn method_table(
        &self,
        title: &str,
        methods: &[Method],
        fractions: &[f64],
        repeats: usize,
        mut on_run: impl FnMut(&RunOutcome),
    ) -> Result<ResultsTable> {
        let mut table = ResultsTable::fraction_columns(title, fractions);
        for &m in methods {
            let mut cells = Vec::with_capacity(fractions.len());
            for &f in fractions {
                let mut scores = Vec::new();
                if !(m == Method::Pl && f >= 1.0) {
                    for r in 0..repeats {
                        let out = self.run(m, &self.split(f, r)?)?;
                        info!("{m} @ {f} repeat {r}: test {:.2}", out.test_percent());
                        on_run(&out);
                        scores.push(out.test);
                    }
                }
                cells.push(self.cell("pck", &scores)?);
            }
            table.push_row(m.label(), cells);
        }
        Ok(table)
    }

    /// The full method with and without ground-truth heatmaps inside the
    /// unsupervised losses.
    pub fn gt_heatmap_table(
        &self,
        fractions: &[f64],
        repeats: usize,
        mut on_run: impl FnMut(&RunOutcome),
    ) -> Result<ResultsTable> {
        let mut table = ResultsTable::fraction_columns(
            "Ground-truth heatmaps in unsupervised losses",
            fractions,
        );
        for (label, on) in [("With g/t heatmaps", true), ("Without g/t heatmaps", false)] {
            let mut cells = Vec::new();
            for &f in fractions {
                let mut scores = Vec::new();
                for r in 0..repeats {
                    let mut cfg = Method::Full.configure(&self.base);
                    cfg.seed = run_seed(self.base.seed, r);
                    cfg.policy.use_gt_for_labeled = on;
                    let out = self.run_config(Method::Full, &cfg, &self.split(f, r)?)?;
                    on_run(&out);
                    scores.push(out.test);
                }
                cells.push(self.cell("pck", &scores)?);
            }
            table.push_row(label, cells);
        }
        Ok(table)
    }

    /// The full method at one labeled fraction while the unlabeled pool
    /// shrinks.
    pub fn unlabeled_table(
        &self,
        fraction: f64,
        unlabeled_fractions: &[f64],
        repeats: usize,
        mut on_run: impl FnMut(&RunOutcome),
    ) -> Result<ResultsTable> {
        let mut table = ResultsTable::fraction_columns(
            format!(
                "Unlabeled pool size at {}% labeled",
                (fraction * 100.0).round()
            ),
            unlabeled_fractions,
        );
        let mut cells = Vec::new();
        for &u in unlabeled_fractions {
            let mut scores = Vec::new();
            for r in 0..repeats {
                let split = subsample_unlabeled(&self.split(fraction, r)?, u, r, self.split_seed)?;
                let out = self.run(Method::Full, &split)?;
                on_run(&out);
                scores.push(out.test);
            }
            cells.push(self.cell("pck", &scores)?);
        }
        table.push_row(Method::Full.label(), cells);
        Ok(table)
    }

    /// One full-method run per weight combination on a single split. A run
    /// that hits a non-finite loss is reported, not propagated.
    pub fn lambda_sweep(
        &self,
        split: &SplitSpec,
        lambda2: &[f64],
        lambda3: &[f64],
        lambda4: &[f64],
        mut on_row: impl FnMut(&SweepRow),
    ) -> Result<Vec<SweepRow>> {
        if lambda2.is_empty() || lambda3.is_empty() || lambda4.is_empty() {
            return Err(Error::InvalidArgument(
                "every sweep axis needs at least one value".into(),
            ));
        }
        let mut rows = Vec::new();
        for &l2 in lambda2 {
            for &l3 in lambda3 {
                for &l4 in lambda4 {
                    let mut cfg = Method::Full.configure(&self.base);
                    cfg.seed = run_seed(self.base.seed, split.repeat_index);
                    cfg.weights.lambda2 = l2;
                    cfg.weights.lambda3 = l3;
                    cfg.weights.lambda4 = l4;
                    let row = match self.run_config(Method::Full, &cfg, split) {
                        Ok(out) => SweepRow {
                            lambda2: l2,
                            lambda3: l3,
                            lambda4: l4,
                            val_pck: out.best_val,
                            test_pck: out.test.percent,
                            epochs: out.history.len(),
                            finite: out.steps.iter().all(|s| s.total.is_finite()),
                        },
                        Err(Error::NonFiniteLoss { step, detail }) => {
                            warn!("sweep ({l2}, {l3}, {l4}) diverged at step {step}: {detail}");
                            SweepRow {
                                lambda2: l2,
                                lambda3: l3,
                                lambda4: l4,
                                val_pck: f64::NAN,
                                test_pck: None,
                                epochs: 0,
                                finite: false,
                            }
                        }
                        Err(e) => return Err(e),
                    };
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
        Ok(rows)
    }
}
