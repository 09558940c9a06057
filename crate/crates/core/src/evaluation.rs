//! PCK scoring and aggregation over repeated runs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, Keypoint};
use crate::error::{Error, Result};

/// Fraction of the head-box diagonal used as the PCKh reference length.
pub const PCKH_HEAD_FACTOR: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckScore {
    /// Percent correct; `None` when no keypoint was visible.
    pub percent: Option<f64>,
    pub correct: usize,
    pub total: usize,
    pub per_keypoint: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric_name: String,
    pub alpha: f64,
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub per_keypoint: Option<Vec<f64>>,
}

impl MetricRecord {
    /// `mean±std` with two decimals; a single run has no spread to show.
    pub fn formatted(&self) -> String {
        if self.per_run.len() == 1 {
            format!("{:.2} (n=1)", self.mean)
        } else {
            format!("{:.2}±{:.2}", self.mean, self.std)
        }
    }
}

/// Scores predictions against visible ground truth, one reference length per
/// image. A prediction counts when its distance is at most `alpha · length`.
pub fn pck_with_lengths(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<Keypoint>],
    lengths: &[f64],
    alpha: f64,
) -> Result<PckScore> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    if preds.len() != gts.len() || gts.len() != lengths.len() {
        return Err(Error::Shape {
            expected: format!("{} images", gts.len()),
            actual: format!(
                "{} predictions, {} reference lengths",
                preds.len(),
                lengths.len()
            ),
        });
    }
    let k = gts.first().map_or(0, Vec::len);
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for ((pred, gt), &l) in preds.iter().zip(gts).zip(lengths) {
        if pred.len() != gt.len() || gt.len() != k {
            return Err(Error::Shape {
                expected: format!("{k} keypoints per image"),
                actual: format!("{} predicted, {} annotated", pred.len(), gt.len()),
            });
        }
        let threshold = alpha * l;
        for (i, (&(px, py), g)) in pred.iter().zip(gt).enumerate() {
            if !g.visible {
                continue;
            }
            counts[i] += 1;
            if (px - g.x).hypot(py - g.y) <= threshold {
                hits[i] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    let total: usize = counts.iter().sum();
    let pct = |c: usize, n: usize| (n > 0).then(|| 100.0 * c as f64 / n as f64);
    Ok(PckScore {
        percent: pct(correct, total),
        correct,
        total,
        per_keypoint: hits.iter().zip(&counts).map(|(&c, &n)| pct(c, n)).collect(),
    })
}

/// PCK@α normalised by the longest bounding-box side.
pub fn pck_score(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<Keypoint>],
    bboxes: &[BBox],
    alpha: f64,
) -> Result<PckScore> {
    let lengths: Vec<f64> = bboxes.iter().map(BBox::max_side).collect();
    pck_with_lengths(preds, gts, &lengths, alpha)
}

pub fn pckh_length(head: &BBox) -> f64 {
    PCKH_HEAD_FACTOR * head.diagonal()
}

/// PCKh@α normalised by 60% of the head-box diagonal.
pub fn pckh_score(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<Keypoint>],
    head_bboxes: &[Option<BBox>],
    alpha: f64,
) -> Result<PckScore> {
    let lengths = head_bboxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            b.as_ref()
                .map(pckh_length)
                .ok_or_else(|| Error::InvalidArgument(format!("image {i} has no head box")))
        })
        .collect::<Result<Vec<_>>>()?;
    pck_with_lengths(preds, gts, &lengths, alpha)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over repeats.
pub fn aggregate_runs(metric_name: &str, alpha: f64, scores: &[PckScore]) -> Result<MetricRecord> {
    let per_run: Vec<f64> = scores
        .iter()
        .map(|s| {
            s.percent
                .ok_or_else(|| Error::Empty("a run scored no visible keypoints".into()))
        })
        .collect::<Result<_>>()?;
    if per_run.is_empty() {
        return Err(Error::Empty("no runs to aggregate".into()));
    }
    let (mean, std) = mean_std(&per_run);
    let k = scores[0].per_keypoint.len();
    let per_keypoint = (0..k)
        .map(|i| {
            let vals: Option<Vec<f64>> = scores
                .iter()
                .map(|s| s.per_keypoint.get(i).copied().flatten())
                .collect();
            vals.map(|v| mean_std(&v).0)
        })
        .collect::<Option<Vec<f64>>>();
    Ok(MetricRecord {
        metric_name: metric_name.to_string(),
        alpha,
        per_run,
        mean,
        std,
        per_keypoint,
    })
}

/// One line of the predictions interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    /// `[x, y, score]` per keypoint.
    pub keypoints: Vec<[f64; 3]>,
}

/// A results grid: rows are methods, columns settings such as labeled
/// fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<MetricRecord>>)>,
}

impl ResultsTable {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            title: title.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn fraction_columns(title: impl Into<String>, fractions: &[f64]) -> Self {
        Self::new(
            title,
            fractions
                .iter()
                .map(|f| format!("{}%", (f * 100.0).round()))
                .collect(),
        )
    }

    pub fn push_row(&mut self, name: impl Into<String>, cells: Vec<Option<MetricRecord>>) {
        self.rows.push((name.into(), cells));
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| Method |", self.title);
        for c in &self.columns {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for (name, cells) in &self.rows {
            let _ = write!(s, "| {name} |");
            for c in cells {
                let text = c
                    .as_ref()
                    .map_or_else(|| "-".to_string(), MetricRecord::formatted);
                let _ = write!(s, " {text} |");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint::visible(x, y)
    }

    #[test]
    fn simple_hit() {
        let s = pck_score(
            &[vec![(10.0, 10.0), (0.0, 0.0)]],
            &[vec![kp(12.0, 10.0), Keypoint::hidden(50.0, 50.0)]],
            &[BBox::new(0.0, 0.0, 100.0, 40.0)],
            0.1,
        )
        .unwrap();
        assert_eq!(s.percent, Some(100.0));
        assert_eq!((s.correct, s.total), (1, 1));
        assert_eq!(s.per_keypoint, vec![Some(100.0), None]);
    }

    #[test]
    fn boundary_counts() {
        let s = pck_score(
            &[vec![(13.0, 14.0)]],
            &[vec![kp(10.0, 10.0)]],
            &[BBox::new(0.0, 0.0, 50.0, 10.0)],
            0.1,
        )
        .unwrap();
        assert_eq!(s.percent, Some(100.0));
    }

    #[test]
    fn nothing_visible_is_absent() {
        let s = pck_score(
            &[vec![(0.0, 0.0)]],
            &[vec![Keypoint::hidden(1.0, 1.0)]],
            &[BBox::new(0.0, 0.0, 5.0, 5.0)],
            0.1,
        )
        .unwrap();
        assert_eq!(s.percent, None);
    }

    #[test]
    fn head_box_threshold() {
        let head = BBox::new(0.0, 0.0, 30.0, 40.0);
        assert_eq!(pckh_length(&head), 30.0);
        assert_eq!(0.5 * pckh_length(&head), 15.0);
        let gts = [vec![kp(0.0, 0.0)]];
        let on = pckh_score(&[vec![(9.0, 12.0)]], &gts, &[Some(head)], 0.5).unwrap();
        assert_eq!(on.percent, Some(100.0));
        let off = pckh_score(&[vec![(9.0, 12.1)]], &gts, &[Some(head)], 0.5).unwrap();
        assert_eq!(off.percent, Some(0.0));
        assert!(pckh_score(&[vec![(0.0, 0.0)]], &gts, &[None], 0.5).is_err());
        let zero = Some(BBox::new(0.0, 0.0, 0.0, 0.0));
        assert_eq!(
            pckh_score(&[vec![(0.0, 0.0)]], &gts, &[zero], 0.5)
                .unwrap()
                .percent,
            Some(100.0)
        );
        assert_eq!(
            pckh_score(&[vec![(1e-9, 0.0)]], &gts, &[zero], 0.5)
                .unwrap()
                .percent,
            Some(0.0)
        );
    }

    fn score(p: f64) -> PckScore {
        PckScore {
            percent: Some(p),
            correct: 0,
            total: 1,
            per_keypoint: vec![Some(p)],
        }
    }

    #[test]
    fn aggregation() {
        let one = aggregate_runs("pck", 0.1, &[score(66.98)]).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(one.formatted(), "66.98 (n=1)");
        let three = aggregate_runs("pck", 0.1, &[score(40.0), score(42.0), score(44.0)]).unwrap();
        assert_eq!(three.formatted(), "42.00±2.00");
        assert_eq!(three.per_keypoint, Some(vec![42.0]));
        assert!(aggregate_runs("pck", 0.1, &[]).is_err());
    }

    #[test]
    fn table_layout() {
        let fr = [0.05, 0.1, 0.2, 0.5, 1.0];
        let mut t = ResultsTable::fraction_columns("PCK@0.1", &fr);
        t.push_row(
            "Supervised",
            vec![
                Some(aggregate_runs("pck", 0.1, &[score(40.0)]).unwrap()),
                None,
                None,
                None,
                None,
            ],
        );
        let md = t.to_markdown();
        assert!(md.contains("| Method | 5% | 10% | 20% | 50% | 100% |"));
        assert!(md.contains("| Supervised | 40.00 (n=1) | - | - | - | - |"));
    }
}
