//! Video-level detection metrics: ROC curve, AUC, partial AUC, equal error
//! rate, and thresholded accuracy/TPR/FPR. The fake class (label 1) is the
//! positive class throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ROC metrics need at least one positive and one negative, got {pos} / {neg}")]
    SingleClass { pos: usize, neg: usize },
    #[error("score set is empty")]
    Empty,
    #[error("score {score} for video {video_id} outside [0, 1]")]
    ScoreRange { video_id: String, score: f64 },
}

/// One video's averaged score and its ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVideo {
    pub video_id: String,
    pub score: f64,
    pub label: u8,
}

/// Per-video scores for one evaluation split.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub entries: Vec<ScoredVideo>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoredVideo>) -> Self {
        ScoreSet { entries }
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.entries.iter().filter(|e| e.label == 1).count();
        (pos, self.entries.len() - pos)
    }
}

/// Evaluation summary. Serializes to the stable JSON shape consumed by the
/// CLI: `auc, pauc, eer, acc, tpr, fpr, threshold, n_videos`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub pauc: f64,
    pub eer: f64,
    pub acc: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub threshold: f64,
    pub n_videos: usize,
    #[serde(skip)]
    pub roc: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Compute every metric for a score set at the given operating point.
    pub fn compute(scores: &ScoreSet, threshold: f64, max_fpr: f64) -> Result<Self, MetricsError> {
        let roc = roc_curve(scores)?;
        let auc_v = auc(&roc);
        let pauc_v = pauc(&roc, max_fpr);
        let eer_v = eer(&roc);
        let (acc, tpr, fpr) = confusion_at(scores, threshold)?;
        Ok(EvalReport {
            auc: auc_v,
            pauc: pauc_v,
            eer: eer_v,
            acc,
            tpr,
            fpr,
            threshold,
            n_videos: scores.entries.len(),
            roc,
        })
    }
}

/// ROC curve as (fpr, tpr) points, thresholds swept over the unique scores
/// in descending order with tied scores grouped. Starts at (0,0), ends at
/// (1,1).
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<(f64, f64)>, MetricsError> {
    if scores.entries.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (pos, neg) = scores.class_counts();
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass { pos, neg });
    }
    let mut sorted: Vec<(f64, u8)> = scores.entries.iter().map(|e| (e.score, e.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must not be NaN"));

    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        // Consume the whole tie group before emitting a point.
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(curve)
}

/// Trapezoidal area under the ROC curve.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for w in roc.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// Area under the ROC restricted to `fpr <= max_fpr`, linearly interpolated
/// at the cut and normalized by `max_fpr` so the result lies in [0, 1].
pub fn pauc(roc: &[(f64, f64)], max_fpr: f64) -> f64 {
    assert!(max_fpr > 0.0 && max_fpr <= 1.0, "max_fpr must be in (0, 1]");
    let mut area = 0.0;
    for w in roc.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x0 >= max_fpr {
            break;
        }
        if x1 <= max_fpr {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            // Interpolate the curve at the cut.
            let t = (max_fpr - x0) / (x1 - x0);
            let y_cut = y0 + t * (y1 - y0);
            area += (max_fpr - x0) * (y0 + y_cut) / 2.0;
            break;
        }
    }
    area / max_fpr
}

/// Equal error rate: the operating point where fpr = 1 - tpr, linearly
/// interpolated between adjacent ROC points.
pub fn eer(roc: &[(f64, f64)]) -> f64 {
    // d = fpr - fnr goes from -1 at (0,0) to +1 at (1,1); find the sign flip.
    for w in roc.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let d0 = x0 - (1.0 - y0);
        let d1 = x1 - (1.0 - y1);
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return x0;
            }
            let t = -d0 / (d1 - d0);
            return x0 + t * (x1 - x0);
        }
    }
    // A valid curve always crosses; fall back to the final point.
    roc.last().map(|&(x, _)| x).unwrap_or(0.5)
}

/// Accuracy, TPR and FPR with "fake" predicted iff `score >= threshold`.
pub fn confusion_at(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64, f64), MetricsError> {
    if scores.entries.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for e in &scores.entries {
        let pred_fake = e.score >= threshold;
        match (e.label == 1, pred_fake) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let acc = (tp + tn) as f64 / scores.entries.len() as f64;
    let tpr = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let fpr = if fp + tn > 0 {
        fp as f64 / (fp + tn) as f64
    } else {
        0.0
    };
    Ok((acc, tpr, fpr))
}
