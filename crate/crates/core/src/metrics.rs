//! Counting errors and per-frame periodicity detection scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicted and ground-truth count of one video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountEval {
    pub predicted: f64,
    pub truth: u32,
}

impl CountEval {
    pub fn new(predicted: f64, truth: u32) -> Result<Self> {
        if truth < 1 || !predicted.is_finite() {
            return Err(Error::InvalidInput(format!(
                "count pair needs truth >= 1 and a finite prediction, got ({predicted}, {truth})"
            )));
        }
        Ok(Self { predicted, truth })
    }
}

fn check_counts(evals: &[CountEval]) -> Result<()> {
    if evals.is_empty() {
        return Err(Error::EmptyEval);
    }
    if let Some(e) = evals.iter().find(|e| e.truth < 1) {
        return Err(Error::InvalidInput(format!("ground-truth count {} below 1", e.truth)));
    }
    Ok(())
}

/// Fraction of videos whose prediction is more than one count away.
pub fn obo(evals: &[CountEval]) -> Result<f64> {
    check_counts(evals)?;
    let misses = evals
        .iter()
        .filter(|e| (e.predicted - e.truth as f64).abs() > 1.0)
        .count();
    Ok(misses as f64 / evals.len() as f64)
}

/// Mean of `|pred - truth| / truth`.
pub fn mae(evals: &[CountEval]) -> Result<f64> {
    check_counts(evals)?;
    let sum: f64 = evals
        .iter()
        .map(|e| (e.predicted - e.truth as f64).abs() / e.truth as f64)
        .sum();
    Ok(sum / evals.len() as f64)
}

/// Per-frame periodicity scores and labels of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicityEval {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
}

impl PeriodicityEval {
    pub fn new(scores: Vec<f64>, truth: Vec<bool>) -> Result<Self> {
        let e = Self { scores, truth };
        e.validate()?;
        Ok(e)
    }

    fn validate(&self) -> Result<()> {
        if self.scores.len() != self.truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                self.scores.len(),
                self.truth.len()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("periodicity scores must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Fixed(f64),
    /// The score value that maximizes F1 on all frames pooled together.
    BestF1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Intersection over union of the predicted and true periodic masks.
    pub overlap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicityReport {
    pub threshold: f64,
    /// Averaged over videos.
    #[serde(flatten)]
    pub scores: DetectionScores,
    /// F1 over all frames pooled together.
    pub pooled_f1: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Confusion {
    fn of<'a>(pairs: impl Iterator<Item = (&'a f64, &'a bool)>, threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &t) in pairs {
            match (s >= threshold, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    /// A video with neither predicted nor true positives scores 1 everywhere;
    /// any other empty denominator gives 0.
    fn scores(self) -> DetectionScores {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        if self.tp + self.fp + self.fn_ == 0 {
            return DetectionScores {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                overlap: 1.0,
            };
        }
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionScores {
            precision,
            recall,
            f1,
            overlap: ratio(self.tp, self.tp + self.fp + self.fn_),
        }
    }
}

/// Scores of a single video at a fixed threshold (`score >= threshold` is positive).
pub fn detection_scores(eval: &PeriodicityEval, threshold: f64) -> Result<DetectionScores> {
    eval.validate()?;
    Ok(Confusion::of(eval.scores.iter().zip(&eval.truth), threshold).scores())
}

fn pooled(evals: &[PeriodicityEval]) -> impl Iterator<Item = (&f64, &bool)> {
    evals.iter().flat_map(|e| e.scores.iter().zip(&e.truth))
}

fn distinct_scores(evals: &[PeriodicityEval]) -> Vec<f64> {
    let mut v: Vec<f64> = pooled(evals).map(|(s, _)| *s).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

pub fn periodicity_scores(evals: &[PeriodicityEval], threshold: Threshold) -> Result<PeriodicityReport> {
    if evals.is_empty() || evals.iter().all(|e| e.scores.is_empty()) {
        return Err(Error::EmptyEval);
    }
    for e in evals {
        e.validate()?;
    }
    let pooled_f1 = |t: f64| Confusion::of(pooled(evals), t).scores().f1;
    let threshold = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::BestF1 => {
            let mut candidates = distinct_scores(evals);
            // just above the top score: nothing is predicted positive
            candidates.insert(0, candidates[0].next_up());
            candidates
                .into_iter()
                .fold((f64::NAN, f64::NEG_INFINITY), |best, t| {
                    let f = pooled_f1(t);
                    if f > best.1 {
                        (t, f)
                    } else {
                        best
                    }
                })
                .0
        }
    };
    let mut mean = DetectionScores::default();
    for e in evals {
        let s = Confusion::of(e.scores.iter().zip(&e.truth), threshold).scores();
        mean.precision += s.precision;
        mean.recall += s.recall;
        mean.f1 += s.f1;
        mean.overlap += s.overlap;
    }
    let n = evals.len() as f64;
    Ok(PeriodicityReport {
        threshold,
        scores: DetectionScores {
            precision: mean.precision / n,
            recall: mean.recall / n,
            f1: mean.f1 / n,
            overlap: mean.overlap / n,
        },
        pooled_f1: pooled_f1(threshold),
    })
}

/// `(recall, precision)` at every distinct score threshold, highest first.
pub fn pr_curve(evals: &[PeriodicityEval]) -> Result<Vec<(f64, f64)>> {
    for e in evals {
        e.validate()?;
    }
    if !pooled(evals).any(|(_, &t)| t) {
        return Err(Error::Undefined("precision-recall curve needs a positive frame".into()));
    }
    Ok(distinct_scores(evals)
        .into_iter()
        .map(|t| {
            let c = Confusion::of(pooled(evals), t);
            let s = c.scores();
            (s.recall, s.precision)
        })
        .collect())
}

/// Trapezoidal area under the pooled precision-recall curve, anchored at
/// recall 0 with the precision of the strictest threshold.
pub fn pr_auc(evals: &[PeriodicityEval]) -> Result<f64> {
    let curve = pr_curve(evals)?;
    let mut prev = (0.0, curve[0].1);
    let mut area = 0.0;
    for &(r, p) in &curve {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    Ok(area)
}
