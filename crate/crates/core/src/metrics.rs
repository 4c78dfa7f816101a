//! Overlap metrics for binary masks and dataset-level reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{batch_tensors, threshold_logits, SegModelState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        Some(v) => Err(Error::Domain {
            context: what.into(),
            reason: format!("value {v} is not binary"),
        }),
        None => Ok(()),
    }
}

pub fn confusion_counts(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    gt.expect_shape(pred.shape(), "confusion_counts")?;
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.data().iter().zip(gt.data()) {
        match (*p == 1.0, *g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(2tp + smooth) / (2tp + fp + fn + smooth)`, with `0/0 = 1`.
pub fn dice_from_counts(c: &ConfusionCounts, smooth: f64) -> f64 {
    let num = 2.0 * c.tp as f64 + smooth;
    let den = (2 * c.tp + c.fp + c.fn_) as f64 + smooth;
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn dice_score(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    Ok(dice_from_counts(&confusion_counts(pred, gt)?, smooth))
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `(tp / (tp + fp), tp / (tp + fn))`, each `0/0` resolving to 1.
pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// F-measure `(1 + β²)PR / (β²P + R)`; zero when both P and R are zero.
pub fn f1_score(c: &ConfusionCounts, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::param("beta", format!("{beta} must be positive")));
    }
    let (p, r) = precision_recall(c);
    let b2 = beta * beta;
    let den = b2 * p + r;
    Ok(if den == 0.0 { 0.0 } else { (1.0 + b2) * p * r / den })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub dice: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ImageScores {
    pub fn from_counts(id: &str, c: &ConfusionCounts) -> Self {
        let (precision, recall) = precision_recall(c);
        ImageScores {
            id: id.to_string(),
            dice: dice_from_counts(c, 0.0),
            f1: f1_score(c, 1.0).expect("beta 1 is valid"),
            precision,
            recall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub aggregate: Aggregate,
    pub per_image: Vec<ImageScores>,
    pub config: serde_json::Value,
}

impl SegReport {
    /// Unweighted per-image means.
    pub fn from_rows(per_image: Vec<ImageScores>, config: serde_json::Value) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::param("pairs", "cannot report on an empty set"));
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageScores) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(SegReport {
            aggregate: Aggregate {
                dice: mean(|r| r.dice),
                f1: mean(|r| r.f1),
                precision: mean(|r| r.precision),
                recall: mean(|r| r.recall),
            },
            per_image,
            config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Pairs scored per forward batch in [`evaluate_dataset`].
const EVAL_BATCH: usize = 8;

/// Thresholds the model's prediction for each pair and scores it against its mask.
pub fn evaluate_dataset(model: &SegModelState, pairs: &[SamplePair], threshold: f64) -> Result<SegReport> {
    if pairs.is_empty() {
        return Err(Error::param("pairs", "cannot evaluate an empty set"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let (images, _) = batch_tensors(chunk)?;
        let logits = model.logits_batch(&images)?;
        for (i, pair) in chunk.iter().enumerate() {
            let pred = threshold_logits(&logits.batch_item(i), threshold)?.reshape(pair.mask.shape())?;
            rows.push(ImageScores::from_counts(&pair.id, &confusion_counts(&pred, &pair.mask)?));
        }
    }
    let config = serde_json::json!({
        "threshold": threshold,
        "aggregation": "per-image mean",
        "dice_smooth": 0.0,
        "f_beta": 1.0,
        "empty_vs_empty": 1.0,
    });
    SegReport::from_rows(rows, config)
}

/// Relative improvement `(new - old) / old` in percent.
pub fn relative_improvement_pct(old: f64, new: f64) -> f64 {
    (new - old) / old * 100.0
}
