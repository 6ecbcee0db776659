//! Evaluation metrics: the seven standard depth error/accuracy numbers
//! and cumulative overall IoU. All accumulation happens in f64 over
//! masked pixels only, independent of tensor element type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, MaskTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub pixel_count: usize,
}

impl MetricsReport {
    /// One `name=value` pair per line, fields in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |name: &str, v: f64| {
            out.push_str(&format!("{name}={v}\n"));
        };
        push("rel", self.rel);
        push("sq_rel", self.sq_rel);
        push("rmse", self.rmse);
        push("rmse_log", self.rmse_log);
        push("log10", self.log10);
        push("delta1", self.delta1);
        push("delta2", self.delta2);
        push("delta3", self.delta3);
        if let Some(iou) = self.iou {
            push("iou", iou);
        }
        out.push_str(&format!("pixel_count={}\n", self.pixel_count));
        out
    }
}

/// Accumulates pred/gt pairs across a dataset. Per-pixel terms are kept
/// and summed sorted at finalize, so no pixel or image ordering can
/// change any result, bit for bit.
#[derive(Debug, Default, Clone)]
pub struct MetricsAccumulator {
    abs_rel: Vec<f64>,
    sq_rel: Vec<f64>,
    sq_err: Vec<f64>,
    sq_log_err: Vec<f64>,
    abs_log10: Vec<f64>,
    hits: [usize; 3],
    count: usize,
    inter: usize,
    union: usize,
    has_masks: bool,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add every masked pixel of one pred/gt pair.
    pub fn add_depths<T: Element>(
        &mut self,
        pred: &Tensor<T>,
        gt: &Tensor<T>,
        mask: &MaskTensor,
    ) -> Result<()> {
        if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
            return Err(Error::ShapeMismatch(format!(
                "pred {:?}, gt {:?}, mask {:?} must agree",
                pred.shape(),
                gt.shape(),
                mask.shape()
            )));
        }
        for ((p, g), &keep) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
            if !keep {
                continue;
            }
            let (p, g) = (p.to_f64(), g.to_f64());
            if p <= 0.0 || g <= 0.0 {
                return Err(Error::Domain(format!(
                    "metrics need positive depths under the mask, got pred {p}, gt {g}"
                )));
            }
            let err = p - g;
            self.abs_rel.push(err.abs() / g);
            self.sq_rel.push(err * err / g);
            self.sq_err.push(err * err);
            let log_err = p.ln() - g.ln();
            self.sq_log_err.push(log_err * log_err);
            self.abs_log10.push((p.log10() - g.log10()).abs());
            let ratio = (p / g).max(g / p);
            // strict thresholds: a ratio of exactly 1.25 fails delta1
            for (n, hit) in self.hits.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(n as i32 + 1) {
                    *hit += 1;
                }
            }
            self.count += 1;
        }
        Ok(())
    }

    /// Add one pred/gt mask pair to the cumulative IoU tallies.
    pub fn add_masks(&mut self, pred: &MaskTensor, gt: &MaskTensor) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mask shapes {:?} vs {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.inter += usize::from(p && g);
            self.union += usize::from(p || g);
        }
        self.has_masks = true;
        Ok(())
    }

    pub fn finalize(&self) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("metrics over an empty mask".into()));
        }
        let mean = |v: &[f64]| {
            let mut buf = v.to_vec();
            crate::tensor::stable_sum(&mut buf) / v.len() as f64
        };
        let iou = if self.has_masks {
            if self.union == 0 {
                return Err(Error::InvalidArgument(
                    "IoU undefined: every mask in the dataset is empty".into(),
                ));
            }
            Some(self.inter as f64 / self.union as f64)
        } else {
            None
        };
        Ok(MetricsReport {
            rel: mean(&self.abs_rel),
            sq_rel: mean(&self.sq_rel),
            rmse: mean(&self.sq_err).sqrt(),
            rmse_log: mean(&self.sq_log_err).sqrt(),
            log10: mean(&self.abs_log10),
            delta1: self.hits[0] as f64 / self.count as f64,
            delta2: self.hits[1] as f64 / self.count as f64,
            delta3: self.hits[2] as f64 / self.count as f64,
            iou,
            pixel_count: self.count,
        })
    }
}

/// Metrics for a single pred/gt pair.
pub fn depth_metrics<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &MaskTensor,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add_depths(pred, gt, mask)?;
    acc.finalize()
}

/// Dataset-cumulative IoU: sum of intersections over sum of unions,
/// not the mean of per-image ratios.
pub fn overall_iou(pred_masks: &[MaskTensor], gt_masks: &[MaskTensor]) -> Result<f64> {
    if pred_masks.len() != gt_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} ground truths",
            pred_masks.len(),
            gt_masks.len()
        )));
    }
    let mut acc = MetricsAccumulator::new();
    for (p, g) in pred_masks.iter().zip(gt_masks) {
        acc.add_masks(p, g)?;
    }
    if !acc.has_masks || acc.union == 0 {
        return Err(Error::InvalidArgument(
            "IoU undefined: every mask in the dataset is empty".into(),
        ));
    }
    Ok(acc.inter as f64 / acc.union as f64)
}
