//! Dual-teacher discrepancy and the sigmoid selection score that decides,
//! per reference sample, how much to distill from each teacher.

use crate::data::{SampleId, TaskDataset};
use crate::error::{Error, Result};
use crate::linalg::euclidean;
use crate::model::{encode, EncoderParams, FeatureVec};
use serde::{Deserialize, Serialize};

/// Threshold and scale of the selection score `eta = sigmoid((d - delta) / gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub delta: f64,
    pub gamma: f64,
}

impl SelectionParams {
    pub fn new(delta: f64, gamma: f64) -> Result<Self> {
        let params = SelectionParams { delta, gamma };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() {
            return Err(Error::param(format!("delta must be finite, got {}", self.delta)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::param(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            delta: 0.2,
            gamma: 1.0 / 6.0,
        }
    }
}

/// Discrepancy and selection score of one reference sample for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyRecord {
    pub sample_id: SampleId,
    pub d: f64,
    pub eta: f64,
}

impl DiscrepancyRecord {
    /// Computes `eta` from `d` under the given parameters, keeping the
    /// record consistent by construction.
    pub fn new(sample_id: SampleId, d: f64, params: &SelectionParams) -> Result<Self> {
        if !(d >= 0.0) {
            return Err(Error::param(format!("discrepancy must be nonnegative, got {d}")));
        }
        let eta = selection_score(d, params)?;
        Ok(DiscrepancyRecord { sample_id, d, eta })
    }
}

/// Euclidean distance between the two teachers' features for one input.
/// For unit vectors the result lies in [0, 2].
pub fn discrepancy(f_prev: &FeatureVec, f_pre: &FeatureVec) -> Result<f64> {
    if f_prev.dim() != f_pre.dim() {
        return Err(Error::shape(format!(
            "feature dims {} vs {}",
            f_prev.dim(),
            f_pre.dim()
        )));
    }
    Ok(euclidean(f_prev.values(), f_pre.values()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Selection score `sigmoid((d - delta) / gamma)`, strictly increasing in `d`.
pub fn selection_score(d: f64, params: &SelectionParams) -> Result<f64> {
    params.validate()?;
    Ok(sigmoid((d - params.delta) / params.gamma))
}

/// Mean dual-teacher discrepancy of two parameter snapshots over a dataset.
pub fn avg_domain_discrepancy(
    teacher_a: &EncoderParams,
    teacher_b: &EncoderParams,
    data: &TaskDataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset for discrepancy is empty".into()));
    }
    let mut sum = 0.0;
    for i in 0..data.len() {
        let x = data.inputs.row(i);
        let fa = encode(teacher_a, x)?;
        let fb = encode(teacher_b, x)?;
        sum += discrepancy(&fa, &fb)?;
    }
    Ok(sum / data.len() as f64)
}

/// The `k` sample ids with the largest selection scores, descending,
/// ties broken by ascending sample id. `k` beyond the record count
/// returns everything, still ranked.
pub fn rank_reference(records: &[DiscrepancyRecord], k: usize) -> Vec<SampleId> {
    let mut order: Vec<&DiscrepancyRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        b.eta
            .partial_cmp(&a.eta)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    order
        .into_iter()
        .take(k)
        .map(|r| r.sample_id.clone())
        .collect()
}
