//! Cepstral mean-variance normalization.

use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, Utterance, UtteranceInput};
use crate::error::{Error, Result};

/// Floor applied to every per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    /// Population variance, floored at [`VARIANCE_FLOOR`].
    pub variance: Vec<f64>,
    pub count: u64,
}

impl CmvnStats {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn from_matrices<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0u64;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            } else if m.cols() != sum.len() {
                return Err(Error::Shape(format!(
                    "feature dim {} does not match {}",
                    m.cols(),
                    sum.len()
                )));
            }
            for r in 0..m.rows() {
                for (c, &x) in m.row(r).iter().enumerate() {
                    let x = f64::from(x);
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
            count += m.rows() as u64;
        }
        if count == 0 {
            return Err(Error::Data(
                "CMVN statistics need at least one speech frame".into(),
            ));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let variance = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(VARIANCE_FLOOR))
            .collect();
        Ok(CmvnStats {
            mean,
            variance,
            count,
        })
    }
}

/// Per-dimension statistics over all frames of every speech utterance.
pub fn compute_cmvn_stats(dataset: &[Utterance]) -> Result<CmvnStats> {
    CmvnStats::from_matrices(dataset.iter().filter_map(|u| match &u.input {
        UtteranceInput::Speech(f) => Some(f),
        UtteranceInput::Phonemes(_) => None,
    }))
}

/// `(x - mean) / sqrt(variance)` per dimension.
pub fn apply_cmvn(features: &FeatureMatrix, stats: &CmvnStats) -> Result<FeatureMatrix> {
    if features.cols() != stats.dims() {
        return Err(Error::Shape(format!(
            "features have {} dims, CMVN stats have {}",
            features.cols(),
            stats.dims()
        )));
    }
    let inv_std: Vec<f64> = stats.variance.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut out = features.clone();
    let cols = out.cols();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let c = i % cols;
        *x = ((f64::from(*x) - stats.mean[c]) * inv_std[c]) as f32;
    }
    Ok(out)
}

/// Applies CMVN to every speech utterance in place.
pub fn normalize_utterances(utts: &mut [Utterance], stats: &CmvnStats) -> Result<()> {
    for u in utts {
        if let UtteranceInput::Speech(f) = &mut u.input {
            *f = apply_cmvn(f, stats)?;
        }
    }
    Ok(())
}
