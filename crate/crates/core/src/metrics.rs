//! Reconstruction quality metrics on nodal vectors.

use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};

/// Indices whose value exceeds one third of the maximum.
pub fn roi(x: &[f64]) -> Vec<usize> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let t = max / 3.0;
    (0..x.len()).filter(|&i| x[i] > t).collect()
}

pub fn mse(x: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    s / x.len() as f64
}

/// Dice overlap of the two ROIs; 1 when both are empty.
pub fn dice(x: &[f64], truth: &[f64]) -> f64 {
    let a = roi(x);
    let b = roi(truth);
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    // both lists are sorted
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    2.0 * common as f64 / (a.len() + b.len()) as f64
}

/// `|ROI(x)| / |ROI(truth)|`, 0 when the true ROI is empty.
pub fn vr(x: &[f64], truth: &[f64]) -> f64 {
    let t = roi(truth).len();
    if t == 0 {
        0.0
    } else {
        roi(x).len() as f64 / t as f64
    }
}

/// `10 log10(Σ truth² / Σ (x - truth)²)`; `+∞` for an exact match.
pub fn snr_db(x: &[f64], truth: &[f64]) -> f64 {
    let sig: f64 = truth.iter().map(|v| v * v).sum();
    let err: f64 = x.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (sig / err).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub dice: f64,
    pub vr: f64,
    /// `None` in JSON stands for `+∞` (exact reconstruction)
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    pub roi_recon: usize,
    pub roi_truth: usize,
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn evaluate(x: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    FmtError::check_len("reconstruction", truth.len(), x.len())?;
    if x.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(FmtError::param("metrics", "inputs must be finite"));
    }
    Ok(MetricsReport {
        mse: mse(x, truth),
        dice: dice(x, truth),
        vr: vr(x, truth),
        snr_db: snr_db(x, truth),
        roi_recon: roi(x).len(),
        roi_truth: roi(truth).len(),
    })
}
