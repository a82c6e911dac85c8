//! Evaluation metrics: symmetric mean absolute relative percent difference
//! (MARPD), predictive Gaussian NLL, and quantile-calibration ECE, with
//! optional per-landmark breakdowns at named spatial locations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::atlas::{nll_loss, GaussianParams};
use crate::error::{Error, Result};
use crate::inference::gaussian_cdf;

/// Symmetric mean absolute relative percent difference:
/// `mean over samples of 100·|ŷ − y| / ((|ŷ| + |y|)/2)`.
///
/// Symmetric in its arguments and invariant to scaling both by the same
/// positive factor. A pair with both values exactly zero has an undefined
/// relative difference and is an error.
pub fn marpd(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Data("MARPD of an empty sample".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut acc = 0.0;
    for (idx, (p, t)) in predictions.iter().zip(truths).enumerate() {
        let denom = (p.abs() + t.abs()) / 2.0;
        if denom == 0.0 {
            return Err(Error::Domain(format!(
                "MARPD undefined at index {idx}: prediction and truth are both zero"
            )));
        }
        acc += 100.0 * (p - t).abs() / denom;
    }
    Ok(acc / predictions.len() as f64)
}

/// Mean Gaussian negative log-likelihood of the truths under the predicted
/// distributions. Can be negative for tight, well-placed predictions.
pub fn mean_nll(params: &[GaussianParams], truths: &[f64]) -> Result<f64> {
    if params.is_empty() {
        return Err(Error::Data("NLL of an empty sample".into()));
    }
    if params.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} truths",
            params.len(),
            truths.len()
        )));
    }
    let mut acc = 0.0;
    for (p, y) in params.iter().zip(truths) {
        acc += nll_loss(p, *y)?;
    }
    Ok(acc / params.len() as f64)
}

/// Quantile-calibration expected calibration error: for coverage levels
/// `p = (j + ½)/bins`, the observed fraction of truths with predicted CDF
/// value ≤ p is compared with p itself; ECE is the mean absolute gap.
pub fn ece(params: &[GaussianParams], truths: &[f64], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one coverage level".into()));
    }
    if params.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} truths",
            params.len(),
            truths.len()
        )));
    }
    if params.len() < bins {
        return Err(Error::Data(format!(
            "ECE with {bins} levels needs at least {bins} samples, got {}",
            params.len()
        )));
    }
    let cdfs: Vec<f64> = params
        .iter()
        .zip(truths)
        .map(|(p, y)| gaussian_cdf(*y, p))
        .collect::<Result<_>>()?;
    let n = cdfs.len() as f64;
    let mut acc = 0.0;
    for j in 0..bins {
        let level = (j as f64 + 0.5) / bins as f64;
        let observed = cdfs.iter().filter(|&&c| c <= level).count() as f64 / n;
        acc += (observed - level).abs();
    }
    Ok(acc / bins as f64)
}

/// Empirical coverage of the central ±k·σ band.
pub fn coverage(params: &[GaussianParams], truths: &[f64], k: f64) -> Result<f64> {
    if params.is_empty() || params.len() != truths.len() {
        return Err(Error::Data("coverage needs aligned, nonempty samples".into()));
    }
    let inside = params
        .iter()
        .zip(truths)
        .filter(|(p, y)| (*y - p.mean).abs() <= k * p.std_dev())
        .count();
    Ok(inside as f64 / params.len() as f64)
}

/// Metrics of one named landmark (records at the nearest grid depth).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkMetrics {
    /// The grid depth the landmark mapped to.
    pub x: f64,
    pub n: usize,
    pub marpd: f64,
    pub mean_nll: f64,
    /// Absent when the landmark has fewer samples than ECE levels.
    pub ece: Option<f64>,
}

/// Evaluation summary: overall metrics plus per-landmark breakdowns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub marpd: f64,
    pub mean_nll: f64,
    pub ece: f64,
    pub coverage_2sd: f64,
    pub landmarks: BTreeMap<String, LandmarkMetrics>,
}

impl EvalReport {
    /// Aligned-column text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>8} {:>10} {:>10} {:>8} {:>10}\n",
            "group", "n", "MARPD(%)", "NLL", "ECE", "cover2sd"
        ));
        out.push_str(&format!(
            "{:<14} {:>8} {:>10.4} {:>10.4} {:>8.4} {:>10.4}\n",
            "overall", self.n, self.marpd, self.mean_nll, self.ece, self.coverage_2sd
        ));
        for (name, lm) in &self.landmarks {
            let ece = lm
                .ece
                .map(|v| format!("{v:>8.4}"))
                .unwrap_or_else(|| format!("{:>8}", "-"));
            out.push_str(&format!(
                "{:<14} {:>8} {:>10.4} {:>10.4} {} {:>10}\n",
                name, lm.n, lm.marpd, lm.mean_nll, ece, ""
            ));
        }
        out
    }
}

/// Builds the full report. `xs` carries the location of each sample (None
/// entries are skipped for landmark grouping); landmarks map names to depths,
/// which are matched to the nearest distinct observed location.
pub fn report(
    params: &[GaussianParams],
    truths: &[f64],
    xs: Option<&[Option<f64>]>,
    landmarks: &BTreeMap<String, f64>,
    bins: usize,
) -> Result<EvalReport> {
    let means: Vec<f64> = params.iter().map(|p| p.mean).collect();
    let overall_marpd = marpd(&means, truths)?;
    let overall_nll = mean_nll(params, truths)?;
    let overall_ece = ece(params, truths, bins)?;
    let cover = coverage(params, truths, 2.0)?;

    let mut landmark_metrics = BTreeMap::new();
    if let Some(xs) = xs {
        if xs.len() != params.len() {
            return Err(Error::Data("location vector length mismatch".into()));
        }
        let mut distinct: Vec<f64> = xs.iter().flatten().copied().collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if !distinct.is_empty() {
            for (name, depth) in landmarks {
                let nearest = *distinct
                    .iter()
                    .min_by(|a, b| {
                        (*a - depth).abs().total_cmp(&(*b - depth).abs())
                    })
                    .unwrap();
                let idx: Vec<usize> = (0..params.len())
                    .filter(|&i| xs[i] == Some(nearest))
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let lp: Vec<GaussianParams> = idx.iter().map(|&i| params[i]).collect();
                let lt: Vec<f64> = idx.iter().map(|&i| truths[i]).collect();
                let lm: Vec<f64> = lp.iter().map(|p| p.mean).collect();
                landmark_metrics.insert(
                    name.clone(),
                    LandmarkMetrics {
                        x: nearest,
                        n: idx.len(),
                        marpd: marpd(&lm, &lt)?,
                        mean_nll: mean_nll(&lp, &lt)?,
                        ece: if idx.len() >= bins {
                            Some(ece(&lp, &lt, bins)?)
                        } else {
                            None
                        },
                    },
                );
            }
        }
    }

    Ok(EvalReport {
        n: params.len(),
        marpd: overall_marpd,
        mean_nll: overall_nll,
        ece: overall_ece,
        coverage_2sd: cover,
        landmarks: landmark_metrics,
    })
}
