//! Inferential primitives: binomial intervals, Cohen's kappa, paired t-tests
//! and Benjamini-Hochberg adjustment.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Kappa at or above this is conventionally "substantial" agreement.
pub const SUBSTANTIAL_KAPPA: f64 = 0.61;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no observations")]
    Empty,
    #[error("count {successes} exceeds trials {trials}")]
    Counts { successes: u64, trials: u64 },
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    Level(f64),
    #[error("p-value {0} outside [0, 1]")]
    PValue(f64),
    #[error("rating vectors differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("paired test needs at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite observation")]
    NonFinite,
}

fn z_for(level: f64) -> Result<f64, StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Level(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn half_width(&self) -> f64 {
        (self.high - self.low) / 2.0
    }
}

/// Wilson score interval for `successes / trials`, clamped to [0, 1].
pub fn wilson_interval(successes: u64, trials: u64, level: f64) -> Result<Interval, StatsError> {
    let z = z_for(level)?;
    if trials == 0 {
        return Err(StatsError::Empty);
    }
    if successes > trials {
        return Err(StatsError::Counts { successes, trials });
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if successes == 0 { 0.0 } else { (centre - half).clamp(0.0, p) };
    let high = if successes == trials { 1.0 } else { (centre + half).clamp(p, 1.0) };
    Ok(Interval { low, high })
}

/// Normal-approximation (Wald) interval, clamped to [0, 1]; reported
/// alongside Wilson for comparison only.
pub fn wald_interval(successes: u64, trials: u64, level: f64) -> Result<Interval, StatsError> {
    let z = z_for(level)?;
    if trials == 0 {
        return Err(StatsError::Empty);
    }
    if successes > trials {
        return Err(StatsError::Counts { successes, trials });
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let half = z * (p * (1.0 - p) / n).sqrt();
    Ok(Interval {
        low: (p - half).max(0.0),
        high: (p + half).min(1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    pub observed: f64,
    pub expected: f64,
    pub n: usize,
    /// Both raters used a single identical label throughout, so chance
    /// agreement is 1 and kappa is defined here as 1.
    pub degenerate: bool,
    pub substantial: bool,
}

/// Cohen's kappa for two binary raters.
pub fn cohens_kappa(a: &[bool], b: &[bool]) -> Result<Kappa, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let pa = a.iter().filter(|&&x| x).count() as f64 / n;
    let pb = b.iter().filter(|&&x| x).count() as f64 / n;
    let observed = agree / n;
    let expected = pa * pb + (1.0 - pa) * (1.0 - pb);
    let (kappa, degenerate) = if (1.0 - expected).abs() < f64::EPSILON {
        (1.0, true)
    } else {
        ((observed - expected) / (1.0 - expected), false)
    };
    Ok(Kappa {
        kappa,
        observed,
        expected,
        n: a.len(),
        degenerate,
        substantial: kappa >= SUBSTANTIAL_KAPPA,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub n: usize,
    /// Mean of `first - second`.
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub df: f64,
    pub p_value: f64,
    /// Zero-variance differences: p is 1 for an all-zero difference and 0
    /// otherwise.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `(first, second)` observations.
pub fn paired_t(pairs: &[(f64, f64)]) -> Result<PairedT, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFewPairs(pairs.len()));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let ss: f64 = diffs.iter().map(|d| (d - mean).powi(2)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    let df = n - 1.0;
    // Differences identical up to rounding count as zero variance.
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if sd <= 1e-12 * scale.max(1.0) {
        return Ok(PairedT {
            n: diffs.len(),
            mean_diff: mean,
            sd_diff: 0.0,
            t: None,
            df,
            p_value: if mean.abs() <= 1e-12 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedT {
        n: diffs.len(),
        mean_diff: mean,
        sd_diff: sd,
        t: Some(t),
        df,
        p_value,
        degenerate: false,
    })
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::PValue(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        let q = p_values[i] * m as f64 / (rank + 1) as f64;
        running = running.min(q);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}
