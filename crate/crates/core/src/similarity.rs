//! APM similarity: row-averaged total-variation distance and the memoization
//! rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Apm, ApmRef};

const DISTRIBUTION_TOL: f64 = 1e-4;

/// A similarity in [0, 1]; 1 means identical APMs.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("similarity {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    /// Clamps rounding noise into range.
    pub(crate) fn clamped(value: f64) -> Self {
        Self(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Half the L1 distance between two probability rows.
pub fn tv_distance(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "rows of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(tv_unchecked(p, q))
}

fn check_distribution(p: &[f32]) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::NotDistribution("negative or NaN entry".into()));
    }
    let sum: f64 = p.iter().map(|v| f64::from(*v)).sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::NotDistribution(format!("row sums to {sum}")));
    }
    Ok(())
}

#[inline]
fn tv_unchecked(p: &[f32], q: &[f32]) -> f64 {
    let l1: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
        .sum();
    0.5 * l1
}

/// `1 - (1/L) Σ_p TV(a[p,:], b[p,:])`
pub fn similarity_score(a: &Apm, b: &Apm) -> Result<SimilarityScore> {
    similarity_score_ref(a.view(), b.view())
}

/// Borrowed form of [`similarity_score`]. Rows are trusted to be
/// distributions (APMs validate on construction), so only shapes are checked.
pub fn similarity_score_ref(a: ApmRef<'_>, b: ApmRef<'_>) -> Result<SimilarityScore> {
    let l = a.seq_len();
    if l != b.seq_len() {
        return Err(Error::shape(format!("APMs with L={l} and L={}", b.seq_len())));
    }
    if l == 0 {
        return Err(Error::shape("empty APM"));
    }
    let total: f64 = (0..l).map(|p| tv_unchecked(a.row(p), b.row(p))).sum();
    Ok(SimilarityScore::clamped(1.0 - total / l as f64))
}

/// Unweighted mean of per-head scores.
pub fn similarity_score_multihead(a: &[Apm], b: &[Apm]) -> Result<SimilarityScore> {
    let a: Vec<_> = a.iter().map(Apm::view).collect();
    let b: Vec<_> = b.iter().map(Apm::view).collect();
    similarity_score_multihead_ref(&a, &b)
}

pub fn similarity_score_multihead_ref(a: &[ApmRef<'_>], b: &[ApmRef<'_>]) -> Result<SimilarityScore> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} heads vs {} heads", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape("no heads"));
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += similarity_score_ref(*x, *y)?.value();
    }
    Ok(SimilarityScore::clamped(sum / a.len() as f64))
}

/// Fraction of (sequence, layer) attention computations replaced by lookups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoizationRate {
    pub successes: u64,
    pub sequences: u64,
    pub layers: u64,
}

impl MemoizationRate {
    pub fn value(&self) -> f64 {
        self.successes as f64 / (self.sequences * self.layers) as f64
    }
}

/// `M / (N × L)`
pub fn memoization_rate(m: u64, n: u64, l: u64) -> Result<MemoizationRate> {
    if n == 0 || l == 0 {
        return Err(Error::invalid("memoization rate needs n > 0 and l > 0"));
    }
    if m > n * l {
        return Err(Error::invalid(format!("{m} successes exceed {n}x{l}")));
    }
    Ok(MemoizationRate {
        successes: m,
        sequences: n,
        layers: l,
    })
}
