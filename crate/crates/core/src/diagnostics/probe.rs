//! Correlation between predicted and realized one-step improvements.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::ProbeRecord;

pub const MIN_PROBES: usize = 30;

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n: usize,
    pub r: f64,
    /// Mean correlation over random re-pairings of the same values.
    pub shuffled_r: f64,
    pub permutations: usize,
    pub min_r: f64,
    pub max_shuffled_r: f64,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.r > self.min_r && self.shuffled_r.abs() < self.max_shuffled_r
    }
}

pub fn check_probe(records: &[ProbeRecord], permutations: usize, seed: u64) -> Result<ProbeReport> {
    if records.len() < MIN_PROBES {
        return Err(Error::Insufficient(format!("{} probes recorded, at least {MIN_PROBES} needed", records.len())));
    }
    if records.iter().any(|p| !p.predicted.is_finite() || !p.realized.is_finite()) {
        return Err(Error::Config("probe records must be finite".into()));
    }
    let x: Vec<f64> = records.iter().map(|p| p.predicted).collect();
    let y: Vec<f64> = records.iter().map(|p| p.realized).collect();
    let r = pearson(&x, &y).ok_or_else(|| Error::Insufficient("probe values are constant".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.clone();
    let mut total = 0.0;
    for _ in 0..permutations.max(1) {
        shuffled.shuffle(&mut rng);
        total += pearson(&x, &shuffled).unwrap_or(0.0);
    }
    Ok(ProbeReport {
        n: records.len(),
        r,
        shuffled_r: total / permutations.max(1) as f64,
        permutations: permutations.max(1),
        min_r: 0.5,
        max_shuffled_r: 0.15,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }
}
