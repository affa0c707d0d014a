// SPDX-License-Identifier: Apache-2.0

//! Goodness-of-fit and interval helpers used by the test battery.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Minimum expected count per bin after merging.
pub const MIN_EXPECTED: f64 = 5.0;

/// Chi-square statistic and upper-tail p-value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

fn upper_tail(statistic: f64, df: f64) -> f64 {
    let d = ChiSquared::new(df).expect("df is positive");
    (1.0 - d.cdf(statistic)).clamp(0.0, 1.0)
}

/// Sums runs of `group` consecutive bins.
fn merge(counts: &[u64], group: usize) -> Vec<u64> {
    counts.chunks(group).map(|c| c.iter().sum()).collect()
}

/// Goodness of fit against the uniform distribution over `counts.len()` bins.
///
/// Adjacent bins are merged until every merged bin expects at least [`MIN_EXPECTED`]
/// samples. A short trailing group keeps its proportional expectation.
pub fn chi_square_uniform(counts: &[u64]) -> Result<ChiSquare> {
    let bins = counts.len();
    let total: u64 = counts.iter().sum();
    if bins < 2 || total == 0 {
        return Err(Error::InsufficientSamples(format!(
            "{total} samples over {bins} bins"
        )));
    }
    let per_bin = total as f64 / bins as f64;
    let group = (MIN_EXPECTED / per_bin).ceil().max(1.0) as usize;
    let merged = merge(counts, group);
    if merged.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "{total} samples cannot fill two bins of expected count {MIN_EXPECTED}"
        )));
    }
    let mut statistic = 0.0;
    for (i, &c) in merged.iter().enumerate() {
        let width = group.min(bins - i * group);
        let expected = per_bin * width as f64;
        statistic += (c as f64 - expected).powi(2) / expected;
    }
    let df = (merged.len() - 1) as f64;
    Ok(ChiSquare {
        statistic,
        df,
        p_value: upper_tail(statistic, df),
    })
}

/// Histograms `samples` over `0..domain` and tests for uniformity.
pub fn uniformity_test(samples: &[u64], domain: u64) -> Result<ChiSquare> {
    let mut counts = vec![0u64; domain as usize];
    for &s in samples {
        let slot = counts
            .get_mut(s as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("sample {s} outside 0..{domain}")))?;
        *slot += 1;
    }
    chi_square_uniform(&counts)
}

/// Two-sample test of homogeneity on a 2 x m contingency table.
///
/// Adjacent columns are merged greedily until each merged column expects at least
/// [`MIN_EXPECTED`] in both rows.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> Result<ChiSquare> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("histograms differ in length".into()));
    }
    let (ta, tb): (u64, u64) = (a.iter().sum(), b.iter().sum());
    if ta == 0 || tb == 0 {
        return Err(Error::InsufficientSamples("an empty sample".into()));
    }
    let total = (ta + tb) as f64;
    let (fa, fb) = (ta as f64 / total, tb as f64 / total);
    let mut cols: Vec<(u64, u64)> = Vec::new();
    let (mut ca, mut cb) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        ca += x;
        cb += y;
        let col = (ca + cb) as f64;
        if col * fa.min(fb) >= MIN_EXPECTED {
            cols.push((ca, cb));
            ca = 0;
            cb = 0;
        }
    }
    if ca + cb > 0 {
        match cols.last_mut() {
            Some(last) => {
                last.0 += ca;
                last.1 += cb;
            }
            None => cols.push((ca, cb)),
        }
    }
    if cols.len() < 2 {
        return Err(Error::InsufficientSamples(
            "fewer than two usable columns".into(),
        ));
    }
    let mut statistic = 0.0;
    for &(x, y) in &cols {
        let col = (x + y) as f64;
        let (ea, eb) = (col * fa, col * fb);
        statistic += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    let df = (cols.len() - 1) as f64;
    Ok(ChiSquare {
        statistic,
        df,
        p_value: upper_tail(statistic, df),
    })
}

/// Per-test significance level for a battery of `tests` tests at family level `alpha`.
pub fn bonferroni(alpha: f64, tests: usize) -> f64 {
    alpha / tests.max(1) as f64
}

/// Two-sided standard normal quantile for `confidence` (0.95 gives about 1.96).
pub fn z_for(confidence: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + confidence / 2.0)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson(successes: u64, trials: u64, confidence: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = z_for(confidence);
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Two-sided normal p-value of a z-score.
pub fn two_sided_p(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}
