//! Empirical quantiles, composite bands, two-sample KS tests and the
//! delay-tercile split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantile of already sorted data, linear interpolation between order
/// statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Finite values of `values`, sorted.
pub fn sorted_finite(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Lower and upper quantiles of a central band holding `level` of the mass.
pub fn central_band(sorted: &[f64], level: f64) -> (f64, f64) {
    let tail = 0.5 * (1.0 - level);
    (quantile_sorted(sorted, tail), quantile_sorted(sorted, 1.0 - tail))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Per-column central bands of an `n_rows x n_cols` matrix for each level.
pub fn pointwise_quantiles(rows: &[&[f64]], levels: &[f64]) -> Result<Vec<Band>> {
    if rows.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            got: rows.len(),
        });
    }
    let n_cols = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != n_cols) {
        return Err(Error::ShapeMismatch {
            what: "row length",
            expected: n_cols,
            got: bad.len(),
        });
    }
    let mut bands: Vec<Band> = levels
        .iter()
        .map(|&level| Band {
            level,
            lower: Vec::with_capacity(n_cols),
            upper: Vec::with_capacity(n_cols),
        })
        .collect();
    let mut column = Vec::with_capacity(rows.len());
    for j in 0..n_cols {
        column.clear();
        column.extend(rows.iter().map(|r| r[j]));
        column.sort_by(f64::total_cmp);
        for band in &mut bands {
            let (lo, hi) = central_band(&column, band.level);
            band.lower.push(lo);
            band.upper.push(hi);
        }
    }
    Ok(bands)
}

/// Mean and central bands of one composite column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositePoint {
    pub mean: f64,
    pub lo99: f64,
    pub hi99: f64,
    pub lo75: f64,
    pub hi75: f64,
    pub count: usize,
}

impl CompositePoint {
    /// Summarise the finite entries of `values`; NaN summary when none are.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let sorted = sorted_finite(values);
        if sorted.is_empty() {
            return Self {
                mean: f64::NAN,
                lo99: f64::NAN,
                hi99: f64::NAN,
                lo75: f64::NAN,
                hi75: f64::NAN,
                count: 0,
            };
        }
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let (lo99, hi99) = central_band(&sorted, 0.99);
        let (lo75, hi75) = central_band(&sorted, 0.75);
        Self {
            mean,
            lo99,
            hi99,
            lo75,
            hi75,
            count: sorted.len(),
        }
    }

    pub fn width99(&self) -> f64 {
        self.hi99 - self.lo99
    }

    pub fn overlaps99(&self, other: &Self) -> bool {
        self.lo99 <= other.hi99 && other.lo99 <= self.hi99
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// True when the two samples are judged to come from different
    /// distributions.
    pub decision: bool,
    pub alpha: f64,
    pub critical: f64,
}

/// Asymptotic critical value `c(alpha) * sqrt((n + m) / (n m))`.
pub fn ks_critical_value(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(0.5 * alpha).ln() / 2.0).sqrt();
    let (n, m) = (n as f64, m as f64);
    c * ((n + m) / (n * m)).sqrt()
}

/// Two-sample Kolmogorov–Smirnov test. Non-finite entries are dropped.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<KsResult> {
    let xa = sorted_finite(a.iter().copied());
    let xb = sorted_finite(b.iter().copied());
    if xa.is_empty() || xb.is_empty() {
        return Err(Error::EmptySample);
    }
    let (n, m) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut statistic: f64 = 0.0;
    while i < n && j < m {
        let x = xa[i].min(xb[j]);
        while i < n && xa[i] <= x {
            i += 1;
        }
        while j < m && xb[j] <= x {
            j += 1;
        }
        let gap = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        statistic = statistic.max(gap);
    }
    let critical = ks_critical_value(n, m, alpha);
    Ok(KsResult {
        statistic,
        decision: statistic > critical,
        alpha,
        critical,
    })
}

/// Split group members into terciles of `t_tip - t_rate_max`.
///
/// `members` holds `(trajectory_index, t_tip)`; the returned sets index into
/// `members`. Ties are broken by trajectory index; sizes differ by at most one.
pub fn delay_quantile_split(members: &[(usize, usize)], t_rate_max: usize) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by_key(|&k| {
        let (traj, t_tip) = members[k];
        (t_tip as i64 - t_rate_max as i64, traj)
    });
    let n = order.len();
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut start = 0;
    for (q, set) in out.iter_mut().enumerate() {
        let size = n / 3 + usize::from(q < n % 3);
        set.extend_from_slice(&order[start..start + size]);
        start += size;
    }
    out
}
