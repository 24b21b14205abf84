//! Critical-slowing-down indicators: running-mean residuals, sliding
//! variance and lag-1 autocorrelation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Member, Prepared};
use crate::stats::CompositePoint;

pub const DETREND_WINDOW: usize = 100;
pub const INDICATOR_WINDOW: usize = 120;

/// Per-step indicator; entries before `valid_from` (and undefined windows)
/// are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSeries {
    pub values: Vec<f64>,
    pub valid_from: usize,
    pub window: usize,
}

impl IndicatorSeries {
    pub fn get(&self, step: usize) -> Option<f64> {
        self.values.get(step).copied().filter(|v| !v.is_nan())
    }
}

fn check_len(len: usize, window: usize) -> Result<()> {
    if window == 0 || len < window {
        return Err(Error::SeriesTooShort { len, window });
    }
    Ok(())
}

/// Series minus its centred moving average. Near the edges the window
/// shrinks symmetrically so it stays centred.
pub fn running_mean_detrend(series: &[f64], window: usize) -> Result<Vec<f64>> {
    check_len(series.len(), window)?;
    let n = series.len();
    let half = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in series {
        acc += v;
        prefix.push(acc);
    }
    Ok((0..n)
        .map(|t| {
            let h = half.min(t).min(n - 1 - t);
            let (lo, hi) = (t - h, t + h + 1);
            series[t] - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect())
}

/// Unbiased sample variance of one window.
pub fn window_variance(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Pearson correlation of `w[..n-1]` with `w[1..]`; NaN when either side is
/// constant.
pub fn window_autocorr_lag1(w: &[f64]) -> f64 {
    let x = &w[..w.len() - 1];
    let y = &w[1..];
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn sliding(series: &[f64], window: usize, f: fn(&[f64]) -> f64) -> Result<IndicatorSeries> {
    check_len(series.len(), window)?;
    let valid_from = window - 1;
    let values = (0..series.len())
        .map(|t| {
            if t < valid_from {
                f64::NAN
            } else {
                f(&series[t + 1 - window..=t])
            }
        })
        .collect();
    Ok(IndicatorSeries {
        values,
        valid_from,
        window,
    })
}

/// Variance of the window ending at each step.
pub fn sliding_variance(series: &[f64], window: usize) -> Result<IndicatorSeries> {
    if window < 2 {
        return Err(Error::SeriesTooShort { len: series.len(), window: 2 });
    }
    sliding(series, window, window_variance)
}

/// Lag-1 autocorrelation of the window ending at each step.
pub fn sliding_autocorr_lag1(series: &[f64], window: usize) -> Result<IndicatorSeries> {
    if window < 3 {
        return Err(Error::SeriesTooShort { len: series.len(), window: 3 });
    }
    sliding(series, window, window_autocorr_lag1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Variance,
    Autocorrelation,
}

impl Indicator {
    pub fn name(self) -> &'static str {
        match self {
            Indicator::Variance => "variance",
            Indicator::Autocorrelation => "autocorr",
        }
    }

    fn window_fn(self) -> fn(&[f64]) -> f64 {
        match self {
            Indicator::Variance => window_variance,
            Indicator::Autocorrelation => window_autocorr_lag1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsdOptions {
    pub detrend_window: usize,
    pub window: usize,
}

impl Default for CsdOptions {
    fn default() -> Self {
        Self {
            detrend_window: DETREND_WINDOW,
            window: INDICATOR_WINDOW,
        }
    }
}

/// Indicator values of one truncated member at the given leads. The record
/// is cut at the (paired) tipping time before detrending, and the value at
/// lead `L` summarises the window ending at step `t_tip - L - 1`.
pub fn member_indicator(
    row: &[f64],
    member: Member,
    leads: &[usize],
    indicator: Indicator,
    opts: &CsdOptions,
) -> Result<Vec<f64>> {
    let upto = member.t_tip.min(row.len());
    let residual = running_mean_detrend(&row[..upto], opts.detrend_window)?;
    let f = indicator.window_fn();
    leads
        .iter()
        .map(|&lead| {
            let end = upto
                .checked_sub(lead)
                .filter(|e| *e >= opts.window)
                .ok_or(Error::WindowUnderflow {
                    t_tip: member.t_tip,
                    lead,
                    window: opts.window,
                })?;
            Ok(f(&residual[end - opts.window..end]))
        })
        .collect()
}

/// Per-lead composite of one indicator over a group. Missing values are
/// skipped.
pub fn group_composite(
    prep: &Prepared,
    members: &[Member],
    leads: &[usize],
    indicator: Indicator,
    opts: &CsdOptions,
) -> Result<Vec<CompositePoint>> {
    let per_member = members
        .par_iter()
        .map(|m| member_indicator(prep.row(*m), *m, leads, indicator, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..leads.len())
        .map(|j| CompositePoint::from_values(per_member.iter().map(|v| v[j])))
        .collect())
}

/// Group A and group B composites of one indicator, lead by lead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsdComposite {
    pub indicator: Indicator,
    pub leads: Vec<usize>,
    pub a: Vec<CompositePoint>,
    pub b: Vec<CompositePoint>,
}

impl CsdComposite {
    /// Leads at which the 99% bands of A and B do not overlap.
    pub fn separated_leads(&self) -> Vec<usize> {
        self.leads
            .iter()
            .zip(self.a.iter().zip(&self.b))
            .filter(|(_, (a, b))| !a.overlaps99(b))
            .map(|(l, _)| *l)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        composite_csv(&self.leads, &self.a, &self.b)
    }
}

pub fn csd_composite(
    prep: &Prepared,
    leads: &[usize],
    indicator: Indicator,
    opts: &CsdOptions,
) -> Result<CsdComposite> {
    Ok(CsdComposite {
        indicator,
        leads: leads.to_vec(),
        a: group_composite(prep, &prep.groups.a, leads, indicator, opts)?,
        b: group_composite(prep, &prep.groups.b, leads, indicator, opts)?,
    })
}

/// `step,meanA,loA,hiA,meanB,loB,hiB`, with `step = -lead`, earliest first.
pub fn composite_csv(leads: &[usize], a: &[CompositePoint], b: &[CompositePoint]) -> String {
    let mut out = String::from("step,meanA,loA,hiA,meanB,loB,hiB\n");
    let mut order: Vec<usize> = (0..leads.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(leads[i]));
    for i in order {
        let (pa, pb) = (&a[i], &b[i]);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            -(leads[i] as i64),
            pa.mean,
            pa.lo99,
            pa.hi99,
            pb.mean,
            pb.lo99,
            pb.hi99
        );
    }
    out
}

/// `step,value`, skipping missing entries.
pub fn write_series_csv(path: &Path, series: &IndicatorSeries) -> Result<()> {
    let mut out = String::from("step,value\n");
    for (k, v) in series.values.iter().enumerate() {
        if !v.is_nan() {
            let _ = writeln!(out, "{k},{v}");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn alternating(n: usize) -> Vec<f64> {
        (0..n).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn detrend_examples() {
        let flat = running_mean_detrend(&[3.5; 300], 100).unwrap();
        assert!(flat.iter().all(|v| v.abs() < 1e-12));

        let line: Vec<f64> = (0..400).map(|t| 2.0 - 0.3 * t as f64).collect();
        let r = running_mean_detrend(&line, 100).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-10), "symmetric windows cancel a line");

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..2000)
            .map(|t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (2.0 * std::f64::consts::PI * t as f64 / 500.0).sin() + e
            })
            .collect();
        let r = running_mean_detrend(&s, 100).unwrap();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");

        assert!(matches!(
            running_mean_detrend(&[1.0; 50], 100),
            Err(Error::SeriesTooShort { len: 50, window: 100 })
        ));
    }

    #[test]
    fn variance_examples() {
        let v = sliding_variance(&[2.0; 200], 120).unwrap();
        assert_eq!(v.valid_from, 119);
        assert!(v.values[..119].iter().all(|x| x.is_nan()));
        assert!(v.values[119..].iter().all(|x| *x == 0.0));

        let alt = sliding_variance(&alternating(120), 120).unwrap();
        assert!((alt.values[119] - 120.0 / 119.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = sliding_variance(&s, 120).unwrap();
        let valid = &v.values[v.valid_from..];
        let m = valid.iter().sum::<f64>() / valid.len() as f64;
        assert!((m - 1.0).abs() < 0.05, "{m}");
        assert!(valid.iter().all(|x| *x >= 0.0));

        assert!(sliding_variance(&[1.0; 10], 120).is_err());
    }

    #[test]
    fn autocorr_examples() {
        let a = sliding_autocorr_lag1(&alternating(120), 120).unwrap();
        assert!((a.values[119] + 1.0).abs() < 1e-12);
        let c = sliding_autocorr_lag1(&[1.0; 150], 120).unwrap();
        assert_eq!(c.get(130), None);
        assert!(c.values[130].is_nan());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = 0.0;
        let s: Vec<f64> = (0..50_000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = 0.8 * x + e;
                x
            })
            .collect();
        // The estimate is biased low by about (1 + 4 phi) / window.
        let a = sliding_autocorr_lag1(&s, 500).unwrap();
        let valid = &a.values[a.valid_from..];
        let m = valid.iter().sum::<f64>() / valid.len() as f64;
        assert!((m - 0.8).abs() < 0.03, "{m}");
        assert!(valid.iter().all(|r| (-1.0..=1.0).contains(r)));
    }

    #[test]
    fn composite_csv_orders_by_step() {
        let p = CompositePoint::from_values([1.0, 2.0]);
        let csv = composite_csv(&[0, 10], &[p.clone(), p.clone()], &[p.clone(), p]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,meanA,loA,hiA,meanB,loB,hiB");
        assert!(lines[1].starts_with("-10,1.5,"));
        assert!(lines[2].starts_with("0,1.5,"));
    }

    #[test]
    fn member_indicator_uses_window_before_lead() {
        let row: Vec<f64> = (0..600).map(|k| ((k * 7919) % 13) as f64).collect();
        let m = Member { row: 0, t_tip: 500 };
        let opts = CsdOptions::default();
        let got = member_indicator(&row, m, &[0, 30], Indicator::Variance, &opts).unwrap();
        let resid = running_mean_detrend(&row[..500], 100).unwrap();
        assert_eq!(got[0], window_variance(&resid[380..500]));
        assert_eq!(got[1], window_variance(&resid[350..470]));
        assert!(member_indicator(&row, Member { row: 0, t_tip: 100 }, &[0], Indicator::Variance, &opts).is_err());
    }
}
