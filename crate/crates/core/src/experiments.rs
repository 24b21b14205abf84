//! Lead-time sweeps, the envelope baseline, probability timelines,
//! out-of-sample grids and report assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{System, SystemConfig, SystemParams};
use crate::ensemble::{derive_seed, run_ensemble};
use crate::error::{Error, Result};
use crate::indicators::{csd_composite, member_indicator, CsdOptions, Indicator};
use crate::lrp::explain;
use crate::neuralnet::{predict_tip, train_model, write_model, Dataset, ModelParameters, TrainConfig, TrainLog};
use crate::preprocess::{
    member_segments, prepare, Escape, Groups, Label, Member, PrepareOptions, PrepareSize, Prepared, SegmentNorm,
};
use crate::stats::{central_band, ks_two_sample, sorted_finite, CompositePoint};

pub const CONFIG_VERSION: u32 = 1;
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Minutes-long sanity run.
    Smoke,
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::InvalidConfig(format!("unknown scale `{other}`"))),
        }
    }
}

/// Values of one swept parameter with the ensemble used for each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub values: Vec<f64>,
    pub runs: usize,
    /// Evaluation pairs per value, at most.
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrpConfig {
    pub lead: usize,
    /// Test members per group explained.
    pub members: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: u32,
    pub params: SystemParams,
    pub seed: u64,
    pub runs: usize,
    pub window: usize,
    pub leads: Vec<usize>,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Tipping members with an earlier tipping time are not sampled.
    pub min_t_tip: usize,
    pub reference_rows: usize,
    pub envelope_level: f64,
    pub norm: SegmentNorm,
    pub train: TrainConfig,
    pub csd: CsdOptions,
    pub ks_alpha: f64,
    pub rate_sweep: SweepConfig,
    pub noise_sweep: SweepConfig,
    pub lrp: LrpConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(System::Saddle, Scale::Desk)
    }
}

impl PipelineConfig {
    pub fn preset(system: System, scale: Scale) -> Self {
        let (leads, rates, noises): (Vec<usize>, Vec<f64>, Vec<f64>) = match system {
            System::Saddle => (vec![0, 10, 30, 50, 75, 100], vec![1.0, 1.25, 1.5, 1.9], vec![0.001, 0.008, 0.02]),
            System::Bautin => (vec![0, 10, 30, 50, 100, 130], vec![0.05, 0.1, 0.2], vec![0.1, 0.15, 0.2]),
            System::Compost => (vec![0, 10, 30, 50, 100], vec![0.05, 0.1, 0.15], vec![0.4, 1.0, 2.0]),
        };
        let window = 200;
        let min_t_tip = window + leads.iter().max().copied().unwrap_or(0);
        let desk = Self {
            version: CONFIG_VERSION,
            params: SystemParams::default_for(system),
            seed: 0,
            runs: 12_000,
            window,
            leads,
            train_pairs: 2500,
            test_pairs: 500,
            min_t_tip,
            reference_rows: 2000,
            envelope_level: 0.99,
            norm: SegmentNorm::default(),
            train: TrainConfig::default(),
            csd: CsdOptions::default(),
            ks_alpha: 0.01,
            rate_sweep: SweepConfig {
                values: rates,
                runs: 30_000,
                pairs: 1000,
            },
            noise_sweep: SweepConfig {
                values: noises,
                runs: 24_000,
                pairs: 3000,
            },
            lrp: LrpConfig { lead: 0, members: 500 },
        };
        match scale {
            Scale::Desk => desk,
            Scale::Smoke => Self {
                runs: 1500,
                leads: vec![0, 10, 50],
                min_t_tip: window + 50,
                train_pairs: 150,
                test_pairs: 50,
                reference_rows: 300,
                train: TrainConfig {
                    max_epochs: 3,
                    ..TrainConfig::default()
                },
                rate_sweep: SweepConfig {
                    values: desk.rate_sweep.values[..2].to_vec(),
                    runs: 1500,
                    pairs: 100,
                },
                noise_sweep: SweepConfig {
                    values: vec![desk.noise_sweep.values[0], *desk.noise_sweep.values.last().unwrap()],
                    runs: 1500,
                    pairs: 100,
                },
                lrp: LrpConfig { lead: 0, members: 20 },
                ..desk.clone()
            },
        }
    }

    pub fn system(&self) -> System {
        self.params.system()
    }

    pub fn system_config(&self) -> SystemConfig {
        SystemConfig::new(self.params)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not {CONFIG_VERSION}", self.version));
        }
        self.system_config().validate()?;
        self.train.validate()?;
        if self.leads.is_empty() || self.leads.windows(2).any(|w| w[0] >= w[1]) {
            return bad("leads must be non-empty and strictly increasing".into());
        }
        let max_lead = *self.leads.last().unwrap();
        if self.min_t_tip < self.window + max_lead {
            return bad(format!(
                "min_t_tip {} is below window + largest lead ({})",
                self.min_t_tip,
                self.window + max_lead
            ));
        }
        if self.min_t_tip < self.csd.window + max_lead {
            return bad("min_t_tip is below indicator window + largest lead".into());
        }
        if self.runs == 0 || self.train_pairs == 0 || self.test_pairs == 0 {
            return bad("runs, train_pairs and test_pairs must be positive".into());
        }
        if !(self.ks_alpha > 0.0 && self.ks_alpha < 1.0) {
            return bad(format!("ks_alpha must lie in (0, 1), got {}", self.ks_alpha));
        }
        if !(self.envelope_level > 0.0 && self.envelope_level < 1.0) {
            return bad(format!("envelope_level must lie in (0, 1), got {}", self.envelope_level));
        }
        for (name, sweep) in [("rate_sweep", &self.rate_sweep), ("noise_sweep", &self.noise_sweep)] {
            if sweep.runs == 0 || sweep.pairs == 0 || sweep.values.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} needs positive runs and pairs and finite values"));
            }
        }
        if !self.leads.contains(&self.lrp.lead) {
            return bad(format!("lrp lead {} is not in the lead grid", self.lrp.lead));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn prepare_options(&self, size: PrepareSize, purpose: &str) -> PrepareOptions {
        PrepareOptions {
            envelope_level: self.envelope_level,
            reference_rows: self.reference_rows,
            size,
            min_t_tip: self.min_t_tip,
            seed: derive_seed(self.seed, purpose),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    LeadTime,
    Evaluation,
    Timeline,
    Ks,
    DelayQuantile,
    ForcingRate,
    NoiseMagnitude,
    CsdVariance,
    CsdAutocorr,
    Lrp,
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            ReportKind::LeadTime => "lead_time",
            ReportKind::Evaluation => "evaluation",
            ReportKind::Timeline => "timeline",
            ReportKind::Ks => "ks",
            ReportKind::DelayQuantile => "delay_quantile",
            ReportKind::ForcingRate => "forcing_rate",
            ReportKind::NoiseMagnitude => "noise_magnitude",
            ReportKind::CsdVariance => "csd_variance",
            ReportKind::CsdAutocorr => "csd_autocorr",
            ReportKind::Lrp => "lrp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(name: &str, values: impl IntoIterator<Item = f64>) -> Self {
        Self {
            name: name.into(),
            values: values.into_iter().collect(),
        }
    }

    fn leads(leads: &[usize]) -> Self {
        Self::new("lead", leads.iter().map(|&l| l as f64))
    }
}

/// A metric table over the cartesian product of its axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ReportKind,
    pub system: System,
    pub axes: Vec<Axis>,
    pub metrics: Vec<String>,
    /// One row per cell, last axis varying fastest.
    pub values: Vec<Vec<f64>>,
}

impl ExperimentReport {
    pub fn new(kind: ReportKind, system: System, axes: Vec<Axis>, metrics: &[&str], values: Vec<Vec<f64>>) -> Result<Self> {
        let cells: usize = axes.iter().map(|a| a.values.len()).product();
        if values.len() != cells {
            return Err(Error::ShapeMismatch {
                what: "report cells",
                expected: cells,
                got: values.len(),
            });
        }
        if let Some(row) = values.iter().find(|r| r.len() != metrics.len()) {
            return Err(Error::ShapeMismatch {
                what: "report metrics",
                expected: metrics.len(),
                got: row.len(),
            });
        }
        Ok(Self {
            kind,
            system,
            axes,
            metrics: metrics.iter().map(|m| m.to_string()).collect(),
            values,
        })
    }

    pub fn file_name(&self) -> String {
        format!("report_{}_{}.csv", self.kind.name(), self.system)
    }

    fn coords(&self, mut cell: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            let n = axis.values.len();
            out[k] = axis.values[cell % n];
            cell /= n;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let header: Vec<&str> = self
            .axes
            .iter()
            .map(|a| a.name.as_str())
            .chain(self.metrics.iter().map(String::as_str))
            .collect();
        let mut out = header.join(",");
        out.push('\n');
        for (cell, row) in self.values.iter().enumerate() {
            let fields: Vec<String> = self.coords(cell).iter().chain(row).map(|v| v.to_string()).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Metric value at the cell with the given coordinates.
    pub fn get(&self, coords: &[f64], metric: &str) -> Option<f64> {
        let m = self.metrics.iter().position(|x| x == metric)?;
        let mut cell = 0;
        for (axis, c) in self.axes.iter().zip(coords) {
            cell = cell * axis.values.len() + axis.values.iter().position(|v| v == c)?;
        }
        self.values.get(cell).map(|r| r[m])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(self.file_name());
        fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))
    }
}

/// A numeric CSV read back by column name.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ReportTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let columns = reader
            .headers()
            .map_err(|e| Error::csv(path, e))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::MalformedMeta {
                        path: path.into(),
                        msg: format!("not a number: `{f}`"),
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// Rows whose `key` column equals `value`.
    pub fn filter(&self, key: &str, value: f64) -> Self {
        let k = self.columns.iter().position(|c| c == key);
        Self {
            columns: self.columns.clone(),
            rows: self
                .rows
                .iter()
                .filter(|r| k.is_some_and(|k| r[k] == value))
                .cloned()
                .collect(),
        }
    }

    pub fn lookup(&self, key: &str, value: f64, metric: &str) -> Option<f64> {
        self.filter(key, value).column(metric)?.first().copied()
    }
}

/// Train, validation and test pairs; the i-th B member is the partner of
/// the i-th A member throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Groups,
    pub validation: Groups,
    pub test: Groups,
}

fn slice_groups(g: &Groups, from: usize, to: usize) -> Groups {
    Groups {
        a: g.a[from..to].to_vec(),
        b: g.b[from..to].to_vec(),
    }
}

/// The first `train_pairs` pairs train (the trailing share of them
/// validates); the next `test_pairs` test.
pub fn split_groups(groups: &Groups, train_pairs: usize, test_pairs: usize, validation_fraction: f64) -> Result<Split> {
    let n = groups.a.len().min(groups.b.len());
    if train_pairs + test_pairs > n {
        return Err(Error::InsufficientRows {
            class: "paired",
            available: n,
            requested: train_pairs + test_pairs,
        });
    }
    let n_val = ((train_pairs as f64 * validation_fraction).round() as usize).clamp(1, train_pairs - 1);
    let n_fit = train_pairs - n_val;
    Ok(Split {
        train: slice_groups(groups, 0, n_fit),
        validation: slice_groups(groups, n_fit, train_pairs),
        test: slice_groups(groups, train_pairs, train_pairs + test_pairs),
    })
}

/// A members labelled tipping followed by B members labelled non-tipping.
pub fn dataset_at_lead(prep: &Prepared, groups: &Groups, lead: usize, window: usize, norm: SegmentNorm) -> Result<Dataset> {
    let mut segs = member_segments(prep, &groups.a, Label::Tipping, lead, window, norm)?;
    segs.extend(member_segments(prep, &groups.b, Label::NonTipping, lead, window, norm)?);
    Dataset::from_segments(&segs, window, lead)
}

/// Value each member shows at the last step a lead-`lead` segment sees.
pub fn aligned_values(prep: &Prepared, members: &[Member], lead: usize) -> Result<Vec<f64>> {
    members
        .iter()
        .map(|m| {
            let k = m
                .t_tip
                .checked_sub(lead + 1)
                .filter(|k| *k < prep.store.n_steps())
                .ok_or(Error::WindowUnderflow {
                    t_tip: m.t_tip,
                    lead,
                    window: 1,
                })?;
            Ok(prep.row(*m)[k])
        })
        .collect()
}

/// Fraction of `a` outside the central `level` band of `b`.
pub fn baseline_fraction(a: &[f64], b: &[f64], level: f64, escape: Escape) -> Result<f64> {
    let sorted = sorted_finite(b.iter().copied());
    if a.is_empty() || sorted.is_empty() {
        return Err(Error::EmptySample);
    }
    let (lo, hi) = central_band(&sorted, level);
    let outside = a
        .iter()
        .filter(|&&x| match escape {
            Escape::Upward => x > hi,
            Escape::Either => x > hi || x < lo,
        })
        .count();
    Ok(outside as f64 / a.len() as f64)
}

/// Envelope method: share of group A outside group B's band at the same
/// tipping-aligned step.
pub fn envelope_baseline_accuracy(prep: &Prepared, groups: &Groups, lead: usize, level: f64) -> Result<f64> {
    let a = aligned_values(prep, &groups.a, lead)?;
    let b = aligned_values(prep, &groups.b, lead)?;
    baseline_fraction(&a, &b, level, Escape::for_system(prep.store.meta.config.system()))
}

/// A model trained at one lead with its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LeadModel {
    pub model: ModelParameters,
    pub log: TrainLog,
    pub train_config: TrainConfig,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub baseline: f64,
}

/// One model per lead, trained independently, with test accuracy and the
/// envelope baseline on the test pairs.
pub fn lead_time_sweep(prep: &Prepared, split: &Split, cfg: &PipelineConfig) -> Result<(Vec<LeadModel>, ExperimentReport)> {
    let mut models = Vec::with_capacity(cfg.leads.len());
    let mut rows = Vec::with_capacity(cfg.leads.len());
    for &lead in &cfg.leads {
        let train = dataset_at_lead(prep, &split.train, lead, cfg.window, cfg.norm)?;
        let validation = dataset_at_lead(prep, &split.validation, lead, cfg.window, cfg.norm)?;
        let test = dataset_at_lead(prep, &split.test, lead, cfg.window, cfg.norm)?;
        let train_config = TrainConfig {
            seed: derive_seed(cfg.seed, &format!("train/{lead}")),
            ..cfg.train.clone()
        };
        let (model, log) = train_model(&train, &validation, &train_config)?;
        let lm = LeadModel {
            train_accuracy: train.accuracy(&model)?,
            test_accuracy: test.accuracy(&model)?,
            baseline: envelope_baseline_accuracy(prep, &split.test, lead, cfg.envelope_level)?,
            model,
            log,
            train_config,
        };
        rows.push(vec![
            lm.train_accuracy,
            lm.log.best_validation_accuracy,
            lm.test_accuracy,
            lm.baseline,
            lm.log.epochs.len() as f64,
            lm.log.best_epoch as f64,
        ]);
        models.push(lm);
    }
    let report = ExperimentReport::new(
        ReportKind::LeadTime,
        cfg.system(),
        vec![Axis::leads(&cfg.leads)],
        &["train_accuracy", "validation_accuracy", "test_accuracy", "baseline", "epochs", "best_epoch"],
        rows,
    )?;
    Ok((models, report))
}

/// Accuracy of fixed models and the envelope baseline on the given pairs.
pub fn evaluation_report(models: &[&ModelParameters], prep: &Prepared, pairs: &Groups, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let rows = models
        .iter()
        .map(|m| {
            let data = dataset_at_lead(prep, pairs, m.lead, m.input_window, cfg.norm)?;
            Ok(vec![
                data.accuracy(m)?,
                envelope_baseline_accuracy(prep, pairs, m.lead, cfg.envelope_level)?,
                pairs.a.len() as f64,
            ])
        })
        .collect::<Result<_>>()?;
    ExperimentReport::new(
        ReportKind::Evaluation,
        cfg.system(),
        vec![Axis::new("lead", models.iter().map(|m| m.lead as f64))],
        &["accuracy", "baseline", "pairs"],
        rows,
    )
}

/// `p_tip` of every member under every model: `out[model][member]`.
pub fn group_probabilities(
    models: &[&ModelParameters],
    prep: &Prepared,
    members: &[Member],
    norm: SegmentNorm,
) -> Result<Vec<Vec<f64>>> {
    models
        .iter()
        .map(|m| {
            let segs = member_segments(prep, members, Label::Tipping, m.lead, m.input_window, norm)?;
            let flat: Vec<f64> = segs.iter().flat_map(|s| s.values.iter().copied()).collect();
            predict_tip(m, &flat)
        })
        .collect()
}

/// `(lead, p_tip)` for one member, one point per model.
pub fn probability_timeline(
    models: &[&ModelParameters],
    prep: &Prepared,
    member: Member,
    norm: SegmentNorm,
) -> Result<Vec<(usize, f64)>> {
    let probs = group_probabilities(models, prep, &[member], norm)?;
    Ok(models.iter().zip(probs).map(|(m, p)| (m.lead, p[0])).collect())
}

fn composite_row(point: &CompositePoint) -> [f64; 5] {
    [point.mean, point.lo99, point.hi99, point.lo75, point.hi75]
}

/// Composite `p_tip` timelines of test groups A and B.
pub fn timeline_report(models: &[&ModelParameters], prep: &Prepared, test: &Groups, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let pa = group_probabilities(models, prep, &test.a, cfg.norm)?;
    let pb = group_probabilities(models, prep, &test.b, cfg.norm)?;
    let rows = pa
        .iter()
        .zip(&pb)
        .map(|(a, b)| {
            let (ca, cb) = (
                CompositePoint::from_values(a.iter().copied()),
                CompositePoint::from_values(b.iter().copied()),
            );
            composite_row(&ca).into_iter().chain(composite_row(&cb)).collect()
        })
        .collect();
    ExperimentReport::new(
        ReportKind::Timeline,
        cfg.system(),
        vec![Axis::new("lead", models.iter().map(|m| m.lead as f64))],
        &["meanA", "lo99A", "hi99A", "lo75A", "hi75A", "meanB", "lo99B", "hi99B", "lo75B", "hi75B"],
        rows,
    )
}

fn indicator_values(prep: &Prepared, members: &[Member], leads: &[usize], indicator: Indicator, opts: &CsdOptions) -> Result<Vec<Vec<f64>>> {
    let per_member = members
        .par_iter()
        .map(|m| member_indicator(prep.row(*m), *m, leads, indicator, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..leads.len()).map(|j| per_member.iter().map(|v| v[j]).collect()).collect())
}

/// Two-sample KS decisions between test groups A and B on DL
/// probabilities, raw state values and both indicators, per lead.
pub fn ks_report(models: &[&ModelParameters], prep: &Prepared, test: &Groups, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let leads: Vec<usize> = models.iter().map(|m| m.lead).collect();
    let pa = group_probabilities(models, prep, &test.a, cfg.norm)?;
    let pb = group_probabilities(models, prep, &test.b, cfg.norm)?;
    let va = indicator_values(prep, &test.a, &leads, Indicator::Variance, &cfg.csd)?;
    let vb = indicator_values(prep, &test.b, &leads, Indicator::Variance, &cfg.csd)?;
    let aa = indicator_values(prep, &test.a, &leads, Indicator::Autocorrelation, &cfg.csd)?;
    let ab = indicator_values(prep, &test.b, &leads, Indicator::Autocorrelation, &cfg.csd)?;
    let mut rows = Vec::with_capacity(leads.len());
    for (j, &lead) in leads.iter().enumerate() {
        let sa = aligned_values(prep, &test.a, lead)?;
        let sb = aligned_values(prep, &test.b, lead)?;
        let mut row = Vec::with_capacity(8);
        for (a, b) in [(&pa[j], &pb[j]), (&sa, &sb), (&va[j], &vb[j]), (&aa[j], &ab[j])] {
            let ks = ks_two_sample(a, b, cfg.ks_alpha)?;
            row.push(ks.statistic);
            row.push(f64::from(u8::from(ks.decision)));
        }
        rows.push(row);
    }
    ExperimentReport::new(
        ReportKind::Ks,
        cfg.system(),
        vec![Axis::leads(&leads)],
        &[
            "prob_stat",
            "prob_decision",
            "state_stat",
            "state_decision",
            "variance_stat",
            "variance_decision",
            "autocorr_stat",
            "autocorr_decision",
        ],
        rows,
    )
}

/// Composite timelines of group A split into terciles of the delay between
/// the steepest forcing and tipping.
pub fn delay_quantile_composites(
    models: &[&ModelParameters],
    prep: &Prepared,
    group_a: &[Member],
    t_rate_max: usize,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    if group_a.is_empty() {
        return Err(Error::EmptySample);
    }
    let probs = group_probabilities(models, prep, group_a, cfg.norm)?;
    let pairs: Vec<(usize, usize)> = group_a.iter().map(|m| (m.row, m.t_tip)).collect();
    let sets = crate::stats::delay_quantile_split(&pairs, t_rate_max);
    let mut rows = Vec::new();
    for set in &sets {
        let delays: Vec<f64> = set.iter().map(|&k| group_a[k].t_tip as f64 - t_rate_max as f64).collect();
        let (dmin, dmax) = delays
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
        for p in &probs {
            let c = CompositePoint::from_values(set.iter().map(|&k| p[k]));
            let mut row = composite_row(&c).to_vec();
            row.extend([c.count as f64, dmin, dmax]);
            rows.push(row);
        }
    }
    ExperimentReport::new(
        ReportKind::DelayQuantile,
        cfg.system(),
        vec![
            Axis::new("tercile", [0.0, 1.0, 2.0]),
            Axis::new("lead", models.iter().map(|m| m.lead as f64)),
        ],
        &["mean", "lo99", "hi99", "lo75", "hi75", "count", "delay_min", "delay_max"],
        rows,
    )
}

/// Composite indicator bands of groups A and B per lead.
pub fn csd_report(prep: &Prepared, leads: &[usize], indicator: Indicator, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let c = csd_composite(prep, leads, indicator, &cfg.csd)?;
    let rows = c
        .a
        .iter()
        .zip(&c.b)
        .map(|(a, b)| vec![a.mean, a.lo99, a.hi99, b.mean, b.lo99, b.hi99, f64::from(u8::from(!a.overlaps99(b)))])
        .collect();
    let kind = match indicator {
        Indicator::Variance => ReportKind::CsdVariance,
        Indicator::Autocorrelation => ReportKind::CsdAutocorr,
    };
    ExperimentReport::new(
        kind,
        cfg.system(),
        vec![Axis::leads(leads)],
        &["meanA", "lo99A", "hi99A", "meanB", "lo99B", "hi99B", "separated"],
        rows,
    )
}

/// Relevance toward the tipping class for every member, `out[member][k]`.
pub fn relevance_maps(model: &ModelParameters, prep: &Prepared, members: &[Member], norm: SegmentNorm) -> Result<Vec<Vec<f64>>> {
    let segs = member_segments(prep, members, Label::Tipping, model.lead, model.input_window, norm)?;
    segs.par_iter()
        .map(|s| explain(model, &s.values, Label::Tipping).map(|r| r.scores))
        .collect()
}

/// Per-step composite relevance of test groups A and B; the step axis is
/// relative to the tipping time.
pub fn lrp_report(model: &ModelParameters, prep: &Prepared, test: &Groups, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let n = cfg.lrp.members;
    let ra = relevance_maps(model, prep, &test.a[..n.min(test.a.len())], cfg.norm)?;
    let rb = relevance_maps(model, prep, &test.b[..n.min(test.b.len())], cfg.norm)?;
    let w = model.input_window;
    let rows = (0..w)
        .map(|k| {
            let a = CompositePoint::from_values(ra.iter().map(|r| r[k]));
            let b = CompositePoint::from_values(rb.iter().map(|r| r[k]));
            vec![a.mean, a.lo99, a.hi99, b.mean, b.lo99, b.hi99]
        })
        .collect();
    let offset = (w + model.lead) as f64;
    ExperimentReport::new(
        ReportKind::Lrp,
        cfg.system(),
        vec![Axis::new("step", (0..w).map(|k| k as f64 - offset))],
        &["meanA", "lo99A", "hi99A", "meanB", "lo99B", "hi99B"],
        rows,
    )
}

/// Simulate and preprocess an evaluation ensemble with up to `pairs` pairs.
/// Every value of a sweep shares `purpose`, so the levels see the same
/// noise increments.
pub fn evaluation_ensemble(cfg: &PipelineConfig, params: SystemParams, runs: usize, pairs: usize, purpose: &str) -> Result<Prepared> {
    let store = run_ensemble(&SystemConfig::new(params), runs, derive_seed(cfg.seed, purpose))?;
    prepare(store, &cfg.prepare_options(PrepareSize::AtMost(pairs), &format!("{purpose}/groups")))
}

fn accuracy_or_nan(models: &[&ModelParameters], prep: &Prepared, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    if prep.groups.a.is_empty() {
        return Ok(vec![f64::NAN; models.len()]);
    }
    models
        .iter()
        .map(|m| dataset_at_lead(prep, &prep.groups, m.lead, m.input_window, cfg.norm)?.accuracy(m))
        .collect()
}

/// Accuracy of fixed models on ensembles simulated at other forcing rates.
pub fn forcing_rate_sweep(models: &[&ModelParameters], cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let sweep = &cfg.rate_sweep;
    let mut rows = Vec::new();
    for &rate in &sweep.values {
        let prep = evaluation_ensemble(cfg, cfg.params.with_forcing_rate(rate), sweep.runs, sweep.pairs, "rate")?;
        let acc = accuracy_or_nan(models, &prep, cfg)?;
        for a in acc {
            rows.push(vec![a, prep.groups.a.len() as f64, prep.tipping_fraction()]);
        }
    }
    ExperimentReport::new(
        ReportKind::ForcingRate,
        cfg.system(),
        vec![
            Axis::new("rate", sweep.values.iter().copied()),
            Axis::new("lead", models.iter().map(|m| m.lead as f64)),
        ],
        &["accuracy", "pairs", "tipping_fraction"],
        rows,
    )
}

/// Group-A `p_tip` composites and accuracy of fixed models on ensembles
/// simulated at other noise levels.
pub fn noise_magnitude_sweep(models: &[&ModelParameters], cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let sweep = &cfg.noise_sweep;
    if sweep.values.is_empty() {
        return Err(Error::InvalidConfig("noise sweep needs at least one level".into()));
    }
    let mut rows = Vec::new();
    for &level in &sweep.values {
        let prep = evaluation_ensemble(cfg, cfg.params.with_noise(level), sweep.runs, sweep.pairs, "noise")?;
        let probs = group_probabilities(models, &prep, &prep.groups.a, cfg.norm)?;
        let acc = accuracy_or_nan(models, &prep, cfg)?;
        for (p, a) in probs.iter().zip(acc) {
            let c = CompositePoint::from_values(p.iter().copied());
            let mut row = composite_row(&c).to_vec();
            row.extend([a, prep.groups.a.len() as f64, prep.tipping_fraction()]);
            rows.push(row);
        }
    }
    ExperimentReport::new(
        ReportKind::NoiseMagnitude,
        cfg.system(),
        vec![
            Axis::new("noise", sweep.values.iter().copied()),
            Axis::new("lead", models.iter().map(|m| m.lead as f64)),
        ],
        &["meanA", "lo99A", "hi99A", "lo75A", "hi75A", "accuracy", "pairs", "tipping_fraction"],
        rows,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub package_version: String,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub tipping_fraction: f64,
    pub outputs: Vec<String>,
}

/// Main ensemble, its groups and the per-lead models.
pub struct Trained {
    pub prep: Prepared,
    pub split: Split,
    pub models: Vec<LeadModel>,
    pub lead_report: ExperimentReport,
}

impl Trained {
    pub fn model_refs(&self) -> Vec<&ModelParameters> {
        self.models.iter().map(|m| &m.model).collect()
    }
}

/// Simulate the main ensemble, split it and train one model per lead.
pub fn train_pipeline(cfg: &PipelineConfig) -> Result<Trained> {
    cfg.validate()?;
    let store = run_ensemble(&cfg.system_config(), cfg.runs, derive_seed(cfg.seed, "ensemble"))?;
    let pairs = cfg.train_pairs + cfg.test_pairs;
    let prep = prepare(store, &cfg.prepare_options(PrepareSize::Exactly(pairs), "groups"))?;
    let split = split_groups(&prep.groups, cfg.train_pairs, cfg.test_pairs, cfg.train.validation_fraction)?;
    let (models, lead_report) = lead_time_sweep(&prep, &split, cfg)?;
    Ok(Trained {
        prep,
        split,
        models,
        lead_report,
    })
}

pub fn model_dir_name(lead: usize) -> String {
    format!("lead_{lead:03}")
}

/// Every report of the desk-scale study, written under `out` together with
/// the per-lead models and `provenance.json`.
pub fn reproduce(cfg: &PipelineConfig, out: &Path, stage: &dyn Fn(&str)) -> Result<Vec<ExperimentReport>> {
    stage("training");
    let trained = train_pipeline(cfg)?;
    let models = trained.model_refs();
    let (prep, test) = (&trained.prep, &trained.split.test);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for lm in &trained.models {
        let dir = out.join("models").join(model_dir_name(lm.model.lead));
        write_model(&dir, &lm.model, Some(&lm.train_config), Some(&lm.log), Some(lm.test_accuracy))?;
    }

    let mut reports = vec![trained.lead_report.clone()];
    stage("timelines");
    reports.push(timeline_report(&models, prep, test, cfg)?);
    reports.push(ks_report(&models, prep, test, cfg)?);
    let t_rate_max = cfg.system_config().max_forcing_rate_step();
    reports.push(delay_quantile_composites(&models, prep, &test.a, t_rate_max, cfg)?);
    stage("indicators");
    reports.push(csd_report(prep, &cfg.leads, Indicator::Variance, cfg)?);
    reports.push(csd_report(prep, &cfg.leads, Indicator::Autocorrelation, cfg)?);
    stage("relevance");
    let lrp_model = models
        .iter()
        .find(|m| m.lead == cfg.lrp.lead)
        .ok_or_else(|| Error::MissingDataset(format!("model at lead {}", cfg.lrp.lead)))?;
    reports.push(lrp_report(lrp_model, prep, test, cfg)?);
    stage("forcing-rate sweep");
    reports.push(forcing_rate_sweep(&models, cfg)?);
    stage("noise sweep");
    reports.push(noise_magnitude_sweep(&models, cfg)?);

    for r in &reports {
        r.write(out)?;
    }
    let seeds = ["ensemble", "groups"]
        .into_iter()
        .map(|p| (p.to_string(), derive_seed(cfg.seed, p)))
        .chain(cfg.leads.iter().map(|l| {
            let p = format!("train/{l}");
            let s = derive_seed(cfg.seed, &p);
            (p, s)
        }))
        .collect();
    let provenance = Provenance {
        package_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash(),
        config: cfg.clone(),
        seeds,
        tipping_fraction: prep.tipping_fraction(),
        outputs: reports.iter().map(|r| r.file_name()).collect(),
    };
    let path = out.join(PROVENANCE_FILE);
    let json = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for system in System::ALL {
            for scale in [Scale::Smoke, Scale::Desk] {
                PipelineConfig::preset(system, scale).validate().unwrap();
            }
        }
        let mut cfg = PipelineConfig::default();
        cfg.leads = vec![10, 0];
        assert!(cfg.validate().is_err());
        cfg = PipelineConfig::default();
        cfg.min_t_tip = 250;
        assert!(cfg.validate().is_err());
        cfg = PipelineConfig::default();
        cfg.version = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let json = serde_json::to_string(&PipelineConfig::default()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, PipelineConfig::default());
        assert_eq!(back.hash(), PipelineConfig::default().hash());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"windw": 100}"#).is_err());
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_ne!(partial.hash(), back.hash());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn baseline_examples() {
        let b: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        assert_eq!(baseline_fraction(&[0.2, 0.5], &b, 0.99, Escape::Upward).unwrap(), 0.0);
        assert_eq!(baseline_fraction(&[2.0, 3.0], &b, 0.99, Escape::Upward).unwrap(), 1.0);
        assert_eq!(baseline_fraction(&[-2.0, 3.0], &b, 0.99, Escape::Upward).unwrap(), 0.5);
        assert_eq!(baseline_fraction(&[-2.0, 3.0], &b, 0.99, Escape::Either).unwrap(), 1.0);
        assert!(baseline_fraction(&[], &b, 0.99, Escape::Upward).is_err());
    }

    #[test]
    fn report_layout() {
        let r = ExperimentReport::new(
            ReportKind::ForcingRate,
            System::Saddle,
            vec![Axis::new("rate", [1.0, 1.9]), Axis::new("lead", [0.0, 50.0])],
            &["accuracy"],
            vec![vec![0.9], vec![0.8], vec![0.7], vec![0.6]],
        )
        .unwrap();
        assert_eq!(r.file_name(), "report_forcing_rate_saddle.csv");
        assert_eq!(r.get(&[1.9, 0.0], "accuracy"), Some(0.7));
        assert_eq!(r.to_csv(), "rate,lead,accuracy\n1,0,0.9\n1,50,0.8\n1.9,0,0.7\n1.9,50,0.6\n");
        assert!(ExperimentReport::new(ReportKind::Ks, System::Saddle, vec![Axis::new("lead", [0.0])], &["x"], vec![]).is_err());

        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let t = ReportTable::read(&dir.path().join(r.file_name())).unwrap();
        assert_eq!(t.filter("rate", 1.9).lookup("lead", 50.0, "accuracy"), Some(0.6));
    }

    #[test]
    fn split_keeps_pairs_together() {
        let g = Groups {
            a: (0..10).map(|i| Member { row: i, t_tip: 500 + i }).collect(),
            b: (0..10).map(|i| Member { row: 100 + i, t_tip: 500 + i }).collect(),
        };
        let s = split_groups(&g, 8, 2, 0.25).unwrap();
        assert_eq!((s.train.a.len(), s.validation.a.len(), s.test.a.len()), (6, 2, 2));
        for part in [&s.train, &s.validation, &s.test] {
            assert!(part.a.iter().zip(&part.b).all(|(a, b)| a.t_tip == b.t_tip));
        }
        assert_eq!(s.test.a[0].row, 8);
        assert!(split_groups(&g, 9, 2, 0.1).is_err());
    }
}
