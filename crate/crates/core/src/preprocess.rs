//! From raw ensembles to labelled, paired, per-lead segments.
//!
//! Tipping time is the first grid point of the excursion outside the
//! non-tipping envelope that lasts until the end of the record. Tipped paths
//! diverge and are held at their last value, so they stay outside; paths that
//! only brush the band and come back are not tipping.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::System;
use crate::ensemble::{read_f64s, write_f64s, EnsembleStore};
use crate::error::{Error, Result};
use crate::stats::central_band;

pub const MIN_ENVELOPE_ROWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    /// Per-step mean and (population) standard deviation of the rows.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Envelope {
    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }
}

/// Per-step central band of the given rows.
pub fn compute_envelope(store: &EnsembleStore, rows: &[usize], level: f64) -> Result<Envelope> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "envelope level must lie in (0, 1), got {level}"
        )));
    }
    if rows.len() < MIN_ENVELOPE_ROWS {
        return Err(Error::TooFewRows {
            needed: MIN_ENVELOPE_ROWS,
            got: rows.len(),
        });
    }
    let n = store.n_steps();
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    let mut mean = Vec::with_capacity(n);
    let mut sd = Vec::with_capacity(n);
    let mut column = Vec::with_capacity(rows.len());
    for k in 0..n {
        column.clear();
        column.extend(rows.iter().map(|&i| store.row(i)[k]));
        column.sort_by(f64::total_cmp);
        let (lo, hi) = central_band(&column, level);
        lower.push(lo);
        upper.push(hi);
        let m = column.iter().sum::<f64>() / column.len() as f64;
        let var = column.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / column.len() as f64;
        mean.push(m);
        sd.push(var.sqrt());
    }
    Ok(Envelope {
        lower,
        upper,
        level,
        mean,
        sd,
    })
}

/// Which side of the envelope counts as an escape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Escape {
    Upward,
    Either,
}

impl Escape {
    /// Saddle and compost paths run away upward; a Bautin path leaving its
    /// cycle blows up in whatever direction it is pointing.
    pub fn for_system(system: System) -> Self {
        match system {
            System::Saddle | System::Compost => Escape::Upward,
            System::Bautin => Escape::Either,
        }
    }

    fn outside(self, value: f64, lower: f64, upper: f64) -> bool {
        match self {
            Escape::Upward => value > upper,
            Escape::Either => value > upper || value < lower,
        }
    }
}

/// Start of the terminal excursion outside the envelope, if any.
pub fn detect_tipping(row: &[f64], envelope: &Envelope, escape: Escape) -> Result<Option<usize>> {
    if row.len() != envelope.len() {
        return Err(Error::ShapeMismatch {
            what: "trajectory length",
            expected: envelope.len(),
            got: row.len(),
        });
    }
    let mut start = None;
    for k in (0..row.len()).rev() {
        if escape.outside(row[k], envelope.lower[k], envelope.upper[k]) {
            start = Some(k);
        } else {
            break;
        }
    }
    Ok(start)
}

/// Remove one linear trend, fitted to the mean of the non-diverged rows,
/// from every row. Only the compost store carries such a trend; other
/// systems are returned unchanged.
pub fn detrend_linear(store: &EnsembleStore) -> EnsembleStore {
    let mut out = store.clone();
    detrend_linear_in_place(&mut out);
    out
}

pub fn detrend_linear_in_place(store: &mut EnsembleStore) {
    if store.meta.config.system() != System::Compost {
        return;
    }
    let n = store.n_steps();
    let kept: Vec<usize> = (0..store.n_traj())
        .filter(|&i| store.diverged_at[i].is_none())
        .collect();
    if kept.is_empty() {
        return;
    }
    let mut mean = vec![0.0; n];
    for &i in &kept {
        for (m, v) in mean.iter_mut().zip(store.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= kept.len() as f64;
    }
    let (intercept, slope) = least_squares_line(&mean);
    for row in store.observables.chunks_exact_mut(n) {
        for (k, v) in row.iter_mut().enumerate() {
            *v -= intercept + slope * k as f64;
        }
    }
}

/// Least-squares `(intercept, slope)` of `y` against its index.
pub fn least_squares_line(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, v) in y.iter().enumerate() {
        let dx = k as f64 - xm;
        sxy += dx * (v - ym);
        sxx += dx * dx;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (ym - slope * xm, slope)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonTipping = 0,
    Tipping = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// A group member: trajectory row and the (possibly paired) tipping time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub row: usize,
    pub t_tip: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    /// Tipping members with their detected tipping time.
    pub a: Vec<Member>,
    /// Non-tipping members carrying the tipping time of their partner in `a`.
    pub b: Vec<Member>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupSize {
    /// Fail unless both classes have this many candidates.
    Exactly(usize),
    /// Take as many pairs as both classes allow, up to this many.
    AtMost(usize),
}

#[derive(Clone, Debug)]
pub struct GroupOptions<'a> {
    pub size: GroupSize,
    pub seed: u64,
    /// Tipping rows with `t_tip` below this are not eligible.
    pub min_t_tip: usize,
    /// Rows never eligible (the envelope reference set).
    pub exclude: &'a [usize],
}

/// Sample group A from tipping rows and group B from non-tipping rows; the
/// i-th B member is cut at the tipping time of the i-th A member.
pub fn build_groups(
    store: &EnsembleStore,
    t_tips: &[Option<usize>],
    opts: &GroupOptions<'_>,
) -> Result<Groups> {
    if t_tips.len() != store.n_traj() {
        return Err(Error::ShapeMismatch {
            what: "tipping times",
            expected: store.n_traj(),
            got: t_tips.len(),
        });
    }
    let mut excluded = vec![false; store.n_traj()];
    for &i in opts.exclude {
        excluded[i] = true;
    }
    let mut tipping: Vec<Member> = Vec::new();
    let mut calm: Vec<usize> = Vec::new();
    for (row, t) in t_tips.iter().enumerate() {
        if excluded[row] {
            continue;
        }
        match t {
            Some(t_tip) if *t_tip >= opts.min_t_tip => tipping.push(Member { row, t_tip: *t_tip }),
            Some(_) => {}
            None => calm.push(row),
        }
    }
    let n = match opts.size {
        GroupSize::Exactly(n) => {
            if tipping.len() < n {
                return Err(Error::InsufficientRows {
                    class: "tipping",
                    available: tipping.len(),
                    requested: n,
                });
            }
            if calm.len() < n {
                return Err(Error::InsufficientRows {
                    class: "non-tipping",
                    available: calm.len(),
                    requested: n,
                });
            }
            n
        }
        GroupSize::AtMost(n) => n.min(tipping.len()).min(calm.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    tipping.shuffle(&mut rng);
    calm.shuffle(&mut rng);
    let a: Vec<Member> = tipping.into_iter().take(n).collect();
    let b = calm
        .into_iter()
        .zip(&a)
        .map(|(row, partner)| Member {
            row,
            t_tip: partner.t_tip,
        })
        .collect();
    Ok(Groups { a, b })
}

/// Raw window `row[t_tip - lead - window .. t_tip - lead]`.
pub fn extract_window(row: &[f64], t_tip: usize, lead: usize, window: usize) -> Result<&[f64]> {
    let end = t_tip
        .checked_sub(lead)
        .filter(|end| *end >= window && *end <= row.len())
        .ok_or(Error::WindowUnderflow {
            t_tip,
            lead,
            window,
        })?;
    Ok(&row[end - window..end])
}

/// Zero mean, unit (population) variance; constant input maps to zeros.
pub fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * (1.0 + mean.abs())) {
        values.fill(0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
}

/// How a raw window becomes classifier input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentNorm {
    /// Step-wise z-score against the non-tipping envelope.
    #[default]
    EnvelopeAnomaly,
    /// Zero mean, unit variance within each window.
    PerSegment,
}

/// `(x_k - mean_k) / sd_k` over the window; steps where the envelope has
/// no spread map to zero.
pub fn envelope_anomaly(row: &[f64], t_tip: usize, lead: usize, window: usize, envelope: &Envelope) -> Result<Vec<f64>> {
    let raw = extract_window(row, t_tip, lead, window)?;
    let start = t_tip - lead - window;
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let (m, sd) = (envelope.mean[start + i], envelope.sd[start + i]);
            if sd > 0.0 {
                (x - m) / sd
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub values: Vec<f64>,
    pub label: Label,
    pub lead: usize,
    pub source_index: usize,
    pub t_tip: usize,
}

pub fn extract_segment(
    row: &[f64],
    member: Member,
    lead: usize,
    window: usize,
    label: Label,
) -> Result<LabeledSegment> {
    let mut values = extract_window(row, member.t_tip, lead, window)?.to_vec();
    standardize(&mut values);
    Ok(LabeledSegment {
        values,
        label,
        lead,
        source_index: member.row,
        t_tip: member.t_tip,
    })
}

/// Classifier input for one member under the chosen normalisation.
pub fn normalized_segment(
    row: &[f64],
    member: Member,
    lead: usize,
    window: usize,
    label: Label,
    norm: SegmentNorm,
    envelope: &Envelope,
) -> Result<LabeledSegment> {
    match norm {
        SegmentNorm::PerSegment => extract_segment(row, member, lead, window, label),
        SegmentNorm::EnvelopeAnomaly => Ok(LabeledSegment {
            values: envelope_anomaly(row, member.t_tip, lead, window, envelope)?,
            label,
            lead,
            source_index: member.row,
            t_tip: member.t_tip,
        }),
    }
}

/// Options for turning a raw ensemble into envelope, tipping times and groups.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub envelope_level: f64,
    /// Upper bound on the size of the envelope reference set.
    pub reference_rows: usize,
    pub size: PrepareSize,
    pub min_t_tip: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepareSize {
    Exactly(usize),
    AtMost(usize),
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            envelope_level: 0.99,
            reference_rows: 2000,
            size: PrepareSize::Exactly(3000),
            min_t_tip: 0,
            seed: 0,
        }
    }
}

/// A preprocessed ensemble: everything later stages need.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Detrended for compost, raw otherwise.
    pub store: EnsembleStore,
    pub envelope: Envelope,
    pub reference: Vec<usize>,
    pub t_tips: Vec<Option<usize>>,
    pub groups: Groups,
}

impl Prepared {
    /// Fraction of all rows with a detected tipping time.
    pub fn tipping_fraction(&self) -> f64 {
        let hits = self.t_tips.iter().filter(|t| t.is_some()).count();
        hits as f64 / self.t_tips.len().max(1) as f64
    }

    pub fn row(&self, member: Member) -> &[f64] {
        self.store.row(member.row)
    }
}

/// Envelope reference rows: the first non-diverged rows, at most
/// `max_rows` and at most half of the non-diverged rows (so the rest can
/// still supply group B), never fewer than the envelope minimum.
pub fn reference_rows(store: &EnsembleStore, max_rows: usize) -> Vec<usize> {
    let calm: Vec<usize> = (0..store.n_traj())
        .filter(|&i| store.diverged_at[i].is_none())
        .collect();
    let take = max_rows.min(MIN_ENVELOPE_ROWS.max(calm.len() / 2));
    calm.into_iter().take(take).collect()
}

pub fn prepare(mut store: EnsembleStore, opts: &PrepareOptions) -> Result<Prepared> {
    detrend_linear_in_place(&mut store);
    let reference = reference_rows(&store, opts.reference_rows);
    let envelope = compute_envelope(&store, &reference, opts.envelope_level)?;
    let escape = Escape::for_system(store.meta.config.system());
    let t_tips = store
        .rows()
        .map(|row| detect_tipping(row, &envelope, escape))
        .collect::<Result<Vec<_>>>()?;
    let size = match opts.size {
        PrepareSize::Exactly(n) => GroupSize::Exactly(n),
        PrepareSize::AtMost(n) => GroupSize::AtMost(n),
    };
    let groups = build_groups(
        &store,
        &t_tips,
        &GroupOptions {
            size,
            seed: opts.seed,
            min_t_tip: opts.min_t_tip,
            exclude: &reference,
        },
    )?;
    Ok(Prepared {
        store,
        envelope,
        reference,
        t_tips,
        groups,
    })
}

/// Segments of the given members at one lead.
pub fn member_segments(
    prep: &Prepared,
    members: &[Member],
    label: Label,
    lead: usize,
    window: usize,
    norm: SegmentNorm,
) -> Result<Vec<LabeledSegment>> {
    members
        .iter()
        .map(|m| normalized_segment(prep.row(*m), *m, lead, window, label, norm, &prep.envelope))
        .collect()
}

/// Segments of every A member followed by every B member at one lead.
pub fn segments_at_lead(prep: &Prepared, lead: usize, window: usize, norm: SegmentNorm) -> Result<Vec<LabeledSegment>> {
    let mut out = member_segments(prep, &prep.groups.a, Label::Tipping, lead, window, norm)?;
    out.extend(member_segments(prep, &prep.groups.b, Label::NonTipping, lead, window, norm)?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentMeta {
    pub window: usize,
    pub lead: usize,
    pub n_segments: usize,
    pub n_tipping: usize,
    pub n_non_tipping: usize,
    pub seed: u64,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentDataset {
    pub meta: SegmentMeta,
    pub segments: Vec<LabeledSegment>,
}

impl SegmentDataset {
    pub fn new(segments: Vec<LabeledSegment>, window: usize, lead: usize, seed: u64, source: &str) -> Self {
        let n_tipping = segments.iter().filter(|s| s.label == Label::Tipping).count();
        Self {
            meta: SegmentMeta {
                window,
                lead,
                n_segments: segments.len(),
                n_tipping,
                n_non_tipping: segments.len() - n_tipping,
                seed,
                source: source.to_string(),
            },
            segments,
        }
    }
}

pub fn write_segments(data: &SegmentDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&data.meta).expect("meta serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let flat: Vec<f64> = data
        .segments
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .collect();
    write_f64s(&dir.join("segments.f64"), &flat)?;

    let labels: Vec<u8> = data.segments.iter().map(|s| s.label as u8).collect();
    let label_path = dir.join("labels.u8");
    fs::write(&label_path, labels).map_err(|e| Error::io(&label_path, e))?;

    let mut ttips = String::from("index,source_index,t_tip\n");
    for (i, s) in data.segments.iter().enumerate() {
        ttips.push_str(&format!("{i},{},{}\n", s.source_index, s.t_tip));
    }
    let tt_path = dir.join("ttips.csv");
    fs::write(&tt_path, ttips).map_err(|e| Error::io(&tt_path, e))
}

pub fn read_segments(dir: &Path) -> Result<SegmentDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SegmentMeta = serde_json::from_str(&text).map_err(|e| Error::MalformedMeta {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?;
    let n = meta.n_segments;
    let flat = read_f64s(&dir.join("segments.f64"), (n * meta.window * 8) as u64)?;

    let label_path = dir.join("labels.u8");
    let labels = fs::read(&label_path).map_err(|e| Error::io(&label_path, e))?;
    if labels.len() != n {
        return Err(Error::TruncatedData {
            path: label_path,
            expected: n as u64,
            found: labels.len() as u64,
        });
    }

    let tt_path: PathBuf = dir.join("ttips.csv");
    let mut reader = csv::Reader::from_path(&tt_path).map_err(|e| Error::csv(&tt_path, e))?;
    let ttips = reader
        .deserialize::<(usize, usize, usize)>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::csv(&tt_path, e))?;
    if ttips.len() != n {
        return Err(Error::TruncatedData {
            path: tt_path,
            expected: n as u64,
            found: ttips.len() as u64,
        });
    }

    let segments = (0..n)
        .map(|i| {
            let label = match labels[i] {
                0 => Label::NonTipping,
                _ => Label::Tipping,
            };
            LabeledSegment {
                values: flat[i * meta.window..(i + 1) * meta.window].to_vec(),
                label,
                lead: meta.lead,
                source_index: ttips[i].1,
                t_tip: ttips[i].2,
            }
        })
        .collect();
    Ok(SegmentDataset { meta, segments })
}
