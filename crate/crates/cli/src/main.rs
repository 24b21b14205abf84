use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rtip_core::ensemble::{read_store, run_ensemble_with, write_store};
use rtip_core::experiments::{
    csd_report, delay_quantile_composites, evaluation_report, forcing_rate_sweep, ks_report, lead_time_sweep,
    lrp_report, model_dir_name, noise_magnitude_sweep, relevance_maps, reproduce, sha256_hex, split_groups,
    group_probabilities, timeline_report, PipelineConfig, Scale, Split,
};
use rtip_core::indicators::Indicator;
use rtip_core::neuralnet::{read_model, write_model, ModelParameters, MODEL_FILE};
use rtip_core::preprocess::{
    prepare, segments_at_lead, write_segments, PrepareOptions, PrepareSize, Prepared, SegmentDataset,
    SegmentNorm,
};
use rtip_core::System;
use serde::Serialize;

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "rtip", version, about = "Rate-induced tipping: simulation, indicators and classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline config (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    system: Option<SystemArg>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    scale: ScaleArg,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, env = "RTIP_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SystemArg {
    Saddle,
    Bautin,
    Compost,
}

impl From<SystemArg> for System {
    fn from(s: SystemArg) -> Self {
        match s {
            SystemArg::Saddle => System::Saddle,
            SystemArg::Bautin => System::Bautin,
            SystemArg::Compost => System::Compost,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Smoke,
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    EnvelopeAnomaly,
    PerSegment,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    Rate,
    Noise,
    Delay,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an ensemble into a store.
    Simulate {
        #[arg(long)]
        runs: Option<usize>,
        /// Forcing rate (eps, r or v).
        #[arg(long)]
        rate: Option<f64>,
        /// Noise amplitude (D1, D2 or D3).
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        full_states: bool,
    },
    /// Envelope, tipping times, groups and labelled segments per lead.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Variance and autocorrelation composites of groups A and B.
    Csd {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one classifier per lead.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Probability timelines of the test pairs.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        models: PathBuf,
    },
    /// Relevance maps and composites.
    Explain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        lead: Option<usize>,
        /// Per-member maps written for this many group-A members.
        #[arg(long, default_value_t = 10)]
        maps: usize,
    },
    /// Accuracy, envelope baseline and KS decisions on the test pairs.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        models: PathBuf,
    },
    /// Out-of-sample forcing-rate or noise grids, or delay terciles.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        models: PathBuf,
        /// Store for the delay terciles.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Every report of the full study.
    Reproduce,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Ensemble store written by `simulate`.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, value_delimiter = ',')]
    leads: Option<Vec<usize>>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    train_pairs: Option<usize>,
    #[arg(long)]
    test_pairs: Option<usize>,
    #[arg(long)]
    min_t_tip: Option<usize>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    package_version: &'static str,
    argv: Vec<String>,
    seed: u64,
    config_sha256: String,
    config: PipelineConfig,
    inputs: Vec<Input>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Input {
    path: String,
    sha256: Option<String>,
}

fn base_config(common: &Common) -> Result<PipelineConfig> {
    let scale = match common.scale {
        ScaleArg::Smoke => Scale::Smoke,
        ScaleArg::Desk => Scale::Desk,
    };
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: PipelineConfig = serde_json::from_str(&text)
                .map_err(|e| rtip_core::Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            if let Some(s) = common.system {
                if cfg.system() != System::from(s) {
                    bail!(rtip_core::Error::InvalidConfig("--system disagrees with the config file".into()));
                }
            }
            cfg
        }
        None => PipelineConfig::preset(common.system.map_or(System::Saddle, System::from), scale),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

impl DataArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(leads) = &self.leads {
            cfg.leads = leads.clone();
            cfg.leads.sort_unstable();
            cfg.leads.dedup();
            if !cfg.leads.contains(&cfg.lrp.lead) {
                cfg.lrp.lead = cfg.leads[0];
            }
        }
        if let Some(w) = self.window {
            cfg.window = w;
        }
        if self.leads.is_some() || self.window.is_some() {
            let max_lead = cfg.leads.last().copied().unwrap_or(0);
            cfg.min_t_tip = cfg.window.max(cfg.csd.window) + max_lead;
        }
        if let Some(v) = self.min_t_tip {
            cfg.min_t_tip = v;
        }
        if let Some(v) = self.train_pairs {
            cfg.train_pairs = v;
        }
        if let Some(v) = self.test_pairs {
            cfg.test_pairs = v;
        }
        if let Some(n) = self.norm {
            cfg.norm = match n {
                NormArg::EnvelopeAnomaly => SegmentNorm::EnvelopeAnomaly,
                NormArg::PerSegment => SegmentNorm::PerSegment,
            };
        }
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
    }
}

fn file_input(path: &Path) -> Input {
    Input {
        path: path.display().to_string(),
        sha256: fs::read(path).ok().map(|b| sha256_hex(&b)),
    }
}

fn store_inputs(dir: &Path) -> Vec<Input> {
    ["meta.json", "observables.f64"]
        .iter()
        .map(|f| file_input(&dir.join(f)))
        .collect()
}

fn model_inputs(dir: &Path) -> Vec<Input> {
    vec![Input {
        path: dir.display().to_string(),
        sha256: None,
    }]
}

/// Store loaded and preprocessed with the config's grouping; the store's
/// own parameters replace the config's.
fn load_prepared(store_dir: &Path, cfg: &mut PipelineConfig) -> Result<Prepared> {
    let store = read_store(store_dir)?;
    cfg.params = store.meta.config.params;
    cfg.validate()?;
    let opts = PrepareOptions {
        envelope_level: cfg.envelope_level,
        reference_rows: cfg.reference_rows,
        size: PrepareSize::Exactly(cfg.train_pairs + cfg.test_pairs),
        min_t_tip: cfg.min_t_tip,
        seed: rtip_core::ensemble::derive_seed(cfg.seed, "groups"),
    };
    Ok(prepare(store, &opts)?)
}

fn load_split(prep: &Prepared, cfg: &PipelineConfig) -> Result<Split> {
    Ok(split_groups(
        &prep.groups,
        cfg.train_pairs,
        cfg.test_pairs,
        cfg.train.validation_fraction,
    )?)
}

/// Models under `dir/lead_*`, ordered by lead.
fn read_models(dir: &Path) -> Result<Vec<ModelParameters>> {
    let mut models = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.join(MODEL_FILE).is_file() {
            models.push(read_model(&path)?.0);
        }
    }
    if models.is_empty() {
        bail!(rtip_core::Error::MissingDataset(format!("models in {}", dir.display())));
    }
    models.sort_by_key(|m| m.lead);
    Ok(models)
}

fn write_text(dir: &Path, name: &str, text: &str, outputs: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
    outputs.push(name.to_string());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, outputs: &mut Vec<String>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_text(dir, name, &text, outputs)
}

fn groups_csv(split: &Split) -> String {
    let mut out = String::from("part,group,row,t_tip\n");
    for (part, g) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        for (group, members) in [("A", &g.a), ("B", &g.b)] {
            for m in members {
                out.push_str(&format!("{part},{group},{},{}\n", m.row, m.t_tip));
            }
        }
    }
    out
}

fn run(cli: &Cli, stage_dir: &Path) -> Result<Manifest> {
    let mut cfg = base_config(&cli.common)?;
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    let name: &'static str;
    match &cli.command {
        Command::Simulate {
            runs,
            rate,
            noise,
            full_states,
        } => {
            name = "simulate";
            if let Some(r) = rate {
                cfg.params = cfg.params.with_forcing_rate(*r);
            }
            if let Some(n) = noise {
                cfg.params = cfg.params.with_noise(*n);
            }
            if let Some(r) = runs {
                cfg.runs = *r;
            }
            let store = run_ensemble_with(&cfg.system_config(), cfg.runs, cfg.seed, *full_states)?;
            write_store(&store, stage_dir)?;
            outputs.extend(fs::read_dir(stage_dir)?.filter_map(|e| e.ok()?.file_name().into_string().ok()));
            outputs.sort();
        }
        Command::Preprocess { data } => {
            name = "preprocess";
            data.apply(&mut cfg);
            inputs = store_inputs(&data.store);
            let prep = load_prepared(&data.store, &mut cfg)?;
            let split = load_split(&prep, &cfg)?;
            write_text(stage_dir, "groups.csv", &groups_csv(&split), &mut outputs)?;
            let mut tips = String::from("row,t_tip\n");
            for (row, t) in prep.t_tips.iter().enumerate() {
                if let Some(t) = t {
                    tips.push_str(&format!("{row},{t}\n"));
                }
            }
            write_text(stage_dir, "tipping_times.csv", &tips, &mut outputs)?;
            let env = &prep.envelope;
            let mut text = String::from("step,lower,upper,mean,sd\n");
            for k in 0..env.len() {
                text.push_str(&format!("{k},{},{},{},{}\n", env.lower[k], env.upper[k], env.mean[k], env.sd[k]));
            }
            write_text(stage_dir, "envelope.csv", &text, &mut outputs)?;
            for (part, groups) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
                let sub = Prepared {
                    groups: groups.clone(),
                    ..prep.clone()
                };
                for &lead in &cfg.leads {
                    let segs = segments_at_lead(&sub, lead, cfg.window, cfg.norm)?;
                    let rel = format!("segments/{part}/{}", model_dir_name(lead));
                    let source = data.store.display().to_string();
                    write_segments(&SegmentDataset::new(segs, cfg.window, lead, cfg.seed, &source), &stage_dir.join(&rel))?;
                    outputs.push(rel);
                }
            }
            eprintln!("tipping fraction {:.4}", prep.tipping_fraction());
        }
        Command::Csd { data } => {
            name = "csd";
            data.apply(&mut cfg);
            inputs = store_inputs(&data.store);
            let prep = load_prepared(&data.store, &mut cfg)?;
            for ind in [Indicator::Variance, Indicator::Autocorrelation] {
                let r = csd_report(&prep, &cfg.leads, ind, &cfg)?;
                r.write(stage_dir)?;
                outputs.push(r.file_name());
            }
        }
        Command::Train { data } => {
            name = "train";
            data.apply(&mut cfg);
            inputs = store_inputs(&data.store);
            let prep = load_prepared(&data.store, &mut cfg)?;
            let split = load_split(&prep, &cfg)?;
            let (models, report) = lead_time_sweep(&prep, &split, &cfg)?;
            for lm in &models {
                let rel = model_dir_name(lm.model.lead);
                write_model(&stage_dir.join(&rel), &lm.model, Some(&lm.train_config), Some(&lm.log), Some(lm.test_accuracy))?;
                outputs.push(rel);
                eprintln!(
                    "lead {:>4}: test accuracy {:.3}, baseline {:.3}",
                    lm.model.lead, lm.test_accuracy, lm.baseline
                );
            }
            report.write(stage_dir)?;
            outputs.push(report.file_name());
        }
        Command::Predict { data, models } => {
            name = "predict";
            data.apply(&mut cfg);
            inputs = store_inputs(&data.store);
            inputs.extend(model_inputs(models));
            let owned = read_models(models)?;
            let refs: Vec<&ModelParameters> = owned.iter().collect();
            cfg.window = refs[0].input_window;
            let prep = load_prepared(&data.store, &mut cfg)?;
            let test = load_split(&prep, &cfg)?.test;
            let r = timeline_report(&refs, &prep, &test, &cfg)?;
            r.write(stage_dir)?;
            outputs.push(r.file_name());
            let mut text = String::from("group,row,t_tip,lead,p_tip\n");
            for (group, members) in [("A", &test.a), ("B", &test.b)] {
                let probs = group_probabilities(&refs, &prep, members, cfg.norm)?;
                for (i, m) in members.iter().enumerate() {
                    for (model, p) in refs.iter().zip(&probs) {
                        text.push_str(&format!("{group},{},{},{},{}\n", m.row, m.t_tip, model.lead, p[i]));
                    }
                }
            }
            write_text(stage_dir, "timelines.csv", &text, &mut outputs)?;
        }
        Command::Explain {
            data,
            models,
            lead,
            maps,
        } => {
            name = "explain";
            data.apply(&mut cfg);
            inputs = store_inputs(&data.store);
            inputs.extend(model_inputs(models));
            let owned = read_models(models)?;
            let target = lead.unwrap_or(cfg.lrp.lead);
            let model = owned
                .iter()
                .find(|m| m.lead == target)
                .ok_or_else(|| rtip_core::Error::MissingDataset(format!("model at lead {target}")))?;
            cfg.window = model.input_window;
            let prep = load_prepared(&data.store, &mut cfg)?;
            let test = load_split(&prep, &cfg)?.test;
            let r = lrp_report(model, &prep, &test, &cfg)?;
            r.write(stage_dir)?;
            outputs.push(r.file_name());
            let chosen = &test.a[..(*maps).min(test.a.len())];
            let offset = (model.input_window + model.lead) as i64;
            for (m, scores) in chosen.iter().zip(relevance_maps(model, &prep, chosen, cfg.norm)?) {
                let mut text = String::from("step_rel_to_tip,score\n");
                for (k, s) in scores.iter().enumerate() {
                    text.push_str(&format!("{},{s}\n", k as i64 - offset));
                }
                fs::create_dir_all(stage_dir.join("maps"))?;
                write_text(stage_dir, &format!("maps/row_{:06}.csv", m.row), &text, &mut outputs)?;
            }
        }
        Command::Evaluate { data, models } => {
            name = "evaluate";
            data.apply(&mut cfg);
            inputs = store_inputs(&data.store);
            inputs.extend(model_inputs(models));
            let owned = read_models(models)?;
            let refs: Vec<&ModelParameters> = owned.iter().collect();
            cfg.window = refs[0].input_window;
            let prep = load_prepared(&data.store, &mut cfg)?;
            let test = load_split(&prep, &cfg)?.test;
            for r in [evaluation_report(&refs, &prep, &test, &cfg)?, ks_report(&refs, &prep, &test, &cfg)?] {
                r.write(stage_dir)?;
                outputs.push(r.file_name());
            }
        }
        Command::Sweep {
            kind,
            models,
            store,
            values,
            runs,
            pairs,
        } => {
            name = "sweep";
            inputs = model_inputs(models);
            let owned = read_models(models)?;
            let refs: Vec<&ModelParameters> = owned.iter().collect();
            cfg.window = refs[0].input_window;
            cfg.leads = refs.iter().map(|m| m.lead).collect();
            cfg.min_t_tip = cfg.window.max(cfg.csd.window) + cfg.leads.last().copied().unwrap_or(0);
            cfg.lrp.lead = cfg.leads[0];
            for sweep in [&mut cfg.rate_sweep, &mut cfg.noise_sweep] {
                if let Some(v) = values {
                    sweep.values = v.clone();
                }
                if let Some(r) = runs {
                    sweep.runs = *r;
                }
                if let Some(p) = pairs {
                    sweep.pairs = *p;
                }
            }
            let report = match kind {
                SweepKind::Rate => {
                    cfg.validate()?;
                    forcing_rate_sweep(&refs, &cfg)?
                }
                SweepKind::Noise => {
                    cfg.validate()?;
                    noise_magnitude_sweep(&refs, &cfg)?
                }
                SweepKind::Delay => {
                    let dir = store
                        .as_ref()
                        .ok_or_else(|| rtip_core::Error::InvalidConfig("--store is required for delay terciles".into()))?;
                    inputs.extend(store_inputs(dir));
                    let prep = load_prepared(dir, &mut cfg)?;
                    let test = load_split(&prep, &cfg)?.test;
                    let t_rate_max = cfg.system_config().max_forcing_rate_step();
                    delay_quantile_composites(&refs, &prep, &test.a, t_rate_max, &cfg)?
                }
            };
            report.write(stage_dir)?;
            outputs.push(report.file_name());
        }
        Command::Reproduce => {
            name = "reproduce";
            cfg.validate()?;
            let reports = reproduce(&cfg, stage_dir, &|s| eprintln!("{s}"))?;
            outputs.extend(reports.iter().map(|r| r.file_name()));
            outputs.push("models".into());
            outputs.push(rtip_core::experiments::PROVENANCE_FILE.into());
        }
    }
    Ok(Manifest {
        command: name,
        package_version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().skip(1).collect(),
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        config: cfg,
        inputs,
        outputs,
    })
}

/// Sibling staging directory; renamed or merged into `out` on success.
fn staging_dir(out: &Path) -> PathBuf {
    let mut name = OsString::from(".");
    name.push(out.file_name().unwrap_or_else(|| "out".as_ref()));
    name.push(format!(".partial-{}", std::process::id()));
    out.with_file_name(name)
}

fn publish(stage: &Path, out: &Path) -> Result<()> {
    if !out.exists() {
        fs::rename(stage, out)?;
        return Ok(());
    }
    for entry in fs::read_dir(stage)? {
        let entry = entry?;
        let dst = out.join(entry.file_name());
        if dst.is_dir() {
            fs::remove_dir_all(&dst)?;
        } else if dst.exists() {
            fs::remove_file(&dst)?;
        }
        fs::rename(entry.path(), dst)?;
    }
    fs::remove_dir(stage)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = &cli.common.out;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let stage = staging_dir(out);
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    let result = run(cli, &stage).and_then(|manifest| {
        let mut sink = Vec::new();
        write_json(&stage, MANIFEST_FILE, &manifest, &mut sink)?;
        publish(&stage, out)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&stage);
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<rtip_core::Error>())
                .map_or("runtime", rtip_core::Error::code);
            let msg = format!("{err:#}").replace('\n', " ");
            let _ = writeln!(std::io::stderr(), "error[{code}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
