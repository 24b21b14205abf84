//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 11`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rtip_core::dynamics::{SaddleParams, SystemParams};
use rtip_core::ensemble::run_ensemble;
use rtip_core::experiments::ReportTable;
use rtip_core::indicators::{csd_composite, sliding_autocorr_lag1, CsdOptions, Indicator};
use rtip_core::lrp::explain;
use rtip_core::neuralnet::{conv1d_forward, conv1d_reference, max_gradient_error, ModelParameters};
use rtip_core::preprocess::{prepare, Label, PrepareOptions, PrepareSize};
use rtip_core::stats::ks_two_sample;
use rtip_core::{System, SystemConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn saddle(eps: f64, noise: f64) -> SystemConfig {
    SystemConfig::new(SystemParams::Saddle(SaddleParams {
        eps,
        noise_d1: noise,
        ..SaddleParams::default()
    }))
}

fn c1_critical_rate() -> Outcome {
    let count = |eps| {
        let store = run_ensemble(&saddle(eps, 0.0), 100, 1).unwrap();
        store.diverged_at.iter().filter(|d| d.is_some()).count()
    };
    let (below, above) = (count(1.2), count(1.4));
    outcome(below == 0 && above == 100, format!("tipped {below}/100 at 1.20, {above}/100 at 1.40"))
}

fn c2_tipping_fraction() -> Outcome {
    let store = run_ensemble(&saddle(1.25, 0.008), 5000, 2).unwrap();
    let opts = PrepareOptions {
        size: PrepareSize::AtMost(0),
        ..PrepareOptions::default()
    };
    let f = prepare(store, &opts).unwrap().tipping_fraction();
    outcome((0.32..=0.42).contains(&f), format!("fraction {f:.4} (want 0.32..0.42)"))
}

fn c3_csd_overlap() -> Outcome {
    let leads: Vec<usize> = (0..=100).collect();
    let opts = CsdOptions::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for system in System::ALL {
        let store = run_ensemble(&SystemConfig::default_for(system), 5000, 3).unwrap();
        let prep = prepare(
            store,
            &PrepareOptions {
                size: PrepareSize::AtMost(1000),
                min_t_tip: opts.detrend_window.max(opts.window) + 100,
                seed: 3,
                ..PrepareOptions::default()
            },
        )
        .unwrap();
        let c = csd_composite(&prep, &leads, Indicator::Autocorrelation, &opts).unwrap();
        let sep = c.separated_leads();
        pass &= sep.is_empty() && !prep.groups.a.is_empty();
        parts.push(format!("{system} {} pairs, {} separated", prep.groups.a.len(), sep.len()));
    }
    outcome(pass, parts.join("; "))
}

fn c4_gradients() -> Outcome {
    let err = max_gradient_error(200, 20, 4);
    outcome(err < 1e-4, format!("max relative error {err:.2e}"))
}

fn c5_lrp_conservation() -> Outcome {
    let model = ModelParameters::init(200, 0, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        worst = worst.max(explain(&model, &x, Label::Tipping).unwrap().conservation_error());
    }
    outcome(worst < 1e-3, format!("worst relative gap {worst:.2e}"))
}

fn table(dir: &Path, kind: &str) -> ReportTable {
    ReportTable::read(&dir.join(format!("report_{kind}_saddle.csv"))).unwrap()
}

fn c6_dl_beats_baseline(dir: &Path) -> Outcome {
    let t = table(dir, "lead_time");
    let mut pass = true;
    let mut parts = Vec::new();
    for lead in [10.0, 30.0, 50.0, 100.0] {
        let acc = t.lookup("lead", lead, "test_accuracy").unwrap();
        let base = t.lookup("lead", lead, "baseline").unwrap();
        pass &= acc >= base;
        parts.push(format!("L{lead}: {acc:.3} vs {base:.3}"));
    }
    let a10 = t.lookup("lead", 10.0, "test_accuracy").unwrap();
    pass &= a10 >= 0.80;
    outcome(pass, parts.join(", "))
}

fn c7_ks_horizon(dir: &Path) -> Outcome {
    let t = table(dir, "ks");
    let leads = t.column("lead").unwrap();
    let decisions = t.column("prob_decision").unwrap();
    let failing: Vec<f64> = leads
        .iter()
        .zip(&decisions)
        .filter(|(l, d)| **l <= 100.0 && **d != 1.0)
        .map(|(l, _)| *l)
        .collect();
    outcome(failing.is_empty(), format!("{} leads tested, not separated at {failing:?}", leads.len()))
}

fn c8_noise_monotone(dir: &Path) -> Outcome {
    let t = table(dir, "noise_magnitude").filter("lead", 10.0);
    let means = t.column("meanA").unwrap();
    let noise = t.column("noise").unwrap();
    let pass = means.iter().all(|m| m.is_finite()) && means.windows(2).all(|w| w[1] <= w[0]);
    let parts: Vec<String> = noise.iter().zip(&means).map(|(n, m)| format!("D1={n}: {m:.3}")).collect();
    outcome(pass, parts.join(", "))
}

fn c9_rate_direction(dir: &Path) -> Outcome {
    let t = table(dir, "forcing_rate").filter("lead", 50.0);
    let low = t.lookup("rate", 1.0, "accuracy").unwrap();
    let high = t.lookup("rate", 1.9, "accuracy").unwrap();
    outcome(low >= high, format!("accuracy {low:.3} at 1.0, {high:.3} at 1.9"))
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
}

fn c10_determinism(first: &Path, second: &Path) -> Outcome {
    let (a, b) = (csv_files(first), csv_files(second));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if a.is_empty() || names(&a) != names(&b) {
        return outcome(false, "CSV sets differ");
    }
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| fs::read(x).unwrap() != fs::read(y).unwrap())
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    outcome(differing.is_empty(), format!("{} CSVs compared, differing: {differing:?}", a.len()))
}

fn c11_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut conv_err: f64 = 0.0;
    for &(in_ch, out_ch, len) in &[(1, 64, 200), (64, 64, 99)] {
        let x: Vec<f64> = (0..in_ch * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..out_ch * in_ch * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..out_ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv1d_forward(&x, in_ch, &k, &b, 3).unwrap();
        let slow = conv1d_reference(&x, in_ch, &k, &b, 3);
        conv_err = fast.iter().zip(&slow).fold(conv_err, |m, (f, s)| m.max((f - s).abs()));
    }

    let mut false_positives = 0;
    for _ in 0..1000 {
        let a: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        false_positives += usize::from(ks_two_sample(&a, &b, 0.01).unwrap().decision);
    }
    let fpr = false_positives as f64 / 1000.0;

    let mut x = 0.0;
    let series: Vec<f64> = (0..50_000)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = 0.8 * x + e;
            x
        })
        .collect();
    let ac = sliding_autocorr_lag1(&series, 500).unwrap();
    let valid = &ac.values[ac.valid_from..];
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;

    let pass = conv_err < 1e-12 && fpr <= 0.02 && (mean - 0.8).abs() <= 0.03;
    outcome(
        pass,
        format!("conv max diff {conv_err:.1e}, KS false-positive rate {fpr:.3}, AR(1) autocorr {mean:.4}"),
    )
}

fn reproduce(out: &Path) -> Result<PathBuf, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_rtip"))
        .args(["reproduce", "--system", "saddle", "--scale", "desk", "--seed", "7", "--out"])
        .arg(out)
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(out.to_path_buf())
    } else {
        Err(format!("reproduce exited with {status}"))
    }
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let scratch = tempfile::tempdir().unwrap();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failures += usize::from(!o.pass);
        println!("[{verdict}] {n:>2} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
    };

    report(1, "critical-rate dichotomy", &mut c1_critical_rate);
    report(2, "tipping fraction", &mut c2_tipping_fraction);
    report(3, "CSD bands overlap", &mut c3_csd_overlap);
    report(4, "gradient check", &mut c4_gradients);
    report(5, "LRP conservation", &mut c5_lrp_conservation);

    let needs_run = [6, 7, 8, 9, 10].into_iter().any(wanted);
    let first = if needs_run {
        let start = Instant::now();
        let r = reproduce(&scratch.path().join("first"));
        eprintln!("reproduce run took {:.0}s", start.elapsed().as_secs_f64());
        Some(r)
    } else {
        None
    };
    let run = first.as_ref();
    let with_run = |f: fn(&Path) -> Outcome| {
        move || match run.unwrap() {
            Ok(dir) => f(dir),
            Err(e) => outcome(false, e.clone()),
        }
    };
    report(6, "DL beats envelope baseline", &mut with_run(c6_dl_beats_baseline));
    report(7, "KS separability horizon", &mut with_run(c7_ks_horizon));
    report(8, "noise-magnitude monotonicity", &mut with_run(c8_noise_monotone));
    report(9, "out-of-sample forcing rate", &mut with_run(c9_rate_direction));
    report(10, "determinism", &mut || match (run.unwrap(), reproduce(&scratch.path().join("second"))) {
        (Ok(a), Ok(b)) => c10_determinism(a, &b),
        (Err(e), _) => outcome(false, e.clone()),
        (_, Err(e)) => outcome(false, e),
    });
    report(11, "oracle equivalences", &mut c11_oracles);

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
