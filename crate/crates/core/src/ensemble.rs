//! Seeded trajectory ensembles and their on-disk layout.
//!
//! A store directory holds `meta.json`, `observables.f64` (row-major,
//! little-endian f64, one row per trajectory) and `diverged.csv`
//! (`index,step`). When full states are kept they go to `states.f64`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, SystemConfig};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const OBSERVABLES_FILE: &str = "observables.f64";
pub const DIVERGED_FILE: &str = "diverged.csv";
pub const STATES_FILE: &str = "states.f64";

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of row `index` in an ensemble keyed by `base_seed`.
pub fn row_seed(base_seed: u64, index: u64) -> u64 {
    mix64(base_seed ^ mix64(index))
}

/// Derive an independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    purpose
        .bytes()
        .fold(mix64(seed), |acc, b| mix64(acc ^ u64::from(b)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    pub config: SystemConfig,
    pub n_traj: usize,
    pub base_seed: u64,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
    /// Byte length of `observables.f64` as written.
    pub data_bytes: u64,
    #[serde(default)]
    pub full_states: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStore {
    pub meta: StoreMeta,
    /// `n_traj x n_steps`, row-major.
    pub observables: Vec<f64>,
    pub diverged_at: Vec<Option<usize>>,
    /// `n_traj x n_steps x dimension` when full states were requested.
    pub states: Option<Vec<f64>>,
}

impl EnsembleStore {
    pub fn n_traj(&self) -> usize {
        self.meta.n_traj
    }

    pub fn n_steps(&self) -> usize {
        self.meta.config.n_steps
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_steps();
        &self.observables[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.observables.chunks_exact(self.n_steps())
    }

    /// Equality ignoring the creation timestamp.
    pub fn same_content(&self, other: &Self) -> bool {
        let mut a = self.meta.clone();
        a.created_unix = other.meta.created_unix;
        a == other.meta
            && self.observables == other.observables
            && self.diverged_at == other.diverged_at
            && self.states == other.states
    }
}

pub fn run_ensemble(config: &SystemConfig, n_traj: usize, base_seed: u64) -> Result<EnsembleStore> {
    run_ensemble_with(config, n_traj, base_seed, false)
}

/// Simulate `n_traj` paths; row `i` uses seed `row_seed(base_seed, i)`.
///
/// Rows are computed in parallel and placed at fixed offsets, so the result
/// does not depend on the thread count.
pub fn run_ensemble_with(
    config: &SystemConfig,
    n_traj: usize,
    base_seed: u64,
    full_states: bool,
) -> Result<EnsembleStore> {
    config.validate()?;
    if n_traj == 0 {
        return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
    }
    let n = config.n_steps;
    let dim = config.system().dimension();
    let mut observables = vec![0.0; n_traj * n];
    let mut states = full_states.then(|| vec![0.0; n_traj * n * dim]);
    let mut diverged_at = vec![None; n_traj];

    let trajectories: Vec<_> = (0..n_traj)
        .into_par_iter()
        .map(|i| simulate(config, row_seed(base_seed, i as u64), full_states))
        .collect::<Result<_>>()?;
    for (i, traj) in trajectories.into_iter().enumerate() {
        observables[i * n..(i + 1) * n].copy_from_slice(&traj.observable);
        diverged_at[i] = traj.diverged_at;
        if let (Some(dst), Some(src)) = (states.as_mut(), traj.states) {
            dst[i * n * dim..(i + 1) * n * dim].copy_from_slice(&src);
        }
    }

    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(EnsembleStore {
        meta: StoreMeta {
            config: config.clone(),
            n_traj,
            base_seed,
            created_unix,
            data_bytes: (n_traj * n * 8) as u64,
            full_states,
        },
        observables,
        diverged_at,
        states,
    })
}

pub(crate) fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f64s(path: &Path, expected_bytes: u64) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = bytes.len() as u64;
    if found != expected_bytes {
        return Err(Error::TruncatedData {
            path: path.to_path_buf(),
            expected: expected_bytes,
            found,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
        ))
    }
}

pub fn write_store(store: &EnsembleStore, dir: &Path) -> Result<()> {
    require_dir(dir)?;
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&store.meta).expect("meta serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

    write_f64s(&dir.join(OBSERVABLES_FILE), &store.observables)?;
    if let Some(states) = &store.states {
        write_f64s(&dir.join(STATES_FILE), states)?;
    }

    let div_path = dir.join(DIVERGED_FILE);
    let mut out = String::from("index,step\n");
    for (i, d) in store.diverged_at.iter().enumerate() {
        if let Some(step) = d {
            out.push_str(&format!("{i},{step}\n"));
        }
    }
    let mut f = fs::File::create(&div_path).map_err(|e| Error::io(&div_path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(&div_path, e))
}

pub fn read_store(dir: &Path) -> Result<EnsembleStore> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: StoreMeta = serde_json::from_str(&text).map_err(|e| Error::MalformedMeta {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?;
    meta.config.validate().map_err(|e| Error::MalformedMeta {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?;

    let obs_path = dir.join(OBSERVABLES_FILE);
    let observables = read_f64s(&obs_path, meta.data_bytes)?;
    let implied = (meta.n_traj * meta.config.n_steps * 8) as u64;
    if implied != meta.data_bytes {
        return Err(Error::DimensionMismatch {
            path: obs_path,
            expected: implied,
            found: meta.data_bytes,
        });
    }

    let states = if meta.full_states {
        let bytes = implied * meta.config.system().dimension() as u64;
        Some(read_f64s(&dir.join(STATES_FILE), bytes)?)
    } else {
        None
    };

    let div_path = dir.join(DIVERGED_FILE);
    let mut diverged_at = vec![None; meta.n_traj];
    let mut reader = csv::Reader::from_path(&div_path).map_err(|e| Error::csv(&div_path, e))?;
    for record in reader.deserialize::<(usize, usize)>() {
        let (index, step) = record.map_err(|e| Error::csv(&div_path, e))?;
        if index >= meta.n_traj || step >= meta.config.n_steps {
            return Err(Error::DimensionMismatch {
                path: div_path,
                expected: meta.n_traj as u64,
                found: index as u64,
            });
        }
        diverged_at[index] = Some(step);
    }

    Ok(EnsembleStore {
        meta,
        observables,
        diverged_at,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_trajectory, System};

    fn small(system: System) -> SystemConfig {
        let mut cfg = SystemConfig::default_for(system);
        cfg.n_steps = 50;
        cfg
    }

    #[test]
    fn singleton_matches_trajectory() {
        let cfg = small(System::Saddle);
        let store = run_ensemble(&cfg, 1, 9).unwrap();
        let traj = simulate_trajectory(&cfg, row_seed(9, 0)).unwrap();
        assert_eq!(store.row(0), traj.observable.as_slice());
    }

    #[test]
    fn rerun_is_identical_and_thread_independent() {
        let cfg = small(System::Bautin);
        let a = run_ensemble(&cfg, 20, 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_ensemble(&cfg, 20, 5).unwrap());
        assert!(a.same_content(&b));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(System::Compost);
        let store = run_ensemble_with(&cfg, 7, 3, true).unwrap();
        write_store(&store, dir.path()).unwrap();
        let len = fs::metadata(dir.path().join(OBSERVABLES_FILE)).unwrap().len();
        assert_eq!(len, 7 * 50 * 8);
        assert_eq!(read_store(dir.path()).unwrap(), store);
    }

    #[test]
    fn diverged_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SystemConfig::default_for(System::Saddle);
        cfg.params = cfg.params.with_forcing_rate(1.4).with_noise(0.0);
        let store = run_ensemble(&cfg, 3, 1).unwrap();
        assert!(store.diverged_at.iter().all(Option::is_some));
        write_store(&store, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(DIVERGED_FILE)).unwrap();
        assert!(text.starts_with("index,step\n"));
        assert_eq!(read_store(dir.path()).unwrap(), store);
    }

    #[test]
    fn missing_directory_names_path() {
        let store = run_ensemble(&small(System::Saddle), 2, 0).unwrap();
        let err = write_store(&store, Path::new("/nonexistent/rtip-store")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/rtip-store"));
    }

    #[test]
    fn truncated_data_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = run_ensemble(&small(System::Saddle), 4, 0).unwrap();
        write_store(&store, dir.path()).unwrap();
        let path = dir.path().join(OBSERVABLES_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            read_store(dir.path()),
            Err(Error::TruncatedData { .. })
        ));
    }

    #[test]
    fn edited_dimensions_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = run_ensemble(&small(System::Saddle), 4, 0).unwrap();
        write_store(&store, dir.path()).unwrap();
        let path = dir.path().join(META_FILE);
        let mut meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        meta["config"]["n_steps"] = 49.into();
        fs::write(&path, meta.to_string()).unwrap();
        assert!(matches!(
            read_store(dir.path()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn malformed_meta_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = run_ensemble(&small(System::Saddle), 4, 0).unwrap();
        write_store(&store, dir.path()).unwrap();
        fs::write(dir.path().join(META_FILE), "{not json").unwrap();
        assert!(matches!(
            read_store(dir.path()),
            Err(Error::MalformedMeta { .. })
        ));
    }

    #[test]
    fn row_seeds_are_distinct() {
        let seeds: std::collections::HashSet<_> = (0..10_000).map(|i| row_seed(7, i)).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_ne!(derive_seed(7, "train"), derive_seed(7, "test"));
    }
}
