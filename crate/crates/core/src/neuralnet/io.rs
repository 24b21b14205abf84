//! `model.json` + `weights.f64`. Weights are little-endian f64 in the order
//! conv1 kernels, conv1 biases, conv2 kernels, conv2 biases, dense weights,
//! dense biases.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::*;
use super::train::{TrainConfig, TrainLog};
use crate::ensemble::{read_f64s, write_f64s};
use crate::error::{Error, Result};

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub activation: String,
    pub classes: usize,
    pub tip_class: usize,
    pub feature_order: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            filters: FILTERS,
            kernel: KERNEL,
            pool: POOL,
            activation: "relu".into(),
            classes: CLASSES,
            tip_class: TIP,
            feature_order: "position_major".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub architecture: Architecture,
    pub lead: usize,
    pub input_window: usize,
    pub n_params: usize,
    pub train_config: Option<TrainConfig>,
    pub train_log: Option<TrainLog>,
    pub test_accuracy: Option<f64>,
}

pub fn write_model(
    dir: &Path,
    model: &ModelParameters,
    train_config: Option<&TrainConfig>,
    train_log: Option<&TrainLog>,
    test_accuracy: Option<f64>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = ModelMeta {
        architecture: Architecture::default(),
        lead: model.lead,
        input_window: model.input_window,
        n_params: model.n_params(),
        train_config: train_config.cloned(),
        train_log: train_log.cloned(),
        test_accuracy,
    };
    let path = dir.join(MODEL_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("model meta serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let flat: Vec<f64> = model.blocks().iter().flat_map(|b| b.iter().copied()).collect();
    write_f64s(&dir.join(WEIGHTS_FILE), &flat)
}

pub fn read_model(dir: &Path) -> Result<(ModelParameters, ModelMeta)> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::MalformedMeta {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if meta.architecture != Architecture::default() {
        return Err(Error::MalformedMeta {
            path,
            msg: "unsupported architecture".into(),
        });
    }
    let mut model = ModelParameters::zeros(meta.input_window, meta.lead)?;
    let flat = read_f64s(&dir.join(WEIGHTS_FILE), (model.n_params() * 8) as u64)?;
    let mut offset = 0;
    for block in model.blocks_mut() {
        let n = block.len();
        block.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    model.validate()?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelParameters::init(200, 30, 4).unwrap();
        write_model(dir.path(), &m, Some(&TrainConfig::default()), None, Some(0.9)).unwrap();
        let len = fs::metadata(dir.path().join(WEIGHTS_FILE)).unwrap().len();
        assert_eq!(len, (m.n_params() * 8) as u64);
        let (back, meta) = read_model(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.lead, 30);
        assert_eq!(meta.test_accuracy, Some(0.9));
    }

    #[test]
    fn weight_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ModelParameters::zeros(20, 0).unwrap();
        m.conv1_k[0] = 1.5;
        m.dense_b[1] = -2.0;
        write_model(dir.path(), &m, None, None, None).unwrap();
        let bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(&bytes[..8], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn truncated_weights_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelParameters::init(20, 0, 1).unwrap();
        write_model(dir.path(), &m, None, None, None).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(read_model(dir.path()), Err(Error::TruncatedData { .. })));
    }
}
