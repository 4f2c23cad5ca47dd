//! Single-file checkpoints: magic, header length, JSON header, then raw
//! little-endian f64 tensor data.
//!
//! A checkpoint always holds the model. A training checkpoint also holds
//! the optimizer moments, the scheduler, the logs and the best parameters
//! of the phase in progress, which is enough to resume at the epoch
//! boundary it was written at.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{CiffModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::adam::{AdamState, Moments};
use crate::train::plateau::Plateau;
use crate::train::{Best, EpochLog, TrainState};

pub const MAGIC: &[u8; 8] = b"CIFFCKPT";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const BEST: &str = "best.";

/// Hex sha256 of the canonical JSON of a model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    phase: usize,
    epoch: usize,
    plateau: Plateau,
    adam_steps: BTreeMap<String, u64>,
    /// None when the best checkpoint had an undefined AUC.
    best_auc: Option<f64>,
    has_best: bool,
    logs: Vec<EpochLog>,
    baseline: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
    train: Option<TrainHeader>,
}

/// Decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub config_hash: String,
    pub model: CiffModel,
    /// Present for training checkpoints.
    pub state: Option<TrainState>,
}

pub fn encode_model(model: &CiffModel) -> Vec<u8> {
    encode(model, None)
}

pub fn encode_state(state: &TrainState) -> Vec<u8> {
    encode(&state.model, Some(state))
}

fn encode(model: &CiffModel, state: Option<&TrainState>) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor)> = model.params.iter().map(|(k, v)| (format!("{PARAM}{k}"), v)).collect();
    let train = state.map(|s| {
        for (k, mo) in &s.adam.moments {
            tensors.push((format!("{ADAM_M}{k}"), &mo.m));
            tensors.push((format!("{ADAM_V}{k}"), &mo.v));
        }
        if let Some(best) = &s.best {
            tensors.extend(best.params.iter().map(|(k, v)| (format!("{BEST}{k}"), v)));
        }
        TrainHeader {
            phase: s.phase,
            epoch: s.epoch,
            plateau: s.plateau.clone(),
            adam_steps: s.adam.moments.iter().map(|(k, mo)| (k.clone(), mo.step)).collect(),
            best_auc: s.best.as_ref().map(|b| b.auc).filter(|a| a.is_finite()),
            has_best: s.best.is_some(),
            logs: s.logs.clone(),
            baseline: s.baseline.clone(),
        }
    });
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += 8 * t.len() as u64;
    }
    let header = Header {
        version: FORMAT_VERSION,
        model: model.config.clone(),
        config_hash: config_hash(&model.config),
        tensors: entries,
        train,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

pub fn decode(bytes: &[u8]) -> Result<Loaded> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let data_start = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("header length {len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.version)));
    }
    let expected_hash = config_hash(&header.model);
    if header.config_hash != expected_hash {
        return Err(bad(format!(
            "config hash {} does not match the stored config ({expected_hash})",
            header.config_hash
        )));
    }
    let data = &bytes[data_start..];
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut cursor = 0u64;
    for e in &header.tensors {
        if e.offset != cursor {
            return Err(bad(format!("tensor `{}` at offset {} but expected {cursor}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = cursor + 8 * n as u64;
        if end > data.len() as u64 {
            return Err(bad(format!("tensor `{}` runs past the end of the file", e.name)));
        }
        let raw = &data[cursor as usize..end as usize];
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor `{}`", e.name)));
        }
        cursor = end;
    }
    if cursor != data.len() as u64 {
        return Err(bad(format!("{} trailing bytes after the last tensor", data.len() as u64 - cursor)));
    }

    let reference = CiffModel::new(header.model.clone(), 0)?;
    let params = take_store(&mut tensors, PARAM, &reference.params, "parameters")?;
    let model = CiffModel { config: header.model.clone(), params };
    let state = match header.train {
        None => None,
        Some(th) => {
            let mut adam = AdamState::default();
            for (name, step) in &th.adam_steps {
                let shape = reference
                    .params
                    .get(name)
                    .map_err(|_| bad(format!("optimizer state for unknown `{name}`")))?
                    .shape();
                let mut moment = |prefix: &str| {
                    let t = tensors
                        .remove(&format!("{prefix}{name}"))
                        .ok_or_else(|| bad(format!("missing {prefix}{name}")))?;
                    if t.shape() != shape {
                        return Err(bad(format!("{prefix}{name} has shape {:?}, expected {shape:?}", t.shape())));
                    }
                    Ok(t)
                };
                let m = moment(ADAM_M)?;
                let v = moment(ADAM_V)?;
                adam.moments.insert(name.clone(), Moments { m, v, step: *step });
            }
            let best = if th.has_best {
                let params = take_store(&mut tensors, BEST, &reference.params, "best parameters")?;
                Some(Best { auc: th.best_auc.unwrap_or(f64::NEG_INFINITY), params })
            } else {
                None
            };
            Some(TrainState {
                model: model.clone(),
                adam,
                plateau: th.plateau,
                phase: th.phase,
                epoch: th.epoch,
                best,
                logs: th.logs,
                baseline: th.baseline,
            })
        }
    };
    if let Some(name) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{name}`")));
    }
    Ok(Loaded { config_hash: header.config_hash, model, state })
}

/// Moves every `prefix`-named tensor into a store that must match
/// `reference` name for name and shape for shape.
fn take_store(
    tensors: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    reference: &ParamStore,
    what: &str,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, want) in reference.iter() {
        let t = tensors.remove(&format!("{prefix}{name}")).ok_or_else(|| bad(format!("{what}: missing `{name}`")))?;
        if t.shape() != want.shape() {
            return Err(bad(format!("{what}: `{name}` has shape {:?}, expected {:?}", t.shape(), want.shape())));
        }
        store.insert(name.clone(), t);
    }
    Ok(store)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_model(path: &Path, model: &CiffModel) -> Result<()> {
    write(path, &encode_model(model))
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    write(path, &encode_state(state))
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::backbone::{BackboneConfig, Stage};
    use crate::train::TrainConfig;

    fn tiny() -> CiffModel {
        let cfg = ModelConfig {
            backbone: BackboneConfig { stages: vec![Stage { channels: 4, downsample: true }], input_size: (8, 8, 3) },
            m: 2,
            ..Default::default()
        };
        CiffModel::new(cfg, 3).unwrap()
    }

    /// Values that exercise the whole f64 range, not just small normals.
    fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (_, t) in store.iter_mut() {
            let shape = t.shape().to_vec();
            let n = t.len();
            let vals = (0..n)
                .map(|_| match rng.gen_range(0..4) {
                    0 => f64::from_bits(rng.gen::<u64>() & !(0x7ff << 52) | (rng.gen_range(1..0x7fe) << 52)),
                    1 => -0.0,
                    2 => f64::MIN_POSITIVE / 3.0,
                    _ => rng.gen::<f64>() - 0.5,
                })
                .collect();
            *t = Tensor::new(shape, vals).unwrap();
        }
    }

    fn bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
        store.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|x| x.to_bits()).collect())).collect()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut model = tiny();
        scramble(&mut model.params, &mut ChaCha8Rng::seed_from_u64(9));
        let bytes = encode_model(&model);
        let back = decode(&bytes).unwrap();
        assert_eq!(bits(&back.model.params), bits(&model.params));
        assert!(back.state.is_none());
        assert_eq!(back.config_hash, config_hash(&model.config));
        assert_eq!(encode_model(&back.model), bytes);
    }

    #[test]
    fn state_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = TrainState::new(tiny(), &TrainConfig::default());
        scramble(&mut state.model.params, &mut rng);
        let mut best = state.model.params.clone();
        scramble(&mut best, &mut rng);
        state.best = Some(Best { auc: 0.1 + 0.2, params: best });
        for name in ["cff.score", "head.primary.w1"] {
            let p = state.model.params.get(name).unwrap();
            let mut m = ParamStore::new();
            m.insert("m", p.clone());
            m.insert("v", p.map(|x| x * x));
            scramble(&mut m, &mut rng);
            state.adam.moments.insert(
                name.into(),
                Moments { m: m.get("m").unwrap().clone(), v: m.get("v").unwrap().clone(), step: 17 },
            );
        }
        state.phase = 1;
        state.epoch = 2;
        state.plateau = Plateau { lr: 1e-3 / 3.0, best: Some(0.123456789012345), bad_epochs: 2 };
        state.logs.push(EpochLog {
            fold: 0,
            phase: 2,
            epoch: 2,
            lr: 1e-3 / 3.0,
            train_loss: std::f64::consts::LN_2,
            val_loss: 0.1 + 0.7,
            val_auc: Some(2.0 / 3.0),
            val_sensitivity: None,
            val_specificity: Some(1.0),
            val_accuracy: 0.9,
        });
        let bytes = encode_state(&state);
        let back = decode(&bytes).unwrap().state.unwrap();
        assert_eq!(back, state);
        assert_eq!(encode_state(&back), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_model(&tiny());
        assert!(matches!(decode(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).unwrap_err().to_string().contains("magic"));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(decode(&extra).unwrap_err().to_string().contains("trailing"));

        // A hand-edited config no longer matches its hash.
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let edited = header.replacen("\"bff_depth\":2", "\"bff_depth\":3", 1);
        assert_ne!(edited, header);
        let mut tampered = bytes[..16].to_vec();
        tampered.extend_from_slice(edited.as_bytes());
        tampered.extend_from_slice(&bytes[16 + len..]);
        assert!(decode(&tampered).unwrap_err().to_string().contains("config hash"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let model = tiny();
        save_model(&path, &model).unwrap();
        assert_eq!(load(&path).unwrap().model, model);
        assert!(matches!(load(&dir.path().join("none.ckpt")), Err(Error::Io { .. })));
    }
}
