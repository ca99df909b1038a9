//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `SVCCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then raw
//! little-endian `f32` payload: every parameter in store order, followed by
//! the optimizer's first moments and then its second moments in the same
//! order. The header lists parameter names and shapes so a mismatched
//! model is refused before any payload is read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use scribblevc_core::mie::{BankBranch, ClassMemoryBank};
use scribblevc_core::model::{ModelConfig, ScribbleVc};
use scribblevc_core::optim::AdamW;
use scribblevc_core::tensor::Tensor;
use scribblevc_core::train::{RngState, TrainConfig, TrainState};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SVCCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Training state plus the bookkeeping needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
    /// Best validation mean Dice seen so far.
    pub best_val: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BankJson {
    num_classes: usize,
    dim: usize,
    valid: Vec<bool>,
    /// `null` for entries that were never accepted.
    score: Vec<Option<f64>>,
    vectors: Vec<f32>,
}

impl From<&BankBranch> for BankJson {
    fn from(b: &BankBranch) -> Self {
        Self {
            num_classes: b.num_classes,
            dim: b.dim,
            valid: b.valid.clone(),
            score: b.score.iter().map(|&s| s.is_finite().then_some(s)).collect(),
            vectors: b.vectors.clone(),
        }
    }
}

impl BankJson {
    fn into_branch(self) -> BankBranch {
        BankBranch {
            num_classes: self.num_classes,
            dim: self.dim,
            valid: self.valid,
            score: self.score.into_iter().map(|s| s.unwrap_or(f64::NEG_INFINITY)).collect(),
            vectors: self.vectors,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    optimizer_step: u64,
    rng: RngState,
    best_val: Option<f64>,
    bank_cnn: BankJson,
    bank_trans: BankJson,
    params: Vec<ParamInfo>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let st = &ckpt.state;
    let header = Header {
        model: st.model.config.clone(),
        train: ckpt.train.clone(),
        epoch: st.epoch,
        step: st.step,
        optimizer_step: st.optimizer.step,
        rng: RngState::capture(&st.rng),
        best_val: ckpt.best_val,
        bank_cnn: (&st.bank.cnn).into(),
        bank_trans: (&st.bank.trans).into(),
        params: st
            .model
            .params
            .iter()
            .map(|(name, t)| ParamInfo {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let scalars = st.model.params.num_scalars();
    let mut buf = Vec::with_capacity(20 + json.len() + 12 * scalars);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let tensors = st
        .model
        .params
        .iter()
        .map(|(_, t)| t)
        .chain(&st.optimizer.m)
        .chain(&st.optimizer.v);
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |m: String| Error::checkpoint(path, m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
    header.model.validate()?;
    let mut model = ScribbleVc::new(header.model.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let stored: Vec<(String, Vec<usize>)> = header.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if expected != stored {
        return Err(fail("parameter layout does not match the model configuration".into()));
    }
    let scalars = model.params.num_scalars();
    let payload = &body[hlen..];
    if payload.len() != 12 * scalars {
        return Err(fail(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            12 * scalars
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, values.by_ref().take(n).collect())
    };
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = take(&shape);
    }
    let mut optimizer = AdamW::new(header.train.optimizer(), &model.params);
    optimizer.step = header.optimizer_step;
    for i in 0..ids.len() {
        let shape = optimizer.m[i].shape().to_vec();
        optimizer.m[i] = take(&shape);
    }
    for i in 0..ids.len() {
        let shape = optimizer.v[i].shape().to_vec();
        optimizer.v[i] = take(&shape);
    }
    let bank = ClassMemoryBank {
        cnn: header.bank_cnn.into_branch(),
        trans: header.bank_trans.into_branch(),
    };
    bank.cnn.check()?;
    bank.trans.check()?;
    let fresh = model.new_bank();
    if (bank.cnn.num_classes, bank.cnn.dim, bank.trans.dim) != (fresh.cnn.num_classes, fresh.cnn.dim, fresh.trans.dim) {
        return Err(fail("memory bank dimensions do not match the model".into()));
    }
    Ok(Checkpoint {
        state: TrainState {
            model,
            optimizer,
            bank,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng.restore(),
        },
        train: header.train,
        best_val: header.best_val,
    })
}

/// Loads a checkpoint and refuses it unless its model matches `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let got = &ckpt.state.model.config;
    if got.num_classes != expected.num_classes {
        return Err(Error::checkpoint(
            path,
            format!(
                "checkpoint has K={} but the configuration asks for K={}",
                got.num_classes, expected.num_classes
            ),
        ));
    }
    if got != expected {
        return Err(Error::checkpoint(path, "model configuration differs from the checkpoint"));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use scribblevc_core::dataset::{class_vector_from_scribble, generate_sample, scribble_from_mask, GeneratorConfig};
    use scribblevc_core::train::{train_step, TrainSample};

    fn small() -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 32,
            num_stages: 2,
            base_channels: 8,
            head_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn batch() -> Vec<TrainSample> {
        let gen = GeneratorConfig::new(32, 32, 3, 0.05);
        (0..2)
            .map(|i| {
                let (image, mask) = generate_sample(i, &gen).unwrap();
                let scribble = scribble_from_mask(&mask, i, 0.1).unwrap();
                let classes = class_vector_from_scribble(&scribble);
                TrainSample { image, scribble, classes }
            })
            .collect()
    }

    fn trained() -> Checkpoint {
        let train = TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(small(), &train).unwrap();
        for _ in 0..2 {
            train_step(&mut state, &train, &batch()).unwrap();
        }
        Checkpoint {
            state,
            train,
            best_val: Some(0.5),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ckpt = trained();
        save_checkpoint(&ckpt, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        let (a, b) = (&ckpt.state, &back.state);
        assert!(a.model.params.iter().zip(b.model.params.iter()).all(|(x, y)| x == y));
        assert_eq!(a.optimizer, b.optimizer);
        assert_eq!(a.bank, b.bank);
        assert_eq!(RngState::capture(&a.rng), RngState::capture(&b.rng));
        assert_eq!((a.epoch, a.step, back.best_val), (b.epoch, b.step, Some(0.5)));
        assert_eq!(back.train, ckpt.train);
    }

    #[test]
    fn reload_then_step_matches_direct_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut direct = trained();
        save_checkpoint(&direct, &p).unwrap();
        let mut reloaded = load_checkpoint(&p).unwrap();
        let r1 = train_step(&mut direct.state, &direct.train, &batch()).unwrap();
        let r2 = train_step(&mut reloaded.state, &reloaded.train, &batch()).unwrap();
        assert_eq!(r1, r2);
        assert!(direct.state.model.params.iter().zip(reloaded.state.model.params.iter()).all(|(x, y)| x == y));
    }

    #[test]
    fn wrong_class_count_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&trained(), &p).unwrap();
        let mut other = small();
        other.num_classes = 4;
        let err = load_checkpoint_for(&p, &other).unwrap_err().to_string();
        assert!(err.contains("K=3") && err.contains("K=4"), "{err}");
    }

    #[test]
    fn version_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&trained(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[8] = 9;
        fs::write(&p, bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
