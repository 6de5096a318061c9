use std::path::Path;

use gama_tensor::Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelKind};
use crate::error::{GamaError, Result};
use crate::formats::{self, read_tensor_record, write_tensor_record, ByteReader, ByteWriter};

pub(crate) const MAGIC: &str = "GAMC";
pub(crate) const VERSION: u16 = 1;

/// Provenance of a trained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub distribution_id: String,
    /// Free-form extras such as the attack method or PGD flag.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// JSON sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_kind: ModelKind,
    pub architecture_id: u16,
    pub config: serde_json::Value,
    pub training: TrainingMeta,
}

pub fn save_checkpoint<M: Model>(path: &Path, model: &M, training: &TrainingMeta) -> Result<()> {
    let p = model.params();
    let mut w = ByteWriter::new();
    w.bytes(MAGIC.as_bytes());
    w.u16(VERSION);
    w.u8(M::KIND as u8);
    w.u16(model.architecture_id());
    w.u32(p.len() as u32);
    for (name, t) in p.names().iter().zip(p.tensors()) {
        write_tensor_record(&mut w, name, t);
    }
    let meta = CheckpointMeta {
        model_kind: M::KIND,
        architecture_id: model.architecture_id(),
        config: serde_json::to_value(model.config())?,
        training: training.clone(),
    };
    formats::write_atomic(path, &w.finish())?;
    formats::write_json(&formats::sidecar_path(path), &meta)
}

struct RawCheckpoint {
    kind: ModelKind,
    architecture_id: u16,
    tensors: Vec<(String, gama_tensor::Tensor<f32>)>,
}

fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let kind = ModelKind::from_u8(r.u8()?)?;
    let architecture_id = r.u16()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        tensors.push(read_tensor_record(&mut r)?);
    }
    r.finish()?;
    Ok(RawCheckpoint {
        kind,
        architecture_id,
        tensors,
    })
}

/// Kind and sidecar metadata without building the model.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    let raw = decode(&formats::read(path)?)?;
    let meta: CheckpointMeta = formats::read_json(&formats::sidecar_path(path))?;
    if meta.model_kind != raw.kind || meta.architecture_id != raw.architecture_id {
        return Err(GamaError::Data(
            "checkpoint sidecar disagrees with the binary header".into(),
        ));
    }
    Ok(meta)
}

pub fn load_checkpoint<M: Model>(path: &Path) -> Result<(M, CheckpointMeta)> {
    let raw = decode(&formats::read(path)?)?;
    if raw.kind != M::KIND {
        return Err(GamaError::KindMismatch {
            expected: M::KIND.name().into(),
            found: raw.kind.name().into(),
        });
    }
    let meta: CheckpointMeta = formats::read_json(&formats::sidecar_path(path))?;
    if meta.model_kind != raw.kind || meta.architecture_id != raw.architecture_id {
        return Err(GamaError::Data(
            "checkpoint sidecar disagrees with the binary header".into(),
        ));
    }
    let config: M::Config = serde_json::from_value(meta.config.clone())?;
    let mut model = M::build(&config, &mut Rng::seed(0))?;
    if model.architecture_id() != raw.architecture_id {
        return Err(GamaError::Data(format!(
            "architecture id {} in file, config describes {}",
            raw.architecture_id,
            model.architecture_id()
        )));
    }
    model.params_mut().load_from(raw.tensors)?;
    Ok((model, meta))
}
