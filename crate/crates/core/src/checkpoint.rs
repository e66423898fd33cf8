//! Versioned, checksummed training-state archives.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length,
//! a JSON header, the raw little-endian `f64` arrays (parameters, buffers,
//! first and second moments) and finally the SHA-256 of everything before.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Model, ModelSpec};
use crate::training::{AdamW, EpochRecord, OptimizerConfig, Phase, TrainSchedule, TrainState};
use crate::tree::{TopologyRecord, TreeTopology};

pub const MAGIC: &[u8; 8] = b"TRCLUST\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    schedule: TrainSchedule,
    loss: LossConfig,
    topology: TopologyRecord,
    epoch: usize,
    phase: Phase,
    history: Vec<EpochRecord>,
    optimizer: OptimizerConfig,
    router_steps: u64,
    other_steps: u64,
    params: usize,
    buffers: usize,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize `state` to archive bytes.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        model: *state.model.spec(),
        schedule: state.schedule,
        loss: state.loss,
        topology: state.topology.to_record(),
        epoch: state.epoch,
        phase: state.phase,
        history: state.history.clone(),
        optimizer: state.optimizer.config,
        router_steps: state.optimizer.router_steps,
        other_steps: state.optimizer.other_steps,
        params: state.model.num_params(),
        buffers: state.model.buffers().len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_f64s(&mut out, state.model.params());
    push_f64s(&mut out, state.model.buffers());
    push_f64s(&mut out, &state.optimizer.m);
    push_f64s(&mut out, &state.optimizer.v);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parse archive bytes. Any inconsistency is a format error.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 12 };
    let header_len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Format("header too large".into()))?;
    let header: Header = serde_json::from_slice(cur.take(header_len, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let params = cur.f64s(header.params, "parameters")?;
    let buffers = cur.f64s(header.buffers, "buffers")?;
    let m = cur.f64s(header.params, "first moments")?;
    let v = cur.f64s(header.params, "second moments")?;
    if cur.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let model = Model::from_parts(header.model, params, buffers)?;
    let topology = TreeTopology::try_from(header.topology).map_err(|e| Error::Format(format!("topology: {e}")))?;
    if topology.depth() != header.model.depth {
        return Err(Error::Format("topology depth differs from model depth".into()));
    }
    Ok(TrainState {
        epoch: header.epoch,
        phase: header.phase,
        model,
        topology,
        optimizer: AdamW {
            config: header.optimizer,
            m,
            v,
            router_steps: header.router_steps,
            other_steps: header.other_steps,
        },
        schedule: header.schedule,
        loss: header.loss,
        history: header.history,
    })
}

/// Write atomically: the archive appears at `path` complete or not at all.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    write_atomic(path, &bytes)
}

pub fn restore(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationPolicy;
    use crate::data::{load_dataset, DatasetSpec};
    use crate::model::{Architecture, ContrastHeadSpec, EncoderSpec, InputShape};
    use crate::training::{Profile, Session};

    fn state() -> TrainState {
        let spec = ModelSpec {
            encoder: EncoderSpec {
                architecture: Architecture::MlpSmall,
                input: InputShape::Vector { dim: 16 },
                embed_dim: 8,
            },
            depth: 3,
            contrast: ContrastHeadSpec::identity(8),
        };
        let mut s = Profile::Desk.schedule(3);
        s.pretrain_epochs = 1;
        s.tree_epochs = 4;
        s.prune_start_epoch = 1;
        s.target_leaves = 6;
        s.batch_size = 32;
        TrainState::new(spec, s, LossConfig::for_depth(3)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let a = to_bytes(&s).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), a);
        assert_eq!(back.model.params(), s.model.params());
    }

    #[test]
    fn corruption_and_version_are_rejected() {
        let bytes = to_bytes(&state()).unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Format(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(from_bytes(&versioned), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"junk"), Err(Error::Format(_))));
    }

    #[test]
    fn resume_mid_prune_matches_straight_run() {
        let data = load_dataset(&DatasetSpec::gaussians(4, 64, 16, 2)).unwrap().0;
        let policy = AugmentationPolicy::default_for(data.shape());

        let mut straight = state();
        straight.run(Session::new(&data, &policy)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut first = state();
        first.pretrain_epoch(&data, &policy).unwrap();
        first.tree_epoch(&data, &policy).unwrap();
        first.tree_epoch(&data, &policy).unwrap();
        save(&first, &path).unwrap();
        let mut resumed = restore(&path).unwrap();
        assert_eq!(resumed.topology.active_leaf_count(), 7);
        resumed.run(Session::new(&data, &policy)).unwrap();

        assert_eq!(resumed.history, straight.history);
        assert_eq!(resumed.model.params(), straight.model.params());
        assert_eq!(resumed.topology, straight.topology);
    }
}
