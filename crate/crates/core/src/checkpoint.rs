//! Binary checkpoints.
//!
//! Layout (little-endian): magic `NGCM`, `u32` format version, `u64` length
//! plus UTF-8 config text (`key=value` lines), `u64` record count, then per
//! record a `u32` name length, the name, a `u32` rank, `u64` dims and the raw
//! `f64` values. A SHA-256 digest of everything before it closes the file.
//!
//! Records hold every model parameter and buffer under its own name, and
//! the Adam moments under `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::skeleton::{GraphMode, SkeletonTopology};
use crate::tensor::{AdamConfig, AdamState, Tensor};
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"NGCM";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

fn config_text(state: &TrainState) -> String {
    let m = &state.model;
    let c = &m.config;
    let t = &state.config;
    let a = &state.adam.config;
    let edges: Vec<String> = m.topology.edges().iter().map(|(i, j)| format!("{i}-{j}")).collect();
    let mut lines = vec![
        format!("n_joints={}", c.n_joints),
        format!("tau={}", c.tau),
        format!("horizon={}", c.horizon),
        format!("n_labels={}", c.n_labels),
        format!("graph={}", c.graph),
        format!("variant={}", c.variant),
        format!("shared_qk={}", c.shared_qk),
        format!("batchnorm={}", c.batchnorm),
        format!("tc_hidden={}", c.tc_hidden),
        format!("labels={}", json(&m.labels)),
        format!("edges={}", edges.join(",")),
    ];
    if let Some(names) = m.topology.joint_names() {
        lines.push(format!("joint_names={}", json(names)));
    }
    lines.extend([
        format!("lambda={:?}", t.lambda),
        format!("huber_beta={:?}", t.huber_beta),
        format!("gamma_p={:?}", t.gamma_p),
        format!("lr={:?}", t.lr),
        format!("lr_decay={:?}", t.lr_decay),
        format!("lr_decay_every={}", t.lr_decay_every),
        format!("batch_size={}", t.batch_size),
        format!("epochs={}", t.epochs),
        format!("tf_decay={:?}", t.tf_decay),
        format!("crf_alpha={:?}", t.crf_alpha),
        format!("seed={}", t.seed),
        format!("val_fraction={:?}", t.val_fraction),
        format!("adam_beta1={:?}", a.beta1),
        format!("adam_beta2={:?}", a.beta2),
        format!("adam_epsilon={:?}", a.epsilon),
        format!("adam_step={}", state.adam.step),
        format!("epoch={}", state.epoch),
    ]);
    if let Some(b) = state.best_val {
        lines.push(format!("best_val={b:?}"));
    }
    lines.join("\n") + "\n"
}

fn json(strings: &[String]) -> String {
    serde_json::to_string(strings).expect("strings serialize")
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(state);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let params = &state.model.params;
    let mut records: Vec<(String, &Tensor)> = params.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    for (i, (_, p)) in params.iter().enumerate() {
        if let (Some(m), Some(v)) = (&state.adam.first[i], &state.adam.second[i]) {
            records.push((format!("adam.m/{}", p.name), m));
            records.push((format!("adam.v/{}", p.name), v));
        }
    }
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        push_record(&mut out, &name, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state);
    // write-then-rename keeps the previous checkpoint if writing fails midway
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, &bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let text_len = r.len()?;
    let text = r.take(text_len)?;
    let count = r.len()?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.take(name_len)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(numel)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        records.insert(name.to_vec(), (shape, data));
    }
    let body = r.pos;
    let digest = r.take(DIGEST_LEN)?;
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if Sha256::digest(&bytes[..body]).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }

    let text = std::str::from_utf8(text).map_err(|_| malformed("config text is not UTF-8"))?;
    let mut records: BTreeMap<String, Tensor> = records
        .into_iter()
        .map(|(name, (shape, data))| {
            let name = String::from_utf8(name).map_err(|_| malformed("record name is not UTF-8"))?;
            let t = Tensor::new(&shape, data).map_err(|e| malformed(e.to_string()))?;
            Ok((name, t))
        })
        .collect::<Result<_>>()?;
    build_state(text, &mut records)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| malformed(format!("config line `{line}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self(map))
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| malformed(format!("config is missing `{key}`")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| malformed(format!("bad value `{v}` for `{key}`")))
    }
}

fn build_state(text: &str, records: &mut BTreeMap<String, Tensor>) -> Result<TrainState> {
    let f = Fields::parse(text)?;
    let config = ModelConfig {
        n_joints: f.get("n_joints")?,
        tau: f.get("tau")?,
        horizon: f.get("horizon")?,
        n_labels: f.get("n_labels")?,
        graph: f.get::<GraphMode>("graph")?,
        variant: f.get::<Variant>("variant")?,
        shared_qk: f.get("shared_qk")?,
        batchnorm: f.get("batchnorm")?,
        tc_hidden: f.get("tc_hidden")?,
    };
    let labels: Vec<String> = serde_json::from_str(f.raw("labels")?).map_err(|e| malformed(e.to_string()))?;
    let edges = f
        .raw("edges")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|e| {
            let (a, b) = e.split_once('-').ok_or_else(|| malformed(format!("edge `{e}`")))?;
            let p = |s: &str| s.parse::<usize>().map_err(|_| malformed(format!("edge `{e}`")));
            Ok((p(a)?, p(b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut topology = SkeletonTopology::new(config.n_joints, &edges).map_err(|e| malformed(e.to_string()))?;
    if let Ok(names) = f.raw("joint_names") {
        let names: Vec<String> = serde_json::from_str(names).map_err(|e| malformed(e.to_string()))?;
        topology = topology.with_names(names);
    }
    let train = TrainConfig {
        lambda: f.get("lambda")?,
        huber_beta: f.get("huber_beta")?,
        gamma_p: f.get("gamma_p")?,
        lr: f.get("lr")?,
        lr_decay: f.get("lr_decay")?,
        lr_decay_every: f.get("lr_decay_every")?,
        batch_size: f.get("batch_size")?,
        epochs: f.get("epochs")?,
        tf_decay: f.get("tf_decay")?,
        crf_alpha: f.get("crf_alpha")?,
        seed: f.get("seed")?,
        val_fraction: f.get("val_fraction")?,
    };
    let best_val = match f.raw("best_val") {
        Ok(_) => Some(f.get("best_val")?),
        Err(_) => None,
    };

    let mut model = Model::new(config, topology, labels, train.seed)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = records.remove(name).ok_or_else(|| malformed(format!("missing record `{name}`")))?;
        if t.shape() != shape {
            return Err(malformed(format!("record `{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            beta1: f.get("adam_beta1")?,
            beta2: f.get("adam_beta2")?,
            epsilon: f.get("adam_epsilon")?,
        },
    );
    adam.step = f.get("adam_step")?;
    for id in ids {
        let p = model.params.get_mut(id);
        let shape = p.value.shape().to_vec();
        p.value = take(&p.name, &shape)?;
        if p.requires_grad {
            adam.first[id.index()] = Some(take(&format!("adam.m/{}", p.name), &shape)?);
            adam.second[id.index()] = Some(take(&format!("adam.v/{}", p.name), &shape)?);
        }
    }
    if let Some(name) = records.keys().next() {
        return Err(malformed(format!("unexpected record `{name}`")));
    }
    Ok(TrainState {
        model,
        config: train,
        adam,
        epoch: f.get("epoch")?,
        best_val,
    })
}
