//! Binary checkpoint format.
//!
//! ```text
//! "PEARLCKPT1" | u64 manifest_len | manifest JSON | f64 payload | trailer JSON | u64 trailer_len
//! ```
//!
//! The manifest lists every tensor in payload order with its byte offset
//! relative to the payload start. The trailer carries the configs, the step,
//! the sampler state, and SHA-256 digests of the manifest and payload. All
//! integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{hex, Model, ModelConfig, Param};

pub const MAGIC: &[u8; 10] = b"PEARLCKPT1";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte ChaCha seed.
    pub seed: String,
    pub stream: u64,
    /// Word position; decimal string because it is 128 bits wide.
    pub word_pos: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub step: usize,
    pub adam: Option<AdamW>,
    pub rng: Option<RngState>,
    /// Step and accuracy of the best evaluation so far.
    pub best: Option<(usize, f64)>,
}

impl Checkpoint {
    pub fn of_model(model: Model) -> Self {
        Checkpoint { model, train_config: None, step: 0, adam: None, rng: None, best: None }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Trailer {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    step: usize,
    adam: Option<AdamMeta>,
    rng: Option<RngState>,
    best: Option<(usize, f64)>,
    manifest_sha256: String,
    payload_sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn fmt_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, reason: reason.into() }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &[usize], &[f64])> =
        ck.model.params.iter().map(|p| (p.name.clone(), p.shape.as_slice(), p.data.as_slice())).collect();
    if let Some(opt) = &ck.adam {
        if opt.m.len() != ck.model.params.len() || opt.v.len() != ck.model.params.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        for (p, m) in ck.model.params.iter().zip(&opt.m) {
            tensors.push((format!("{M_PREFIX}{}", p.name), p.shape.as_slice(), m.as_slice()));
        }
        for (p, v) in ck.model.params.iter().zip(&opt.v) {
            tensors.push((format!("{V_PREFIX}{}", p.name), p.shape.as_slice(), v.as_slice()));
        }
    }
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, data) in &tensors {
        entries.push(ManifestEntry { name: name.clone(), shape: shape.to_vec(), offset: payload.len() as u64 });
        for v in *data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries })?;
    let trailer = Trailer {
        model_config: ck.model.cfg.clone(),
        train_config: ck.train_config.clone(),
        step: ck.step,
        adam: ck.adam.as_ref().map(|a| AdamMeta {
            lr: a.lr,
            betas: a.betas,
            eps: a.eps,
            weight_decay: a.weight_decay,
            t: a.t,
        }),
        rng: ck.rng.clone(),
        best: ck.best,
        manifest_sha256: digest(&manifest),
        payload_sha256: digest(&payload),
    };
    let trailer = serde_json::to_vec(&trailer)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + manifest.len() + payload.len() + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&trailer);
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    let b = bytes.get(at..at + 8).ok_or_else(|| fmt_err(at, "truncated length field"))?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    let mlen_at = MAGIC.len();
    let mlen = read_u64(bytes, mlen_at)? as usize;
    let m_start = mlen_at + 8;
    let p_start = m_start.checked_add(mlen).filter(|&e| e + 8 <= bytes.len()).ok_or_else(|| {
        fmt_err(mlen_at, format!("manifest length {mlen} runs past the end of a {}-byte file", bytes.len()))
    })?;
    let manifest_bytes = &bytes[m_start..p_start];
    let tlen_at = bytes.len() - 8;
    let tlen = read_u64(bytes, tlen_at)? as usize;
    let t_start = tlen_at
        .checked_sub(tlen)
        .filter(|&s| s >= p_start)
        .ok_or_else(|| fmt_err(tlen_at, format!("trailer length {tlen} overlaps the manifest")))?;
    let trailer: Trailer =
        serde_json::from_slice(&bytes[t_start..tlen_at]).map_err(|e| fmt_err(t_start, format!("trailer: {e}")))?;
    if digest(manifest_bytes) != trailer.manifest_sha256 {
        return Err(fmt_err(m_start, "manifest checksum mismatch"));
    }
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| fmt_err(m_start, format!("manifest: {e}")))?;
    let payload = &bytes[p_start..t_start];
    if digest(payload) != trailer.payload_sha256 {
        return Err(fmt_err(p_start, "payload checksum mismatch"));
    }

    let mut expect_offset = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expect_offset {
            return Err(fmt_err(p_start + e.offset as usize, format!("tensor {} is not contiguous", e.name)));
        }
        let start = e.offset as usize;
        let end = start + 8 * n;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| fmt_err(p_start + start, format!("tensor {} is truncated", e.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        expect_offset = end as u64;
        tensors.push(Param { name: e.name, shape: e.shape, data });
    }
    if expect_offset as usize != payload.len() {
        return Err(fmt_err(p_start + expect_offset as usize, "trailing bytes after the last tensor"));
    }

    let n_model = tensors.iter().take_while(|p| !p.name.starts_with("adam.")).count();
    let opt_tensors = tensors.split_off(n_model);
    let model =
        Model::from_params(trailer.model_config, tensors).map_err(|e| fmt_err(m_start, format!("manifest: {e}")))?;
    let adam = match trailer.adam {
        None if opt_tensors.is_empty() => None,
        None => return Err(fmt_err(m_start, "optimizer tensors without optimizer state")),
        Some(meta) => {
            let n = model.params.len();
            if opt_tensors.len() != 2 * n {
                return Err(fmt_err(
                    m_start,
                    format!("expected {} optimizer tensors, found {}", 2 * n, opt_tensors.len()),
                ));
            }
            let (ms, vs) = opt_tensors.split_at(n);
            for (i, p) in model.params.iter().enumerate() {
                if ms[i].name != format!("{M_PREFIX}{}", p.name) || vs[i].name != format!("{V_PREFIX}{}", p.name) {
                    return Err(fmt_err(m_start, format!("optimizer tensor order differs at {}", p.name)));
                }
            }
            Some(AdamW {
                lr: meta.lr,
                betas: meta.betas,
                eps: meta.eps,
                weight_decay: meta.weight_decay,
                t: meta.t,
                m: ms.iter().map(|p| p.data.clone()).collect(),
                v: vs.iter().map(|p| p.data.clone()).collect(),
            })
        }
    };
    Ok(Checkpoint {
        model,
        train_config: trailer.train_config,
        step: trailer.step,
        adam,
        rng: trailer.rng,
        best: trailer.best,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
