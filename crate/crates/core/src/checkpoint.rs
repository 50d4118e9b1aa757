//! Versioned single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, counters, tensor directory), every tensor as little-endian
//! `f64` in directory order, and a trailing SHA-256 of all preceding bytes.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::encoder::{branch_template, check_shapes, decoder_template, DualEncoderState};
use crate::error::{Error, Result};
use crate::optim::AdamWState;
use crate::params::ParamSet;
use crate::train::TrainState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ICRPCKPT";
const DIGEST_LEN: usize = 32;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: DualEncoderState,
    pub opt_query: AdamWState,
    pub opt_decoder: AdamWState,
    pub step: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &RunConfig) -> Self {
        Self {
            config: config.clone(),
            model: state.model.clone(),
            opt_query: state.opt_query.clone(),
            opt_decoder: state.opt_decoder.clone(),
            step: state.step,
            epoch: state.epoch,
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            model: self.model,
            opt_query: self.opt_query,
            opt_decoder: self.opt_decoder,
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Checks every stored tensor against the shapes `config` implies.
    pub fn check_against(&self, config: &RunConfig) -> Result<()> {
        let (branch, _) = branch_template(&config.encoder);
        check_shapes(&self.model.query, &branch)?;
        check_shapes(&self.model.key, &branch)?;
        let (decoder, _) = decoder_template(&config.encoder, config.recon_dim());
        check_shapes(&self.model.decoder, &decoder)?;
        for (moments, params) in [(&self.opt_query, &branch), (&self.opt_decoder, &decoder)] {
            for buffers in [&moments.first, &moments.second] {
                if buffers.len() != params.len() {
                    return Err(Error::Shape("optimizer buffer count differs from parameter count".into()));
                }
                for (i, (b, p)) in buffers.iter().zip(params.tensors()).enumerate() {
                    if b.dim() != p.dim() {
                        return Err(Error::Shape(format!("optimizer moment of `{}` has the wrong shape", params.name(i))));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Where the data streams resume: sample streams are keyed by
/// `(seed, epoch, index)`, so these three numbers pin the generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    epoch: u64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: u64,
    epoch: u64,
    momentum: f64,
    rng: RngState,
    optimizer_steps: (u64, u64),
    groups: Vec<(String, Vec<TensorEntry>)>,
}

const GROUPS: [&str; 7] =
    ["query", "key", "decoder", "opt.query.m", "opt.query.v", "opt.decoder.m", "opt.decoder.v"];

fn collections(ckpt: &Checkpoint) -> [(&[String], &[Array2<f64>]); 7] {
    let (q, k, d) = (&ckpt.model.query, &ckpt.model.key, &ckpt.model.decoder);
    [
        (q.names(), q.tensors()),
        (k.names(), k.tensors()),
        (d.names(), d.tensors()),
        (q.names(), &ckpt.opt_query.first),
        (q.names(), &ckpt.opt_query.second),
        (d.names(), &ckpt.opt_decoder.first),
        (d.names(), &ckpt.opt_decoder.second),
    ]
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let cols = collections(ckpt);
    let header = Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        momentum: ckpt.model.momentum,
        rng: RngState { seed: ckpt.config.train.seed, epoch: ckpt.epoch, step: ckpt.step },
        optimizer_steps: (ckpt.opt_query.steps, ckpt.opt_decoder.steps),
        groups: GROUPS
            .iter()
            .zip(&cols)
            .map(|(g, (names, tensors))| {
                let entries = names
                    .iter()
                    .zip(tensors.iter())
                    .map(|(n, t)| TensorEntry { name: n.clone(), rows: t.nrows(), cols: t.ncols() })
                    .collect();
                (g.to_string(), entries)
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensors) in &cols {
        for t in tensors.iter() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses bytes produced by [`encode_checkpoint`], checking integrity,
/// version and every tensor shape against the stored config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(Error::Version { found, expected: FORMAT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch: file is truncated or corrupted".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let header_len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.groups.len() != GROUPS.len() || header.groups.iter().zip(GROUPS).any(|((g, _), e)| g != e) {
        return Err(Error::Checkpoint("unexpected tensor groups".into()));
    }
    let mut sets = Vec::with_capacity(GROUPS.len());
    for (_, entries) in &header.groups {
        let mut set = ParamSet::new();
        for e in entries {
            let count = e.rows.checked_mul(e.cols).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Array2::from_shape_vec((e.rows, e.cols), values).map_err(|err| Error::Checkpoint(err.to_string()))?;
            set.push(e.name.clone(), t);
        }
        sets.push(set);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let mut sets = sets.into_iter();
    let mut next = || sets.next().expect("seven groups");
    let (query, key, decoder) = (next(), next(), next());
    let moments = |first: ParamSet, second: ParamSet, steps| AdamWState {
        first: first.tensors().to_vec(),
        second: second.tensors().to_vec(),
        steps,
    };
    let opt_query = moments(next(), next(), header.optimizer_steps.0);
    let opt_decoder = moments(next(), next(), header.optimizer_steps.1);
    let ckpt = Checkpoint {
        model: DualEncoderState { config: header.config.encoder.clone(), query, key, decoder, momentum: header.momentum },
        config: header.config,
        opt_query,
        opt_decoder,
        step: header.step,
        epoch: header.epoch,
    };
    ckpt.check_against(&ckpt.config)?;
    Ok(ckpt)
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| Error::Checkpoint(format!("writing {}: {e}", path.display()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
