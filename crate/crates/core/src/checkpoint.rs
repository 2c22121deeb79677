//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  content
//! 0       8     magic "STGBGRU\0"
//! 8       4     format version (u32)
//! 12      8     header length L (u64)
//! 20      L     UTF-8 JSON header
//! 20+L    8*K   f64 payload: parameters in traversal order, then A_hat
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! The header records the training configuration, site order, scaler,
//! loss history, data fingerprint and a manifest of tensor names and
//! shapes. Parameters are stored as raw IEEE-754 bits, so a reload is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::MinMaxScaler;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::models::{Model, ModelParams, ParamTree};
use crate::training::{EpochRecord, TrainConfig, TrainedModel};

pub const MAGIC: &[u8; 8] = b"STGBGRU\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub a_hat: Tensor,
    pub site_order: Vec<String>,
    pub interval_minutes: u32,
    pub scaler: MinMaxScaler,
    pub history: Vec<EpochRecord>,
    /// Hex SHA-256 of the series file the model was trained on.
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    site_order: Vec<String>,
    interval_minutes: u32,
    scaler: MinMaxScaler,
    history: Vec<EpochRecord>,
    fingerprint: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

const A_HAT: &str = "a_hat";

impl Checkpoint {
    pub fn new(
        trained: TrainedModel,
        a_hat: Tensor,
        site_order: Vec<String>,
        interval_minutes: u32,
        scaler: MinMaxScaler,
        fingerprint: String,
    ) -> Result<Self> {
        let n = site_order.len();
        if a_hat.shape() != [n, n] || scaler.len() != n {
            return Err(Error::Validation(format!(
                "checkpoint parts disagree on site count {n}: A_hat {:?}, scaler {}",
                a_hat.shape(),
                scaler.len()
            )));
        }
        Ok(Checkpoint {
            config: trained.config,
            model: trained.model,
            a_hat,
            site_order,
            interval_minutes,
            scaler,
            history: trained.history,
            fingerprint,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        self.model.params().visit(&mut |name, t| {
            tensors.push(Entry {
                name,
                shape: t.shape().to_vec(),
            });
            payload.push(t);
        });
        tensors.push(Entry {
            name: A_HAT.into(),
            shape: self.a_hat.shape().to_vec(),
        });
        payload.push(&self.a_hat);

        let header = Header {
            config: self.config.clone(),
            site_order: self.site_order.clone(),
            interval_minutes: self.interval_minutes,
            scaler: self.scaler.clone(),
            history: self.history.clone(),
            fingerprint: self.fingerprint.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * payload.iter().map(|t| t.len()).sum::<usize>() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(what.to_string());
        if bytes.len() < PREFIX + DIGEST || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file or truncated"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = body
            .get(PREFIX..PREFIX.saturating_add(header_len))
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut values = body[PREFIX + header_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() - PREFIX - header_len != 8 * expected {
            return Err(corrupt("payload size does not match tensor manifest"));
        }

        let mut loaded = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.iter().product();
            loaded.push(Tensor::new(&e.shape, values.by_ref().take(n).collect())?);
        }
        let a_hat = match header.tensors.last() {
            Some(e) if e.name == A_HAT => loaded.pop().unwrap(),
            _ => return Err(corrupt("missing adjacency payload")),
        };

        let shape = header.config.model_shape();
        let mut params = ModelParams::init(&shape, 0)?;
        let mut names = Vec::new();
        params.visit(&mut |name, t| names.push((name, t.shape().to_vec())));
        if names.len() != loaded.len()
            || names
                .iter()
                .zip(&header.tensors)
                .any(|((name, shape), e)| *name != e.name || *shape != e.shape)
        {
            return Err(corrupt("tensor manifest does not match the configured architecture"));
        }
        let mut it = loaded.into_iter();
        params.visit_mut(&mut |t| *t = it.next().unwrap());

        Ok(Checkpoint {
            model: Model::from_params(shape, params)?,
            config: header.config,
            a_hat,
            site_order: header.site_order,
            interval_minutes: header.interval_minutes,
            scaler: header.scaler,
            history: header.history,
            fingerprint: header.fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// Refuses data with a different fingerprint when `strict`; otherwise
    /// logs a warning.
    pub fn check_fingerprint(&self, found: &str, strict: bool) -> Result<()> {
        if found == self.fingerprint {
            return Ok(());
        }
        if strict {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: found.to_string(),
            });
        }
        log::warn!("data fingerprint {found} differs from checkpoint {}", self.fingerprint);
        Ok(())
    }
}
