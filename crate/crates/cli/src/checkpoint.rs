//! Checkpoint container: 8-byte magic `SC3KCKPT`, a little-endian u32
//! format version, a length-prefixed UTF-8 JSON manifest (configuration,
//! block shapes, epoch, RNG state, payload checksum), then the raw
//! little-endian f64 blocks in manifest order. Serialization is
//! deterministic, so save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pointkey_core::autodiff::Tensor;
use pointkey_core::model::{param_spec, NamedTensor, NetworkConfig, NetworkParams};
use pointkey_core::optim::AdamState;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"SC3KCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngStateJson {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct NetConfigJson {
    n_points: usize,
    n_keypoints: usize,
    feat_dim: usize,
    hidden_dims: Vec<usize>,
    res_dim: usize,
    input_transform: bool,
}

impl From<&NetworkConfig> for NetConfigJson {
    fn from(c: &NetworkConfig) -> Self {
        Self {
            n_points: c.n_points,
            n_keypoints: c.n_keypoints,
            feat_dim: c.feat_dim,
            hidden_dims: c.hidden_dims.clone(),
            res_dim: c.res_dim,
            input_transform: c.input_transform,
        }
    }
}

impl From<&NetConfigJson> for NetworkConfig {
    fn from(c: &NetConfigJson) -> Self {
        Self {
            n_points: c.n_points,
            n_keypoints: c.n_keypoints,
            feat_dim: c.feat_dim,
            hidden_dims: c.hidden_dims.clone(),
            res_dim: c.res_dim,
            input_transform: c.input_transform,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct BlockJson {
    name: String,
    rows: usize,
    cols: usize,
    role: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ManifestJson {
    version: String,
    net: NetConfigJson,
    epoch: u64,
    best_val_loss: f64,
    rng: RngStateJson,
    adam_t: u64,
    config: RunConfig,
    blocks: Vec<BlockJson>,
    checksum_sha256: String,
}

/// Full training state: parameters, buffers, optimizer moments, and where
/// the run left off.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub adam: AdamState,
    pub epoch: u64,
    pub best_val_loss: f64,
    pub rng: RngStateJson,
    pub config: RunConfig,
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn tensor_from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::from_data(rows, cols, data)
}

impl Checkpoint {
    fn blocks(&self) -> Vec<(BlockJson, &Tensor)> {
        let mut blocks = Vec::new();
        for p in &self.params.params {
            blocks.push((
                BlockJson {
                    name: p.name.clone(),
                    rows: p.tensor.rows(),
                    cols: p.tensor.cols(),
                    role: "param".into(),
                },
                &p.tensor,
            ));
        }
        for b in &self.params.buffers {
            blocks.push((
                BlockJson {
                    name: b.name.clone(),
                    rows: b.tensor.rows(),
                    cols: b.tensor.cols(),
                    role: "buffer".into(),
                },
                &b.tensor,
            ));
        }
        for (p, m) in self.params.params.iter().zip(&self.adam.m) {
            blocks.push((
                BlockJson {
                    name: p.name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                    role: "adam_m".into(),
                },
                m,
            ));
        }
        for (p, v) in self.params.params.iter().zip(&self.adam.v) {
            blocks.push((
                BlockJson {
                    name: p.name.clone(),
                    rows: v.rows(),
                    cols: v.cols(),
                    role: "adam_v".into(),
                },
                v,
            ));
        }
        blocks
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let blocks = self.blocks();
        let mut payload = Vec::new();
        for (_, t) in &blocks {
            tensor_bytes(t, &mut payload);
        }
        let checksum = hex(&Sha256::digest(&payload));
        let manifest = ManifestJson {
            version: crate::config::version_stamp().into(),
            net: (&self.params.cfg).into(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            rng: self.rng.clone(),
            adam_t: self.adam.t,
            config: self.config.clone(),
            blocks: blocks.into_iter().map(|(b, _)| b).collect(),
            checksum_sha256: checksum,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + manifest_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |msg: String| CliError::Data(format!("{origin}: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + manifest_len {
            return Err(fail("truncated manifest".into()));
        }
        let manifest: ManifestJson = serde_json::from_slice(&bytes[20..20 + manifest_len])
            .map_err(|e| fail(format!("manifest: {e}")))?;
        let payload = &bytes[20 + manifest_len..];
        let expected: usize = manifest.blocks.iter().map(|b| b.rows * b.cols * 8).sum();
        if payload.len() != expected {
            return Err(fail(format!(
                "payload is {} bytes, manifest expects {expected}",
                payload.len()
            )));
        }
        let checksum = hex(&Sha256::digest(payload));
        if checksum != manifest.checksum_sha256 {
            return Err(fail("checksum mismatch (corrupt file)".into()));
        }

        let net_cfg: NetworkConfig = (&manifest.net).into();
        let spec = param_spec(&net_cfg);
        let mut cursor = 0usize;
        let mut take = |b: &BlockJson| -> Tensor {
            let len = b.rows * b.cols * 8;
            let t = tensor_from_bytes(b.rows, b.cols, &payload[cursor..cursor + len]);
            cursor += len;
            t
        };

        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for block in &manifest.blocks {
            let tensor = take(block);
            match block.role.as_str() {
                "param" => params.push(NamedTensor {
                    name: block.name.clone(),
                    tensor,
                }),
                "buffer" => buffers.push(NamedTensor {
                    name: block.name.clone(),
                    tensor,
                }),
                "adam_m" => adam_m.push(tensor),
                "adam_v" => adam_v.push(tensor),
                other => return Err(fail(format!("unknown block role '{other}'"))),
            }
        }

        // shapes must agree with the architecture derived from the config
        if params.len() != spec.trainable.len() {
            return Err(fail(format!(
                "{} parameter blocks for an architecture with {}",
                params.len(),
                spec.trainable.len()
            )));
        }
        for (p, (name, (rows, cols))) in params.iter().zip(&spec.trainable) {
            if &p.name != name || p.tensor.shape() != (*rows, *cols) {
                return Err(fail(format!(
                    "parameter '{}' has shape {:?}, architecture expects '{}' {:?}",
                    p.name,
                    p.tensor.shape(),
                    name,
                    (rows, cols)
                )));
            }
        }
        for (b, (name, (rows, cols))) in buffers.iter().zip(&spec.buffers) {
            if &b.name != name || b.tensor.shape() != (*rows, *cols) {
                return Err(fail(format!(
                    "buffer '{}' has shape {:?}, architecture expects '{}' {:?}",
                    b.name,
                    b.tensor.shape(),
                    name,
                    (rows, cols)
                )));
            }
        }

        Ok(Checkpoint {
            params: NetworkParams {
                cfg: net_cfg,
                params,
                buffers,
            },
            adam: AdamState {
                m: adam_m,
                v: adam_v,
                t: manifest.adam_t,
            },
            epoch: manifest.epoch,
            best_val_loss: manifest.best_val_loss,
            rng: manifest.rng,
            config: manifest.config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    /// Checks that this checkpoint's architecture matches `cfg`, naming the
    /// first mismatching parameter otherwise.
    pub fn validate_against(&self, cfg: &NetworkConfig) -> Result<()> {
        let expect = param_spec(cfg);
        let got = param_spec(&self.params.cfg);
        if expect == got {
            return Ok(());
        }
        for (g, e) in got.trainable.iter().zip(&expect.trainable) {
            if g != e {
                return Err(CliError::Data(format!(
                    "checkpoint parameter '{}' {:?} does not match requested architecture '{}' {:?}",
                    g.0, g.1, e.0, e.1
                )));
            }
        }
        Err(CliError::Data(format!(
            "checkpoint has {} parameters, requested architecture has {}",
            got.trainable.len(),
            expect.trainable.len()
        )))
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
