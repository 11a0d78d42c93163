//! On-disk parameter checkpoints.
//!
//! A checkpoint is a directory holding
//!
//! * `spec.toml`: the model description as key/value text,
//! * `params/<name>.bin`: one file per parameter, an 8-byte magic `TSCLPAR1`,
//!   a little-endian `u32` rank, `u64` dims, then little-endian `f32` values,
//! * `manifest.txt`: `<sha256>  <relative path>` for every file above.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderSpec};
use crate::nn::ParamStore;
use crate::strategy::{ForecastModel, Head, MlpHead, Readout, RidgeHead};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TSCLPAR1";
pub const SPEC_FILE: &str = "spec.toml";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn encode_param(t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    let vals = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let mut buf = Vec::with_capacity(8 + 4 + 8 * dims.len() + 4 * vals.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn decode_param(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |r: &str| Error::CheckpointMismatch(format!("{}: {r}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = bytes.get(off..off + 8).ok_or_else(|| bad("truncated header"))?;
        dims.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        off += 8;
    }
    let n: usize = dims.iter().product();
    let body = &bytes[off..];
    if body.len() != 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let vals: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(vals, dims, &Device::Cpu)?)
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `spec_text` and every parameter of `params` under `dir`.
pub fn save(dir: &Path, spec_text: &str, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let mut manifest = String::new();
    fs::write(dir.join(SPEC_FILE), spec_text)?;
    manifest.push_str(&format!("{}  {SPEC_FILE}\n", sha256(spec_text.as_bytes())));
    for (name, var) in params.iter() {
        let rel = format!("params/{name}.bin");
        let bytes = encode_param(var.as_tensor())?;
        fs::write(dir.join(&rel), &bytes)?;
        manifest.push_str(&format!("{}  {rel}\n", sha256(&bytes)));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a checkpoint, verifying every manifest hash. Parameters come back
/// as `f32` bit-identical to what was written, then cast to `dtype`.
pub fn load(dir: &Path, dtype: DType) -> Result<(String, ParamStore)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let mut spec_text = None;
    let mut params = ParamStore::new(dtype);
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (hash, rel) = line
            .split_once("  ")
            .ok_or_else(|| Error::CheckpointMismatch(format!("bad manifest line `{line}`")))?;
        let path: PathBuf = dir.join(rel);
        let bytes = fs::read(&path)?;
        if sha256(&bytes) != hash {
            return Err(Error::CheckpointMismatch(format!("hash mismatch for {rel}")));
        }
        if rel == SPEC_FILE {
            spec_text = Some(String::from_utf8_lossy(&bytes).into_owned());
        } else if let Some(name) = rel.strip_prefix("params/").and_then(|s| s.strip_suffix(".bin")) {
            params.insert_tensor(name, &decode_param(&bytes, &path)?)?;
        }
    }
    let spec_text = spec_text.ok_or_else(|| Error::CheckpointMismatch("manifest lacks spec.toml".into()))?;
    Ok((spec_text, params))
}

pub fn save_encoder(dir: &Path, encoder: &Encoder) -> Result<()> {
    let spec = toml::to_string(&encoder.spec).map_err(|e| Error::config("encoder", e.to_string()))?;
    save(dir, &spec, &encoder.params)
}

pub fn load_encoder(dir: &Path, dtype: DType) -> Result<Encoder> {
    let (text, params) = load(dir, dtype)?;
    let spec: EncoderSpec =
        toml::from_str(&text).map_err(|e| Error::CheckpointMismatch(format!("spec.toml: {e}")))?;
    Encoder::from_params(spec, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum HeadKind {
    Mlp,
    Ridge,
}

/// Everything besides parameters needed to rebuild a [`ForecastModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    encoder: EncoderSpec,
    head: HeadKind,
    hidden: usize,
    readout: Readout,
    horizon: usize,
    n_features: usize,
    alpha: f64,
}

const RIDGE_W: &str = "ridge.weights";
const RIDGE_B: &str = "ridge.bias";

/// Encoder and head parameters in one checkpoint. Ridge weights are stored
/// as `f32` like every other parameter.
pub fn save_model(dir: &Path, model: &ForecastModel) -> Result<()> {
    let mut params = model.encoder.params.to_dtype(DType::F32)?;
    let (head, hidden, alpha) = match &model.head {
        Head::Mlp(h) => {
            params.extend(&h.params.to_dtype(DType::F32)?);
            (HeadKind::Mlp, h.hidden, 0.0)
        }
        Head::Ridge(r) => {
            let (fi, fo) = r.weights.shape();
            let mut w = Vec::with_capacity(fi * fo);
            for i in 0..fi {
                for j in 0..fo {
                    w.push(r.weights[(i, j)]);
                }
            }
            params.insert_data(RIDGE_W, &[fi, fo], w)?;
            params.insert_data(RIDGE_B, &[fo], r.bias.clone())?;
            (HeadKind::Ridge, 0, r.alpha)
        }
    };
    let meta = ModelMeta {
        encoder: model.encoder.spec.clone(),
        head,
        hidden,
        readout: model.readout,
        horizon: model.horizon,
        n_features: model.n_features,
        alpha,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::config("model", e.to_string()))?;
    save(dir, &text, &params)
}

pub fn load_model(dir: &Path, dtype: DType) -> Result<ForecastModel> {
    let (text, params) = load(dir, dtype)?;
    let meta: ModelMeta = toml::from_str(&text).map_err(|e| Error::CheckpointMismatch(format!("{SPEC_FILE}: {e}")))?;
    let mut enc_params = ParamStore::new(dtype);
    let mut head_params = ParamStore::new(dtype);
    for (name, var) in params.iter() {
        if name.starts_with("head.") {
            head_params.insert_tensor(name.clone(), var.as_tensor())?;
        } else if !name.starts_with("ridge.") {
            enc_params.insert_tensor(name.clone(), var.as_tensor())?;
        }
    }
    let encoder = Encoder::from_params(meta.encoder.clone(), enc_params)?;
    let head = match meta.head {
        HeadKind::Mlp => Head::Mlp(MlpHead { params: head_params, hidden: meta.hidden }),
        HeadKind::Ridge => {
            let w = params.get(RIDGE_W)?;
            let (fi, fo) = w.dims2()?;
            let weights = DMatrix::from_row_slice(fi, fo, &params.values_f64(RIDGE_W)?);
            Head::Ridge(RidgeHead { weights, bias: params.values_f64(RIDGE_B)?, alpha: meta.alpha })
        }
    };
    Ok(ForecastModel { encoder, head, readout: meta.readout, horizon: meta.horizon, n_features: meta.n_features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderKind;

    #[test]
    fn encoder_round_trip_is_bitwise() {
        let spec = EncoderSpec {
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 4,
            ..EncoderSpec::default_for(EncoderKind::Transformer, 3)
        };
        let enc = Encoder::build(&spec, 5, DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_encoder(dir.path(), &enc).unwrap();
        let back = load_encoder(dir.path(), DType::F32).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.params.checksum().unwrap(), enc.params.checksum().unwrap());
    }

    #[test]
    fn tampered_file_is_rejected() {
        let spec = EncoderSpec {
            hidden_dim: 4,
            num_layers: 1,
            tcn_channels: 4,
            ..EncoderSpec::default_for(EncoderKind::Tcn, 2)
        };
        let enc = Encoder::build(&spec, 5, DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_encoder(dir.path(), &enc).unwrap();
        let p = dir.path().join("params/embed.weight.bin");
        let mut bytes = fs::read(&p).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_encoder(dir.path(), DType::F32), Err(Error::CheckpointMismatch(_))));
    }
}
