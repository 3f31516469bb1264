//! Binary checkpoint container.
//!
//! Layout (little endian): magic `MFNETCKP`, `u32` version, `u64` length +
//! JSON config, `u32` parameter count, then per parameter `u32` name length,
//! name, `u32` rank, `u64` dims, `f64` values; finally a SHA-256 of all
//! preceding bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::network::{init_params, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MFNETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
}

pub fn encode_checkpoint(config: &TrainConfig, params: &ParamStore) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + params.num_elements() * 8);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config.to_json();
    b.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    b.extend_from_slice(cfg.as_bytes());
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            b.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in t.data() {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

/// Writes to a sibling temporary file, then renames into place.
pub fn save_checkpoint(path: &Path, config: &TrainConfig, params: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode_checkpoint(config, params))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Load("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses the container and checks the stored parameters against the shape
/// manifest implied by the embedded config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Load("not an MFNet checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Load(format!(
            "checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Load("checkpoint checksum mismatch".into()));
    }
    let cfg_len = r.u64()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Load("embedded config is not UTF-8".into()))?;
    let config = TrainConfig::from_json(cfg_text).map_err(|e| Error::Load(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Load("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Load("bad shape".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data));
    }
    if r.pos != body.len() {
        return Err(Error::Load("trailing bytes after parameters".into()));
    }
    check_manifest(&config, &params)?;
    Ok(Checkpoint { config, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Differences between the stored shapes and those `config` requires.
pub fn manifest_diff(config: &TrainConfig, params: &ParamStore) -> Result<Vec<String>> {
    let mut model_cfg = config.model_config();
    model_cfg.backbone.weights = None;
    let expected = init_params(&model_cfg, 0).map_err(|e| Error::Load(e.to_string()))?;
    let mut diff = Vec::new();
    for (name, t) in expected.iter() {
        match params.try_get(name) {
            None => diff.push(format!("missing {name} {:?}", t.shape())),
            Some(s) if s.shape() != t.shape() => diff.push(format!(
                "{name}: stored {:?}, expected {:?}",
                s.shape(),
                t.shape()
            )),
            Some(_) => {}
        }
    }
    for (name, t) in params.iter() {
        if !expected.contains(name) {
            diff.push(format!("unexpected {name} {:?}", t.shape()));
        }
    }
    Ok(diff)
}

fn check_manifest(config: &TrainConfig, params: &ParamStore) -> Result<()> {
    let diff = manifest_diff(config, params)?;
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Load(format!("shape manifest mismatch:\n  {}", diff.join("\n  "))))
    }
}

/// Loads `path` as a model for `config`, rejecting architecture mismatches.
pub fn load_model(path: &Path, config: &TrainConfig) -> Result<Model> {
    let ck = load_checkpoint(path)?;
    let heads: Vec<String> = ck
        .params
        .groups()
        .into_iter()
        .filter(|g| g.starts_with("decoder."))
        .collect();
    let want = config.model_config().decoder_prefix();
    if !heads.contains(&want) {
        return Err(Error::Load(format!(
            "decoder head mismatch: checkpoint has {}, config needs {want} ({}-way)",
            heads.join(", "),
            config.n_way
        )));
    }
    check_manifest(config, &ck.params)?;
    Model::from_params(config.model_config(), ck.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::Preset;

    fn desk() -> TrainConfig {
        TrainConfig::preset(Preset::Desk)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = desk();
        let p = init_params(&cfg.model_config(), 3).unwrap();
        let ck = decode_checkpoint(&encode_checkpoint(&cfg, &p)).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.params.hash_hex(), p.hash_hex());
    }

    #[test]
    fn corrupted_bytes_rejected() {
        let cfg = desk();
        let p = init_params(&cfg.model_config(), 3).unwrap();
        let mut b = encode_checkpoint(&cfg, &p);
        let mid = b.len() / 2;
        b[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&b), Err(Error::Load(_))));
        let mut b = encode_checkpoint(&cfg, &p);
        b[8] = 9;
        let e = decode_checkpoint(&b).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
    }

    #[test]
    fn tampered_manifest_reports_shape_diff() {
        let cfg = desk();
        let mut p = init_params(&cfg.model_config(), 3).unwrap();
        p.insert("fusion.bogus", Tensor::zeros(&[2]));
        let name = "scale_attn.trans.conv.bias";
        p.insert(name, Tensor::zeros(&[5]));
        let e = decode_checkpoint(&encode_checkpoint(&cfg, &p)).unwrap_err().to_string();
        assert!(e.contains(name) && e.contains("[5]") && e.contains("fusion.bogus"), "{e}");
    }

    #[test]
    fn head_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let cfg = desk();
        save_checkpoint(&path, &cfg, &init_params(&cfg.model_config(), 3).unwrap()).unwrap();
        let mut five = cfg.clone();
        five.n_way = 5;
        let e = load_model(&path, &five).err().unwrap();
        assert!(matches!(e, Error::Load(_)));
        assert!(e.to_string().contains("decoder head mismatch"), "{e}");
        assert!(load_model(&path, &cfg).is_ok());
    }
}
