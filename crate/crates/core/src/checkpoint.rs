//! Versioned binary model container.
//!
//! Layout: `b"VLMC"` magic, u32 version, u64 header length, JSON header
//! (config, optional site configuration, parameter manifest), u64 data
//! length, raw little-endian tensor data in manifest order, and a trailing
//! SHA-256 of everything before it. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{BayesConfig, VariationalSite};
use crate::corpus::hex;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Param};
use crate::tensor::{Real, Tensor, DTYPE};

const MAGIC: &[u8; 4] = b"VLMC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    model: ModelConfig,
    bayes: Option<BayesConfig>,
    vocab_fingerprint: Option<String>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ParamKind {
    Det,
    Site,
}

/// A loaded checkpoint: the model plus optional provenance.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub bayes: Option<BayesConfig>,
    pub vocab_fingerprint: Option<String>,
}

fn push_tensor(data: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(
    path: &Path,
    model: &Model,
    bayes: Option<&BayesConfig>,
    vocab_fingerprint: Option<&str>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (name, p) in &model.params {
        match p {
            Param::Det(t) => {
                entries.push(ParamEntry {
                    name: name.clone(),
                    kind: ParamKind::Det,
                    shape: t.shape().to_vec(),
                });
                push_tensor(&mut data, t);
            }
            Param::Site(s) => {
                entries.push(ParamEntry {
                    name: name.clone(),
                    kind: ParamKind::Site,
                    shape: s.mu.shape().to_vec(),
                });
                push_tensor(&mut data, &s.mu);
                push_tensor(&mut data, &s.log_sigma);
                push_tensor(&mut data, &s.prior_mu);
                push_tensor(&mut data, &s.prior_sigma);
            }
        }
    }
    let header = Header {
        format: "varlm-checkpoint".to_string(),
        dtype: DTYPE.to_string(),
        model: model.config.clone(),
        bayes: bayes.cloned(),
        vocab_fingerprint: vocab_fingerprint.map(str::to_string),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + data.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let width = std::mem::size_of::<Real>();
        let raw = self.take(n * width)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(width) {
            data.push(Real::from_le_bytes(chunk.try_into().unwrap()));
        }
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 48 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("header parse: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match this build ({DTYPE})",
            header.dtype
        )));
    }
    let data_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let data_start = r.pos;

    let mut params = BTreeMap::new();
    for entry in &header.params {
        let p = match entry.kind {
            ParamKind::Det => Param::Det(r.tensor(&entry.shape)?),
            ParamKind::Site => {
                let mu = r.tensor(&entry.shape)?;
                let log_sigma = r.tensor(&entry.shape)?;
                let prior_mu = r.tensor(&entry.shape)?;
                let prior_sigma = r.tensor(&entry.shape)?;
                Param::Site(VariationalSite::new(mu, log_sigma, prior_mu, prior_sigma)?)
            }
        };
        params.insert(entry.name.clone(), p);
    }
    if r.pos - data_start != data_len {
        return Err(Error::Format("checkpoint data length disagrees with manifest".into()));
    }
    let model = Model::from_parts(header.model, params)?;
    Ok(Checkpoint { model, bayes: header.bayes, vocab_fingerprint: header.vocab_fingerprint })
}

/// SHA-256 of a file, hex-encoded. Used by run manifests.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{promote, BayesConfig, SiteSpec};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_blocks: 1,
            d_model: 4,
            d_ff: 6,
            n_heads: 2,
            vocab_size: 8,
            max_len: 10,
            dropout_rate: 0.0,
            tie_embeddings: false,
        }
    }

    #[test]
    fn deterministic_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(cfg(), 21).unwrap();
        let path = dir.path().join("model.vlmc");
        save(&path, &model, None, Some("abc123")).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.model.params, model.params);
        assert_eq!(loaded.model.config, model.config);
        assert_eq!(loaded.vocab_fingerprint.as_deref(), Some("abc123"));
        assert!(loaded.bayes.is_none());

        // identical bytes on re-save
        let path2 = dir.path().join("model2.vlmc");
        save(&path2, &loaded.model, None, Some("abc123")).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bayesian_round_trip_keeps_sites() {
        let dir = tempfile::tempdir().unwrap();
        let base = Model::init(cfg(), 22).unwrap();
        let bc = BayesConfig::with_sites(vec![SiteSpec::ff(1), SiteSpec::emb()]);
        let promoted = promote(&base, &bc, &base).unwrap();
        let path = dir.path().join("bayes.vlmc");
        save(&path, &promoted, Some(&bc), None).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.model.params, promoted.params);
        assert_eq!(loaded.bayes, Some(bc));
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(cfg(), 23).unwrap();
        let path = dir.path().join("model.vlmc");
        save(&path, &model, None, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn junk_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, vec![7u8; 100]).unwrap();
        assert!(load(&path).is_err());
    }
}
