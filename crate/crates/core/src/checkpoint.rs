//! Single-file container for model parameters and back-end models.
//!
//! ```text
//! magic        8 bytes  "DEAANCK1"
//! header_len   u32 little-endian
//! header       header_len bytes of UTF-8 JSON
//! data         f64 little-endian, tensors back to back
//! ```
//!
//! The header records the container kind, configuration, training position
//! and RNG state, and for each tensor its name, role, shape, and element
//! offset into the data section.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendModel, Plda};
use crate::corpus::io::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEAANCK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Model,
    Backend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    offset: usize,
}

/// Serializable ChaCha8 position: key, stream, and word position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Config("malformed RNG state in checkpoint".into());
        if self.seed_hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    architecture: Option<Architecture>,
    #[serde(default)]
    epoch: u64,
    #[serde(default)]
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

fn encode(header: &Header, tensors: &[&Tensor]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + tensors.iter().map(|t| t.len() * 8).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Header, Vec<(TensorEntry, Tensor)>)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a DEAANCK1 checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_start = 12 + hlen;
    if bytes.len() < body_start {
        return Err(Error::format(path, "truncated checkpoint header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
    let body = &bytes[body_start..];
    if body.len() % 8 != 0 {
        return Err(Error::format(path, "checkpoint data is not a whole number of f64 values"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n;
        if end > values.len() {
            return Err(Error::format(path, format!("tensor `{}` runs past the data section", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())
            .map_err(|err| Error::format(path, format!("tensor `{}`: {err}", e.name)))?;
        out.push((e.clone(), t));
    }
    Ok((header, out))
}

fn read(path: &Path) -> Result<(Header, Vec<(TensorEntry, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Model parameters plus everything needed to rebuild and resume the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub store: ParamStore,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        let all = self
            .store
            .params
            .iter()
            .map(|(k, v)| (k, v, Role::Param))
            .chain(self.store.buffers.iter().map(|(k, v)| (k, v, Role::Buffer)));
        for (name, t, role) in all {
            entries.push(TensorEntry {
                name: name.clone(),
                role,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            tensors.push(t);
        }
        let header = Header {
            kind: Kind::Model,
            model: Some(self.config.clone()),
            architecture: Some(self.arch),
            epoch: self.epoch,
            step: self.step,
            rng: Some(self.rng.clone()),
            tensors: entries,
        };
        write_atomic(path, &encode(&header, &tensors))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read(path)?;
        if header.kind != Kind::Model {
            return Err(Error::Config(format!("{} is a {:?} checkpoint, not a model", path.display(), header.kind)));
        }
        let missing = |what: &str| Error::format(path, format!("model checkpoint lacks {what}"));
        let config = header.model.ok_or_else(|| missing("a model config"))?;
        let arch = header.architecture.ok_or_else(|| missing("an architecture"))?;
        let rng = header.rng.ok_or_else(|| missing("RNG state"))?;
        let mut store = ParamStore::new();
        for (e, t) in tensors {
            match e.role {
                Role::Param => store.params.insert(e.name, t),
                Role::Buffer => store.buffers.insert(e.name, t),
            };
        }
        let ck = Self {
            config,
            arch,
            epoch: header.epoch,
            step: header.step,
            rng,
            store,
        };
        ck.check_compatible()?;
        Ok(ck)
    }

    /// Rebuilds the networks the checkpoint was saved from.
    pub fn model(&self) -> Result<Model> {
        Model::new(&self.config, self.arch)
    }

    /// Verifies every tensor name and shape against a freshly built model.
    pub fn check_compatible(&self) -> Result<()> {
        let model = self.model()?;
        let template = model.init(&mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        check_against(&template, &self.store)
    }
}

/// Lists every name/shape difference between `expected` and `found`.
pub fn check_against(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    let mut diffs = Vec::new();
    for (label, exp, got) in [
        ("parameter", &expected.params, &found.params),
        ("buffer", &expected.buffers, &found.buffers),
    ] {
        for (name, t) in exp {
            match got.get(name) {
                None => diffs.push(format!("missing {label} `{name}` {:?}", t.shape())),
                Some(g) if g.shape() != t.shape() => diffs.push(format!(
                    "{label} `{name}`: expected {:?}, found {:?}",
                    t.shape(),
                    g.shape()
                )),
                _ => {}
            }
        }
        for (name, t) in got {
            if !exp.contains_key(name) {
                diffs.push(format!("unexpected {label} `{name}` {:?}", t.shape()));
            }
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("checkpoint does not match the model: {}", diffs.join("; "))))
    }
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::new(vec![r, c], (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect())
        .expect("matrix shape matches its data")
}

fn tensor_matrix(path: &Path, name: &str, t: &Tensor) -> Result<DMatrix<f64>> {
    match t.shape() {
        [r, c] => Ok(DMatrix::from_row_slice(*r, *c, t.data())),
        s => Err(Error::format(path, format!("`{name}` should be a matrix, found shape {s:?}"))),
    }
}

pub fn save_backend(path: &Path, model: &BackendModel) -> Result<()> {
    let parts = [
        ("mean", Tensor::vector(model.mean.clone())),
        ("lda", matrix_tensor(&model.lda)),
        ("plda.mean", Tensor::vector(model.plda.mean.iter().copied().collect())),
        ("plda.between", matrix_tensor(&model.plda.between)),
        ("plda.within", matrix_tensor(&model.plda.within)),
    ];
    let mut offset = 0;
    let entries = parts
        .iter()
        .map(|(n, t)| {
            let e = TensorEntry {
                name: n.to_string(),
                role: Role::Param,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        kind: Kind::Backend,
        model: None,
        architecture: None,
        epoch: 0,
        step: 0,
        rng: None,
        tensors: entries,
    };
    let refs: Vec<&Tensor> = parts.iter().map(|(_, t)| t).collect();
    write_atomic(path, &encode(&header, &refs))
}

pub fn load_backend(path: &Path) -> Result<BackendModel> {
    let (header, tensors) = read(path)?;
    if header.kind != Kind::Backend {
        return Err(Error::Config(format!("{} is not a back-end model", path.display())));
    }
    let get = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(path, format!("back-end model lacks `{name}`")))
    };
    let plda = Plda {
        mean: DVector::from_column_slice(get("plda.mean")?.data()),
        between: tensor_matrix(path, "plda.between", get("plda.between")?)?,
        within: tensor_matrix(path, "plda.within", get("plda.within")?)?,
    };
    BackendModel::from_parts(
        get("mean")?.data().to_vec(),
        tensor_matrix(path, "lda", get("lda")?)?,
        plda,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ModelConfig {
        ModelConfig {
            n_mels: 8,
            d_id: 6,
            d_dom: 5,
            num_speakers_source: 3,
            num_speakers_target: 2,
            crop_frames: 128,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_round_trip_and_mismatch_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let model = Model::new(&cfg, Architecture::Deaan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = model.init(&mut rng);
        let ck = ModelCheckpoint {
            config: cfg.clone(),
            arch: Architecture::Deaan,
            epoch: 3,
            step: 42,
            rng: RngState::capture(&rng),
            store,
        };
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut r2 = back.rng.restore().unwrap();
        use rand::Rng;
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());

        // Same tensors under a config with a different embedding size.
        let mut wrong = ck.clone();
        wrong.config.d_id = 7;
        wrong.save(&path).unwrap();
        match ModelCheckpoint::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("e_id.fc2.weight"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"DEAANCK2\0\0\0\0").unwrap();
        assert!(matches!(ModelCheckpoint::load(&path), Err(Error::Format { .. })));
    }
}
