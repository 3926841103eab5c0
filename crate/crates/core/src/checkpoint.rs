//! Model checkpoints: the tensor file plus a JSON sidecar with the model
//! config, the vocabulary reference and training progress.

use std::io::Read;
use std::path::{Path, PathBuf};

use empt_tensor::checkpoint as tensors;
use empt_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::tokenizer::Vocab;
use crate::trainer::{AdamState, TrainConfig};

pub const SIDECAR_FORMAT: &str = "empt-model";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRef {
    /// Absolute, or relative to the checkpoint's directory.
    pub path: String,
    pub sha256: String,
}

impl VocabRef {
    pub fn for_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub model: ModelConfig,
    pub vocab: VocabRef,
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Sidecar {
    pub fn new(model: ModelConfig, vocab: VocabRef, step: u64, total_steps: u64, seed: u64, train: TrainConfig) -> Self {
        Self {
            format: SIDECAR_FORMAT.into(),
            model,
            vocab,
            step,
            total_steps,
            seed,
            train,
        }
    }
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `path` and its sidecar via temporary files, so an interrupted
/// save never replaces a good checkpoint with a partial one.
pub fn save(path: &Path, params: &Params<f32>, adam: Option<&AdamState<f32>>, sidecar: &Sidecar) -> Result<()> {
    let mut names: Vec<String> = params.names().to_vec();
    let mut values: Vec<Tensor<f32>> = Vec::new();
    if let Some(adam) = adam {
        for (i, name) in params.names().iter().enumerate() {
            let shape = params.tensors()[i].shape().to_vec();
            names.push(format!("adam.m.{name}"));
            values.push(Tensor::new(shape.clone(), adam.m[i].clone())?);
            names.push(format!("adam.v.{name}"));
            values.push(Tensor::new(shape, adam.v[i].clone())?);
        }
    }
    let mut entries: Vec<(&str, &Tensor<f32>)> = params.named().collect();
    let n = entries.len();
    entries.extend(names[n..].iter().map(String::as_str).zip(&values));

    let tmp = path.with_extension("ckpt.tmp");
    tensors::save(&tmp, &entries)?;
    let side_tmp = sidecar_path(&tmp);
    let mut sidecar = sidecar.clone();
    sidecar.format = SIDECAR_FORMAT.into();
    std::fs::write(&side_tmp, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side_tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::rename(&side_tmp, &side).map_err(|e| Error::io(&side, e))
}

pub struct Loaded {
    pub params: Params<f32>,
    pub adam: Option<AdamState<f32>>,
    pub sidecar: Sidecar,
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    if sidecar.format != SIDECAR_FORMAT {
        return Err(Error::Serde(format!("{} is not a model sidecar", side.display())));
    }
    Ok(sidecar)
}

pub fn load(path: &Path) -> Result<Loaded> {
    let sidecar = load_sidecar(path)?;
    let mut named = Vec::new();
    let mut moments = std::collections::HashMap::new();
    for (name, data) in tensors::load(path)? {
        let t = data.to_real::<f32>();
        if name.starts_with("adam.") {
            moments.insert(name, t);
        } else {
            named.push((name, t));
        }
    }
    let params = Params::from_named(&sidecar.model, named)?;
    let adam = if moments.is_empty() {
        None
    } else {
        let mut take = |kind: &str, name: &str| {
            moments
                .remove(&format!("adam.{kind}.{name}"))
                .map(Tensor::into_data)
                .ok_or_else(|| Error::Serde(format!("missing adam.{kind}.{name}")))
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in params.names() {
            m.push(take("m", name)?);
            v.push(take("v", name)?);
        }
        Some(AdamState {
            m,
            v,
            step: sidecar.step,
        })
    };
    Ok(Loaded { params, adam, sidecar })
}

/// Loads the vocabulary named by a checkpoint's sidecar and checks its hash.
pub fn load_vocab(ckpt: &Path, sidecar: &Sidecar) -> Result<(Vocab, PathBuf)> {
    let p = PathBuf::from(&sidecar.vocab.path);
    let path = if p.is_absolute() {
        p
    } else {
        ckpt.parent().unwrap_or(Path::new(".")).join(p)
    };
    let hash = file_sha256(&path)?;
    if hash != sidecar.vocab.sha256 {
        return Err(Error::Vocab(format!(
            "{} has sha256 {hash}, the checkpoint expects {}",
            path.display(),
            sidecar.vocab.sha256
        )));
    }
    Ok((Vocab::load(&path)?, path))
}
