//! Base models and domain adapters available to the service, loaded from a
//! TOML registry file:
//!
//! ```toml
//! [[model]]
//! id = "toy"
//! path = "base.bin"
//! tokenizer = "tokenizer.txt"
//! quant = "int8"          # optional: quantize on load
//!
//! [[adapter]]
//! id = "medical"
//! base = "toy"
//! path = "medical/adapter.bin"
//! domain = "medical"
//! ```
//!
//! Relative paths resolve against the registry file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tinylora::data::Tokenizer;
use tinylora::lora::{self, LoraAdapter};
use tinylora::model::{self, ModelConfig, ModelWeights};
use tinylora::quant::{self, BaseQuant, DEFAULT_BLOCK_SIZE};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
pub struct RegistryFile {
    #[serde(default, rename = "model")]
    pub models: Vec<ModelSpec>,
    #[serde(default, rename = "adapter")]
    pub adapters: Vec<AdapterSpec>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ModelSpec {
    pub id: String,
    pub path: PathBuf,
    pub tokenizer: PathBuf,
    #[serde(default)]
    pub quant: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct AdapterSpec {
    pub id: String,
    pub base: String,
    pub path: PathBuf,
    #[serde(default = "general")]
    pub domain: String,
}

fn general() -> String {
    "general".to_string()
}

pub struct BaseModel {
    pub id: String,
    pub path: PathBuf,
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
    pub tokenizer: Tokenizer,
    pub quant: BaseQuant,
}

pub struct RegisteredAdapter {
    pub id: String,
    pub base: String,
    pub path: PathBuf,
    pub domain: String,
    pub adapter: LoraAdapter,
}

#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<BaseModel>>,
    adapters: BTreeMap<String, Arc<RegisteredAdapter>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub id: String,
    pub quant: String,
    pub fingerprint: String,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterInfo {
    pub id: String,
    pub base: String,
    pub domain: String,
    pub base_fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Listing {
    pub models: Vec<ModelInfo>,
    pub adapters: Vec<AdapterInfo>,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// A checkpoint directory or an adapter container path.
pub fn adapter_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("adapter.bin")
    } else {
        path.to_path_buf()
    }
}

/// Loads a base checkpoint, optionally quantizing its matrices.
pub fn load_base(path: &Path, quant_scheme: BaseQuant) -> CliResult<(ModelConfig, ModelWeights)> {
    let (cfg, weights) = model::load_model(path)?;
    let weights = match quant_scheme.scheme() {
        Some(s) if !weights.is_quantized() => quant::quantize_weights(&weights, s, DEFAULT_BLOCK_SIZE)?,
        _ => weights,
    };
    Ok((cfg, weights))
}

fn base_quant_of(weights: &ModelWeights) -> BaseQuant {
    let mut scheme = BaseQuant::None;
    for (_, w) in weights.iter() {
        if let model::WeightTensor::Quantized(q) = w {
            scheme = match q.scheme() {
                quant::Scheme::Int8Absmax => BaseQuant::Int8,
                quant::Scheme::Nf4 => BaseQuant::Nf4,
            };
        }
    }
    scheme
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let file: RegistryFile = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::from_file(&file, root)
    }

    pub fn from_file(file: &RegistryFile, root: &Path) -> CliResult<Self> {
        let mut reg = Self::new();
        for m in &file.models {
            let quant: BaseQuant = match &m.quant {
                Some(q) => q.parse()?,
                None => BaseQuant::None,
            };
            let mpath = resolve(root, &m.path);
            let (cfg, weights) = load_base(&mpath, quant)?;
            let tokenizer = Tokenizer::load(resolve(root, &m.tokenizer))?;
            reg.add_model(BaseModel {
                id: m.id.clone(),
                path: mpath,
                quant: base_quant_of(&weights),
                cfg,
                weights,
                tokenizer,
            })?;
        }
        for a in &file.adapters {
            let apath = adapter_file(&resolve(root, &a.path));
            let adapter = lora::load_adapter(&apath)
                .map_err(|e| CliError::Runtime(format!("adapter {}: {e}", a.id)))?;
            reg.add_adapter(RegisteredAdapter {
                id: a.id.clone(),
                base: a.base.clone(),
                path: apath,
                domain: a.domain.clone(),
                adapter,
            })?;
        }
        Ok(reg)
    }

    pub fn add_model(&mut self, m: BaseModel) -> CliResult<()> {
        if self.models.contains_key(&m.id) {
            return Err(CliError::Usage(format!("duplicate model id {:?}", m.id)));
        }
        if m.tokenizer.vocab_size() > m.cfg.vocab_size {
            return Err(CliError::Runtime(format!(
                "model {}: tokenizer has {} ids but the model only {}",
                m.id,
                m.tokenizer.vocab_size(),
                m.cfg.vocab_size
            )));
        }
        self.models.insert(m.id.clone(), Arc::new(m));
        Ok(())
    }

    /// Registers an adapter after checking it was trained on its base.
    pub fn add_adapter(&mut self, a: RegisteredAdapter) -> CliResult<()> {
        if self.adapters.contains_key(&a.id) {
            return Err(CliError::Usage(format!("duplicate adapter id {:?}", a.id)));
        }
        let base = self
            .models
            .get(&a.base)
            .ok_or_else(|| CliError::Usage(format!("adapter {} names unknown base {:?}", a.id, a.base)))?;
        a.adapter
            .check_base(&base.weights)
            .map_err(|e| CliError::Runtime(format!("adapter {}: {e}", a.id)))?;
        for (module, pair) in a.adapter.pairs() {
            let shape = base
                .weights
                .get(module)
                .map(|w| w.shape().to_vec())
                .ok_or_else(|| CliError::Runtime(format!("adapter {}: base has no {module}", a.id)))?;
            if pair.a.shape()[1] != shape[0] || pair.b.shape()[0] != shape[1] {
                return Err(CliError::Runtime(format!("adapter {}: {module} shape mismatch", a.id)));
            }
        }
        self.adapters.insert(a.id.clone(), Arc::new(a));
        Ok(())
    }

    pub fn model(&self, id: &str) -> Option<Arc<BaseModel>> {
        self.models.get(id).cloned()
    }

    pub fn adapter(&self, id: &str) -> Option<Arc<RegisteredAdapter>> {
        self.adapters.get(id).cloned()
    }

    /// The only model, when exactly one is registered.
    pub fn default_model(&self) -> Option<Arc<BaseModel>> {
        (self.models.len() == 1).then(|| self.models.values().next().cloned()).flatten()
    }

    pub fn listing(&self) -> Listing {
        Listing {
            models: self
                .models
                .values()
                .map(|m| ModelInfo {
                    id: m.id.clone(),
                    quant: m.quant.to_string(),
                    fingerprint: format!("{:016x}", m.weights.origin_fingerprint()),
                    vocab_size: m.cfg.vocab_size,
                    max_seq_len: m.cfg.max_seq_len,
                })
                .collect(),
            adapters: self
                .adapters
                .values()
                .map(|a| AdapterInfo {
                    id: a.id.clone(),
                    base: a.base.clone(),
                    domain: a.domain.clone(),
                    base_fingerprint: format!("{:016x}", a.adapter.base_fingerprint()),
                })
                .collect(),
        }
    }
}
