//! Checkpoints: safetensors archives of f32 parameters keyed by canonical
//! dotted names, with JSON metadata under the `comix` key.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use comix_core::config::AudioConfig;
use comix_core::ToolkitConfig;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, ModelError, Result};
use crate::nn::{hex, ParamStore};
use crate::speaker::{EmbeddingTable, SpeakerPolicy};
use crate::spectrogen::{Tacotron, TacotronSpec};
use crate::waveglow::Waveglow;

pub const METADATA_KEY: &str = "comix";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tacotron,
    Waveglow,
}

/// One training run in a checkpoint's ancestry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub recipe: String,
    pub stage: String,
    /// Path of the checkpoint this run started from; `None` for scratch.
    pub init_from: Option<String>,
    /// File digest of `init_from` at load time.
    pub init_digest: Option<String>,
    pub manifest: Option<String>,
    pub seed: u64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMeta {
    pub policy: SpeakerPolicy,
    /// Version string of the extractor that produced the embeddings.
    pub extractor: String,
    /// Present for AVG_EMBED models.
    pub table: Option<EmbeddingTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub kind: ModelKind,
    pub config: ToolkitConfig,
    #[serde(default)]
    pub tacotron: Option<TacotronSpec>,
    #[serde(default)]
    pub speaker: Option<SpeakerMeta>,
    /// Oldest first; the last entry produced this checkpoint.
    pub provenance: Vec<ProvenanceEntry>,
    pub step: usize,
}

impl CheckpointMeta {
    pub fn tacotron(config: &ToolkitConfig, spec: &TacotronSpec) -> Self {
        Self {
            format: FORMAT_VERSION,
            kind: ModelKind::Tacotron,
            config: config.clone(),
            tacotron: Some(spec.clone()),
            speaker: None,
            provenance: Vec::new(),
            step: 0,
        }
    }

    pub fn waveglow(config: &ToolkitConfig) -> Self {
        Self {
            format: FORMAT_VERSION,
            kind: ModelKind::Waveglow,
            config: config.clone(),
            tacotron: None,
            speaker: None,
            provenance: Vec::new(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub meta: CheckpointMeta,
    /// SHA-256 of the file bytes.
    pub digest: String,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes every store entry plus metadata. Returns the file digest.
pub fn save(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<String> {
    let snap = store.snapshot_f32()?;
    let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(snap.len());
    for (name, t) in snap {
        let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        raw.push((name, t.dims().to_vec(), bytes));
    }
    let views: Vec<(String, TensorView<'_>)> = raw
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| ck_err(path, e.to_string()))
        })
        .collect::<Result<_>>()?;
    let mut md = HashMap::new();
    md.insert(METADATA_KEY.to_string(), serde_json::to_string(meta)?);
    let bytes = safetensors::serialize(views, Some(md)).map_err(|e| ck_err(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e.to_string()))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| ck_err(path, format!("no `{METADATA_KEY}` metadata")))?;
        let meta: CheckpointMeta = serde_json::from_str(text).map_err(|e| ck_err(path, format!("metadata: {e}")))?;
        if meta.format != FORMAT_VERSION {
            return Err(ck_err(path, format!("format {} is not supported", meta.format)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(path, e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(ck_err(path, format!("{name} is {:?}, expected F32", view.dtype())));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        Ok(Self {
            path: path.to_path_buf(),
            meta,
            digest: hex(&Sha256::digest(&bytes)),
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| ck_err(&self.path, format!("missing {name}")))?;
        Ok(Tensor::from_vec(values.clone(), shape.as_slice(), &Device::Cpu)?)
    }

    /// Copies every parameter into `store`; names and shapes must agree
    /// exactly in both directions.
    pub fn apply_exact(&self, store: &ParamStore) -> Result<()> {
        if let Some(extra) = self.tensors.keys().find(|k| !store.contains(k)) {
            return Err(ck_err(&self.path, format!("unexpected parameter {extra}")));
        }
        for name in store.names() {
            store.assign(name, &self.tensor(name)?)?;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(ck_err(&self.path, format!("holds a {:?} model, expected {kind:?}", self.meta.kind)));
        }
        Ok(())
    }

    pub fn tacotron(&self) -> Result<Tacotron> {
        self.expect_kind(ModelKind::Tacotron)?;
        let spec = self
            .meta
            .tacotron
            .clone()
            .ok_or_else(|| ck_err(&self.path, "tacotron checkpoint without a model spec"))?;
        let model = Tacotron::new(spec, DType::F32, 0)?;
        self.apply_exact(model.store())?;
        Ok(model)
    }

    pub fn waveglow(&self) -> Result<Waveglow> {
        self.expect_kind(ModelKind::Waveglow)?;
        let model = Waveglow::new(&self.meta.config.waveglow, &self.meta.config.audio, DType::F32, 0)?;
        self.apply_exact(model.store())?;
        Ok(model)
    }
}

/// Field-by-field comparison of two audio sections; any difference is an
/// error naming the fields.
pub fn check_audio_compat(a: &AudioConfig, b: &AudioConfig) -> Result<()> {
    let va = serde_json::to_value(a)?;
    let vb = serde_json::to_value(b)?;
    if va == vb {
        return Ok(());
    }
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return Err(ModelError::AudioConfigMismatch("audio sections differ".into()));
    };
    let diffs: Vec<String> = ma
        .iter()
        .filter(|(k, v)| mb.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: {v} vs {}", mb.get(k).map(|x| x.to_string()).unwrap_or_default()))
        .collect();
    Err(ModelError::AudioConfigMismatch(diffs.join(", ")))
}
