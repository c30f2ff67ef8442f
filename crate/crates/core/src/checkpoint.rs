//! Checkpoints: every parameter group plus a provenance record, stored as
//! safetensors with the provenance JSON in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Group, GroupSet, ParamStore};
use crate::training::StageId;

const METADATA_KEY: &str = "sketchcolor";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// In completion order.
    pub stages_completed: Vec<StageId>,
    pub config_hash: String,
    /// Seed that initialized every parameter not yet trained.
    pub init_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub stage_steps: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    provenance: Provenance,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub provenance: Provenance,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Fresh, untrained parameters for every group.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
        let params = ParamStore::new(DType::F32, Device::Cpu, seed);
        Model::build(&params, config, GroupSet::EMPTY)?;
        Ok(Checkpoint {
            provenance: Provenance {
                stages_completed: Vec::new(),
                config_hash: config.hash(),
                init_seed: seed,
                stage_seeds: BTreeMap::new(),
                stage_steps: BTreeMap::new(),
            },
            config: config.clone(),
            params,
        })
    }

    pub fn model(&self, trainable: GroupSet) -> Result<Model> {
        Model::build(&self.params, &self.config, trainable)
    }

    pub fn has_stage(&self, stage: StageId) -> bool {
        self.provenance.stages_completed.contains(&stage)
    }

    /// Latest completed stage in pipeline order.
    pub fn latest_stage(&self) -> Option<StageId> {
        self.provenance.stages_completed.iter().max().copied()
    }

    pub fn require_stage(&self, stage: StageId, purpose: &str) -> Result<()> {
        if self.has_stage(stage) {
            Ok(())
        } else {
            Err(Error::Provenance(format!(
                "{purpose} requires stage {stage}, checkpoint has completed [{}]",
                self.stages_string()
            )))
        }
    }

    pub fn stages_string(&self) -> String {
        self.provenance.stages_completed.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
    }

    pub fn deep_clone(&self) -> Result<Checkpoint> {
        Ok(Checkpoint { config: self.config.clone(), provenance: self.provenance.clone(), params: self.params.deep_clone()? })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.params.tensors();
        let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
        for (name, t) in tensors {
            let bytes: Vec<u8> = t
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            raw.push((name, t.dims().to_vec(), bytes));
        }
        let views = raw
            .iter()
            .map(|(n, s, b)| Ok((n.as_str(), safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), b)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header = Header { format_version: FORMAT_VERSION, config: self.config.clone(), provenance: self.provenance.clone() };
        let meta = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&header)?)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, meta) = SafeTensors::read_metadata(buf).map_err(bad)?;
        let json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::Checkpoint("missing provenance metadata".into()))?;
        let header: Header = serde_json::from_str(json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        if header.provenance.config_hash != header.config.hash() {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let st = SafeTensors::deserialize(buf).map_err(bad)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32, found {:?}", view.dtype())));
            }
            let data: Vec<f32> =
                view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name.to_string(), Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
        }
        for g in Group::ALL {
            let prefix = format!("{}.", g.name());
            if !tensors.keys().any(|k| k.starts_with(&prefix)) {
                return Err(Error::Checkpoint(format!("group `{g}` missing")));
            }
        }
        let params = ParamStore::from_tensors(tensors, DType::F32, Device::Cpu, header.provenance.init_seed)?;
        // Fails if the stored shapes disagree with the config.
        Model::build(&params, &header.config, GroupSet::EMPTY)?;
        Ok(Checkpoint { config: header.config, provenance: header.provenance, params })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
