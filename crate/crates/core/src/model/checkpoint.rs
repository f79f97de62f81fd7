//! Directory checkpoints: `manifest.json` plus one little-endian f32 blob per
//! parameter under `params/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Cpmoe, ModelConfig, ModelError};
use crate::autograd::ParamStore;
use crate::dataio::TransformSpec;
use crate::physics::{PhysicsConfig, PhysicsNorm, PhysicsParams, Scalars};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint schema version {0}")]
    Version(u32),
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter {0} failed its checksum")]
    Checksum(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub sha256: String,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: ModelConfig,
    seed: u64,
    schema_hash: String,
    spec: TransformSpec,
    physics: PhysicsConfig,
    physics_norm: Option<PhysicsNorm>,
    metrics: BTreeMap<String, f64>,
    params: Vec<ParamEntry>,
}

/// A trained model with everything needed to serve it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Cpmoe,
    /// Network parameters plus the physics log-scalars.
    pub store: ParamStore<f32>,
    pub physics: PhysicsParams,
    pub physics_config: PhysicsConfig,
    pub physics_norm: Option<PhysicsNorm>,
    pub spec: TransformSpec,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn file_name(param: &str) -> String {
    param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect::<String>()
        + ".bin"
}

impl Checkpoint {
    /// Fresh model with physics scalars registered after the network.
    pub fn init(
        config: ModelConfig,
        seed: u64,
        spec: TransformSpec,
        physics_config: PhysicsConfig,
        scalars: &Scalars,
    ) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let model = Cpmoe::new(config, &mut store, seed)?;
        let physics = PhysicsParams::register(&mut store, scalars);
        Ok(Self {
            model,
            store,
            physics,
            physics_config,
            physics_norm: None,
            spec,
            seed,
            metrics: BTreeMap::new(),
        })
    }

    pub fn scalars(&self) -> Scalars {
        self.physics.values(&self.store)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
        let mut params = Vec::with_capacity(self.store.len());
        for id in self.store.ids() {
            let name = self.store.name(id).to_string();
            let value = self.store.get(id);
            let mut bytes = Vec::with_capacity(value.len() * 4);
            for v in value.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let file = file_name(&name);
            let path = pdir.join(&file);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            params.push(ParamEntry {
                name,
                rows: value.nrows(),
                cols: value.ncols(),
                file,
                sha256: hex::encode(Sha256::digest(&bytes)),
                frozen: self.store.is_frozen(id),
            });
        }
        let manifest = Manifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.model.config.clone(),
            seed: self.seed,
            schema_hash: self.spec.schema_hash.clone(),
            spec: self.spec.clone(),
            physics: self.physics_config.clone(),
            physics_norm: self.physics_norm,
            metrics: self.metrics.clone(),
            params,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CheckpointError::Version(manifest.schema_version));
        }
        let mut ck = Self::init(
            manifest.config,
            manifest.seed,
            manifest.spec,
            manifest.physics,
            &crate::synth::PlantConfig::default_scalars(),
        )?;
        let entries: BTreeMap<&str, &ParamEntry> = manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
        let ids: Vec<_> = ck.store.ids().collect();
        for id in ids {
            let name = ck.store.name(id).to_string();
            let entry = entries
                .get(name.as_str())
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let expected = ck.store.get(id).dim();
            if (entry.rows, entry.cols) != expected {
                return Err(CheckpointError::Shape {
                    name,
                    expected,
                    found: (entry.rows, entry.cols),
                });
            }
            let path = dir.join("params").join(&entry.file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if hex::encode(Sha256::digest(&bytes)) != entry.sha256 || bytes.len() != 4 * entry.rows * entry.cols {
                return Err(CheckpointError::Checksum(name));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *ck.store.get_mut(id) = Array2::from_shape_vec(expected, values).expect("length checked");
            ck.store.set_frozen(id, entry.frozen);
        }
        ck.physics_norm = manifest.physics_norm;
        ck.metrics = manifest.metrics;
        Ok(ck)
    }
}
