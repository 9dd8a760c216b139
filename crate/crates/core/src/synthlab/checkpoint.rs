use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ToyModel};
use super::train::Mode;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "spotlight-checkpoint";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.spt";

/// What a checkpoint directory holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// Trained (or freshly initialized) model parameters.
    Model,
    /// No parameters; evaluation copies each reference as its reconstruction.
    IdentityOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub mode: Mode,
    pub step: usize,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

/// A loaded checkpoint. `store` is empty for the identity oracle.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Option<ToyModel>,
    pub store: ParamStore<f32>,
}

/// Writes `manifest.json` and one `SPT1` block per parameter.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &ToyModel,
    store: &ParamStore<f32>,
    mode: Mode,
    step: usize,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: CheckpointKind::Model,
        model: model.config.clone(),
        mode,
        step,
        seed,
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    for (_, t) in store.iter() {
        t.write_spt(&mut w)?;
    }
    w.flush()?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Writes a parameter-free checkpoint that evaluates as a perfect copy.
pub fn save_identity_oracle(dir: impl AsRef<Path>, model: ModelConfig, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: CheckpointKind::IdentityOracle,
        model,
        mode: Mode::Full,
        step: 0,
        seed,
        params: Vec::new(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn format_error(msg: String) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg,
    }
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::MissingFile(mpath));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(format_error(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.kind == CheckpointKind::IdentityOracle {
        return Ok(Checkpoint {
            manifest,
            model: None,
            store: ParamStore::new(),
        });
    }
    // Initial values are overwritten below; the seed only fixes shapes.
    let mut store = ParamStore::new();
    let model = ToyModel::new(manifest.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    if store.len() != manifest.params.len() {
        return Err(format_error(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let ppath = dir.join(PARAMS_FILE);
    if !ppath.exists() {
        return Err(Error::MissingFile(ppath));
    }
    let mut r = BufReader::new(File::open(ppath)?);
    for entry in &manifest.params {
        let t = Tensor::read_spt(&mut r)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(format_error(format!(
                "block for `{}` has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        store.set(&entry.name, t)?;
    }
    Ok(Checkpoint {
        manifest,
        model: Some(model),
        store,
    })
}
