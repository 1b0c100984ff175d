//! Checkpoints: one GCGT tensor file per parameter (value and both Adam
//! moments) plus a JSON index. Round-trips restore bitwise-identical
//! parameters and step counters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{tensorfile, RunConfig};
use crate::error::{Error, Result};
use crate::numerics::optim::ParamStore;
use crate::numerics::tensor::{Precision, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    step: u64,
    epoch: usize,
    config: RunConfig,
    params: Vec<String>,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    config: &RunConfig,
    epoch: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let value = store.value(name)?;
        tensorfile::write_tensor(value, &dir.join(format!("{name}.value.gcgt")))?;
        let (m1, m2) = store.moments(name)?;
        let extents = value.extents().to_vec();
        tensorfile::write_tensor(
            &Tensor::new(extents.clone(), m1.to_vec(), Precision::P64)?,
            &dir.join(format!("{name}.m.gcgt")),
        )?;
        tensorfile::write_tensor(
            &Tensor::new(extents, m2.to_vec(), Precision::P64)?,
            &dir.join(format!("{name}.v.gcgt")),
        )?;
    }
    let index = CheckpointIndex {
        step: store.step(),
        epoch,
        config: config.clone(),
        params: names,
    };
    let index_path = dir.join("index.json");
    fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    Ok(index_path)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, RunConfig, usize)> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("checkpoint index {}", index_path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    index.config.validate()?;
    let mut store = ParamStore::new();
    for name in &index.params {
        let value = tensorfile::read_tensor(&dir.join(format!("{name}.value.gcgt")))?;
        let m1 = tensorfile::read_tensor(&dir.join(format!("{name}.m.gcgt")))?;
        let m2 = tensorfile::read_tensor(&dir.join(format!("{name}.v.gcgt")))?;
        store.insert(name, value)?;
        store.set_moments(name, m1.data().to_vec(), m2.data().to_vec())?;
    }
    store.set_step(index.step);
    Ok((store, index.config, index.epoch))
}
