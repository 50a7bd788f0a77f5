//! Parameter snapshot files.
//!
//! JSON with `{version, layer_sizes, activations, values}` where each value
//! is the hex-encoded IEEE-754 bit pattern of the f64, so round trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, DenseNet, Layout, ParamVec};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    version: u32,
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    values: Vec<String>,
}

/// Serialize a parameter vector to the snapshot JSON string.
pub fn to_json(params: &ParamVec) -> Result<String> {
    let file = SnapshotFile {
        version: SNAPSHOT_VERSION,
        layer_sizes: params.layout().layer_sizes().to_vec(),
        activations: params.layout().activations().to_vec(),
        values: params
            .values()
            .iter()
            .map(|v| format!("{:016x}", v.to_bits()))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parse a snapshot JSON string back into a parameter vector.
pub fn from_json(text: &str) -> Result<ParamVec> {
    let file: SnapshotFile = serde_json::from_str(text)?;
    if file.version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!(
            "unsupported snapshot version {}",
            file.version
        )));
    }
    let layout = Layout::with_activations(file.layer_sizes, file.activations)?;
    let values: Result<Vec<f64>> = file
        .values
        .iter()
        .map(|hex| {
            u64::from_str_radix(hex, 16)
                .map(f64::from_bits)
                .map_err(|e| Error::Snapshot(format!("bad value `{hex}`: {e}")))
        })
        .collect();
    ParamVec::from_values(layout, values?)
}

pub fn save(params: &ParamVec, path: &Path) -> Result<()> {
    fs::write(path, to_json(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamVec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text).map_err(|e| match e {
        Error::Snapshot(msg) => Error::Snapshot(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_net(net: &DenseNet, path: &Path) -> Result<()> {
    save(net.params(), path)
}

pub fn load_net(path: &Path) -> Result<DenseNet> {
    Ok(DenseNet::new(load(path)?))
}
