use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::numerics::Matrix;

use super::params::check_params;
use super::{LayerParams, NetworkParams, NetworkSpec, NnError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KDDL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of the spec's canonical JSON; stored in every checkpoint so a
/// file can refuse to load into the wrong architecture.
pub fn spec_digest(spec: &NetworkSpec) -> [u8; 32] {
    let json = serde_json::to_string(spec).expect("specs always serialize");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.finalize().into()
}

/// Writes parameters in the binary checkpoint format: magic, version,
/// spec digest, step, then per layer the little-endian f64 weight and bias
/// arrays with length prefixes.
pub fn save_checkpoint(
    path: &Path,
    spec: &NetworkSpec,
    step: u64,
    params: &NetworkParams,
) -> Result<(), NnError> {
    check_params(spec, params)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&spec_digest(spec))?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for lp in &params.layers {
        w.write_all(&(lp.weights.rows() as u64).to_le_bytes())?;
        w.write_all(&(lp.weights.cols() as u64).to_le_bytes())?;
        for &v in lp.weights.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(lp.bias.len() as u64).to_le_bytes())?;
        for &v in &lp.bias {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[lp.frozen as u8])?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, NnError> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Loads a checkpoint written by `save_checkpoint`, verifying it belongs
/// to `spec`. Returns the step and the parameters.
pub fn load_checkpoint(path: &Path, spec: &NetworkSpec) -> Result<(u64, NetworkParams), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadCheckpoint(format!(
            "{} does not start with the checkpoint magic",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::BadCheckpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != spec_digest(spec) {
        return Err(NnError::BadCheckpoint(format!(
            "{} was written for a different architecture",
            path.display()
        )));
    }
    let step = read_u64(&mut r)?;
    let n_layers = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let data = read_f64s(&mut r, rows * cols)?;
        let weights = Matrix::new(rows, cols, data)
            .map_err(|e| NnError::BadCheckpoint(format!("corrupt weights: {e}")))?;
        let bias_len = read_u64(&mut r)? as usize;
        let bias = read_f64s(&mut r, bias_len)?;
        let mut fr = [0u8; 1];
        r.read_exact(&mut fr)?;
        layers.push(LayerParams { weights, bias, frozen: fr[0] != 0 });
    }
    let params = NetworkParams { layers };
    check_params(spec, &params)
        .map_err(|e| NnError::BadCheckpoint(format!("layer shapes do not fit the spec: {e}")))?;
    Ok((step, params))
}

#[derive(Serialize)]
struct JsonLayer<'a> {
    rows: usize,
    cols: usize,
    weights: &'a [f64],
    bias: &'a [f64],
    frozen: bool,
}

#[derive(Serialize)]
struct JsonCheckpoint<'a> {
    format: &'static str,
    version: u32,
    spec_digest: String,
    step: u64,
    layers: Vec<JsonLayer<'a>>,
}

/// Writes the same checkpoint as human-readable JSON for interop.
pub fn save_checkpoint_json(
    path: &Path,
    spec: &NetworkSpec,
    step: u64,
    params: &NetworkParams,
) -> Result<(), NnError> {
    check_params(spec, params)?;
    let doc = JsonCheckpoint {
        format: "checkpoint",
        version: CHECKPOINT_VERSION,
        spec_digest: hex::encode(spec_digest(spec)),
        step,
        layers: params
            .layers
            .iter()
            .map(|lp| JsonLayer {
                rows: lp.weights.rows(),
                cols: lp.weights.cols(),
                weights: lp.weights.data(),
                bias: &lp.bias,
                frozen: lp.frozen,
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)
        .map_err(|e| NnError::BadCheckpoint(format!("json encode failed: {e}")))?;
    w.flush()?;
    Ok(())
}

/// Loads every `*.kddl` checkpoint in a directory, sorted by step.
pub fn load_checkpoint_dir(
    dir: &Path,
    spec: &NetworkSpec,
) -> Result<Vec<super::Checkpoint>, NnError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("kddl") {
            let (step, params) = load_checkpoint(&path, spec)?;
            out.push(super::Checkpoint { step, params });
        }
    }
    out.sort_by_key(|c| c.step);
    Ok(out)
}
