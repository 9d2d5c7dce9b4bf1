//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                             |
//! |--------|------|---------------------------------------------------|
//! | 0      | 4    | magic `FMCK`                                      |
//! | 4      | 4    | format version (u32, currently 1)                 |
//! | 8      | 8    | header length H (u64)                             |
//! | 16     | H    | header JSON (architecture, stage tag, step count, |
//! |        |      | RNG stream positions, optimizer hyperparameters)  |
//! | 16+H   | 8·P  | parameter values, f64 LE, canonical order         |
//! | …      | 8·P  | Adam first moments (only when header.adam is set) |
//! | …      | 8·P  | Adam second moments (ditto)                       |
//!
//! P is the total parameter count implied by the architecture; the
//! canonical tensor order is [`ModelConfig::param_shapes`]. The version
//! field is checked strictly: no migration shims.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::model::{JointFlowMapModel, ModelConfig};
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"FMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    hyper: AdamHyper,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    stage: String,
    step: u64,
    rng_states: Vec<RngState>,
    adam: Option<AdamMeta>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: JointFlowMapModel,
    pub stage: String,
    pub step: u64,
    pub rng_states: Vec<RngState>,
    pub adam: Option<AdamState>,
}

fn push_f64s(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(
    path: &Path,
    model: &JointFlowMapModel,
    stage: &str,
    step: u64,
    rng_states: &[RngState],
    adam: Option<&AdamState>,
) -> Result<()> {
    let header = Header {
        model: model.cfg.clone(),
        stage: stage.to_string(),
        step,
        rng_states: rng_states.to_vec(),
        adam: adam.map(|a| AdamMeta {
            hyper: a.hyper,
            step: a.step,
        }),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    push_f64s(&mut buf, model.params_flat().into_iter());
    if let Some(a) = adam {
        push_f64s(&mut buf, a.m.iter().flatten().copied());
        push_f64s(&mut buf, a.v.iter().flatten().copied());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_f64s(bytes: &[u8], offset: &mut usize, n: usize, what: &str) -> Result<Vec<f64>> {
    let end = *offset + 8 * n;
    if bytes.len() < end {
        return Err(Error::Checkpoint(format!(
            "truncated checkpoint while reading {what}: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let out = bytes[*offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *offset = end;
    Ok(out)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("{}: header decode: {e}", path.display())))?;

    let shapes = header.model.param_shapes();
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut offset = 16 + header_len;
    let flat = read_f64s(&bytes, &mut offset, total, "parameters")?;

    let mut model = JointFlowMapModel {
        cfg: header.model.clone(),
        params: shapes
            .iter()
            .map(|s| crate::autodiff::Tensor::zeros(s.clone()))
            .collect(),
    };
    model.set_params_flat(&flat);

    let adam = match header.adam {
        None => None,
        Some(meta) => {
            let m_flat = read_f64s(&bytes, &mut offset, total, "adam.m")?;
            let v_flat = read_f64s(&bytes, &mut offset, total, "adam.v")?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            let mut pos = 0;
            for s in &shapes {
                let n: usize = s.iter().product();
                m.push(m_flat[pos..pos + n].to_vec());
                v.push(v_flat[pos..pos + n].to_vec());
                pos += n;
            }
            Some(AdamState {
                m,
                v,
                step: meta.step,
                hyper: meta.hyper,
            })
        }
    };

    Ok(Checkpoint {
        model,
        stage: header.stage,
        step: header.step,
        rng_states: header.rng_states,
        adam,
    })
}

/// Load and verify the architecture matches `expected` exactly.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if &ckpt.model.cfg != expected {
        return Err(Error::Checkpoint(format!(
            "{}: architecture mismatch: checkpoint {:?} vs configured {:?}",
            path.display(),
            ckpt.model.cfg,
            expected
        )));
    }
    Ok(ckpt)
}
