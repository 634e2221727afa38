//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes  "IMGCKPT\0"
//! version   u32 LE
//! meta_len  u64 LE, then meta_len bytes of UTF-8 JSON metadata
//! count     u64 LE segment count
//! segment   name_len u32 LE, name bytes, matrix (rows u64, cols u64, f64 LE row-major)
//! ```
//!
//! Segments are `theta.*`, `ref.*`, `adam.m.*`, `adam.v.*` followed by the
//! aligner parameter name, in parameter order. The metadata carries the
//! configs, iteration, controller state, optimizer step and data cursor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, OptimizerState, TrainerConfig};
use crate::aligner::{AlignerConfig, AlignerParams};
use crate::error::{Error, Result};
use crate::nn::{read_u32, read_u64, Matrix, Parameters};
use crate::objective::RefUpdateState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IMGCKPT\0";
const GROUPS: [&str; 4] = ["theta", "ref", "adam.m", "adam.v"];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    trainer: TrainerConfig,
    aligner: AlignerConfig,
    iteration: u64,
    controller: RefUpdateState,
    optimizer_step: u64,
    /// Decimal string: JSON numbers cannot carry 128 bits portably.
    data_position: String,
    context: serde_json::Value,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Metadata {
        trainer: ckpt.trainer,
        aligner: ckpt.aligner,
        iteration: ckpt.iteration,
        controller: ckpt.controller,
        optimizer_step: ckpt.optimizer.step,
        data_position: ckpt.data_position.to_string(),
        context: ckpt.context.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let sets = [&ckpt.theta, &ckpt.reference, &ckpt.optimizer.m, &ckpt.optimizer.v];
    let count: usize = sets.iter().map(|p| p.named().len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (group, params) in GROUPS.iter().zip(sets) {
        for (name, m) in params.named() {
            let full = format!("{group}.{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            m.write_binary(&mut out);
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], offset: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = offset
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(*offset, format!("truncated {what}")))?;
    let s = &bytes[*offset..end];
    *offset = end;
    Ok(s)
}

/// Decodes a whole checkpoint; nothing is returned unless every byte parses.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut offset = 0;
    if take(bytes, &mut offset, 8, "magic")? != MAGIC {
        return Err(parse_err(0, "not a checkpoint file (bad magic)"));
    }
    let version = read_u32(bytes, &mut offset)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_at = offset;
    let meta_len = read_u64(bytes, &mut offset)?;
    let json = take(bytes, &mut offset, meta_len as usize, "metadata")?;
    let meta: Metadata =
        serde_json::from_slice(json).map_err(|e| parse_err(meta_at + 8, format!("bad metadata: {e}")))?;
    let data_position: u128 = meta
        .data_position
        .parse()
        .map_err(|_| parse_err(meta_at + 8, "bad data_position"))?;
    meta.trainer
        .validate()
        .and_then(|_| meta.aligner.validate())
        .map_err(|e| parse_err(meta_at + 8, e.to_string()))?;

    let template = AlignerParams::zeros(meta.aligner)?;
    let expected: Vec<(String, (usize, usize))> = GROUPS
        .iter()
        .flat_map(|g| {
            template
                .named()
                .into_iter()
                .map(move |(n, m)| (format!("{g}.{n}"), m.shape()))
        })
        .collect();
    let count_at = offset;
    let count = read_u64(bytes, &mut offset)?;
    if count != expected.len() as u64 {
        return Err(parse_err(
            count_at,
            format!("expected {} segments, found {count}", expected.len()),
        ));
    }
    let mut matrices = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let at = offset;
        let len = read_u32(bytes, &mut offset)? as usize;
        let found = take(bytes, &mut offset, len, "segment name")?;
        if found != name.as_bytes() {
            return Err(parse_err(
                at,
                format!("expected segment {name}, found {:?}", String::from_utf8_lossy(found)),
            ));
        }
        let m_at = offset;
        let m = Matrix::read_binary(bytes, &mut offset)?;
        if m.shape() != *shape {
            return Err(parse_err(
                m_at,
                format!("segment {name} has shape {:?}, expected {shape:?}", m.shape()),
            ));
        }
        matrices.push(m);
    }
    if offset != bytes.len() {
        return Err(parse_err(offset, "trailing bytes after last segment"));
    }

    let per_set = template.named().len();
    let mut sets = Vec::with_capacity(4);
    let mut it = matrices.into_iter();
    for _ in 0..4 {
        let mut p = template.clone();
        for (slot, m) in p.matrices_mut().into_iter().zip(it.by_ref().take(per_set)) {
            *slot = m;
        }
        sets.push(p);
    }
    let v = sets.pop().expect("four sets");
    let m = sets.pop().expect("four sets");
    let reference = sets.pop().expect("four sets");
    let theta = sets.pop().expect("four sets");
    Ok(Checkpoint {
        trainer: meta.trainer,
        aligner: meta.aligner,
        iteration: meta.iteration,
        theta,
        reference,
        optimizer: OptimizerState {
            m,
            v,
            step: meta.optimizer_step,
        },
        controller: meta.controller,
        data_position,
        context: meta.context,
    })
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}
