//! Binary sidecars for directions (`RSDR`) and ideal trajectories (`RIDT`).
//!
//! ```text
//! magic [4] | version u32 | meta_len u32 | meta JSON | f32 arrays | crc32 u32
//! ```
//!
//! Arrays are little-endian f32 in row-major order; their shapes come from
//! the metadata. The checksum covers every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::direction::{Aggregation, SteeringDirection};
use super::ideal::IdealTrajectory;
use crate::error::{Error, Result};
use crate::stats::PcaBasis;
use crate::trace::format::{put_json, Reader};

pub const DIRECTION_MAGIC: [u8; 4] = *b"RSDR";
pub const IDEAL_MAGIC: [u8; 4] = *b"RIDT";
pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DirectionMeta {
    n_layers: usize,
    dim: usize,
    corpus_id: String,
    n_prompts: usize,
    aggregation: Aggregation,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IdealMeta {
    dim: usize,
    rank: usize,
    n_steps: usize,
    layer: usize,
    r_steer: usize,
    explained_variance: Vec<f64>,
    degenerate: bool,
    sigmas: Vec<f64>,
    counts: Vec<usize>,
    local_thresholds: Vec<Option<f64>>,
    cumulative_thresholds: Vec<Option<f64>>,
    truncated_at: Option<u32>,
}

fn put_f32s<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("sidecar array".into()));
        }
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(())
}

fn frame(
    magic: [u8; 4],
    meta: &[u8],
    body: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    put_json(&mut out, meta)?;
    body(&mut out)?;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Checks magic, version and checksum; returns the metadata bytes and a
/// reader positioned at the arrays.
fn unframe(bytes: &[u8], magic: [u8; 4]) -> Result<(&[u8], Reader<'_>, usize)> {
    let mut r = Reader::new(bytes);
    let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            found,
            expected: magic,
        });
    }
    let version = r.u32()?;
    if version != SIDECAR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta = r.len_prefixed()?;
    if r.remaining() < 4 {
        return Err(Error::Truncated {
            offset: r.position(),
            needed: 4,
            available: r.remaining(),
        });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok((meta, r, body_end))
}

fn get_f32s(r: &mut Reader<'_>, n: usize) -> Result<Vec<f64>> {
    let needed = n.checked_mul(4).ok_or_else(|| Error::Truncated {
        offset: r.position(),
        needed: usize::MAX,
        available: r.remaining(),
    })?;
    let raw = r.take(needed)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

fn finish(r: &Reader<'_>, body_end: usize) -> Result<()> {
    if r.position() != body_end {
        return Err(Error::Malformed {
            what: "sidecar",
            offset: r.position(),
            detail: format!(
                "{} unexpected trailing bytes",
                body_end.saturating_sub(r.position())
            ),
        });
    }
    Ok(())
}

fn bad_meta(e: serde_json::Error) -> Error {
    Error::InvalidMeta(format!("sidecar metadata: {e}"))
}

pub fn encode_direction(dir: &SteeringDirection) -> Result<Vec<u8>> {
    let meta = DirectionMeta {
        n_layers: dir.n_layers(),
        dim: dir.dim(),
        corpus_id: dir.corpus_id.clone(),
        n_prompts: dir.n_prompts,
        aggregation: dir.aggregation,
        norms: dir.norms.clone(),
    };
    frame(DIRECTION_MAGIC, &serde_json::to_vec(&meta)?, |out| {
        put_f32s(out, dir.vectors.iter())
    })
}

pub fn decode_direction(bytes: &[u8]) -> Result<SteeringDirection> {
    let (meta, mut r, end) = unframe(bytes, DIRECTION_MAGIC)?;
    let meta: DirectionMeta = serde_json::from_slice(meta).map_err(bad_meta)?;
    if meta.norms.len() != meta.n_layers {
        return Err(Error::InvalidMeta(
            "direction norms do not match n_layers".into(),
        ));
    }
    let v = get_f32s(&mut r, meta.n_layers.saturating_mul(meta.dim))?;
    finish(&r, end)?;
    let vectors = Array2::from_shape_vec((meta.n_layers, meta.dim), v)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let mut dir =
        SteeringDirection::from_vectors(vectors, meta.corpus_id, meta.n_prompts, meta.aggregation)?;
    dir.norms = meta.norms;
    Ok(dir)
}

pub fn encode_ideal(ideal: &IdealTrajectory) -> Result<Vec<u8>> {
    let b = &ideal.basis;
    let meta = IdealMeta {
        dim: b.dim(),
        rank: b.r,
        n_steps: ideal.n_steps(),
        layer: ideal.layer,
        r_steer: ideal.r_steer,
        explained_variance: b.explained_variance.clone(),
        degenerate: b.degenerate,
        sigmas: ideal.sigmas.clone(),
        counts: ideal.counts.clone(),
        local_thresholds: ideal.local_thresholds.clone(),
        cumulative_thresholds: ideal.cumulative_thresholds.clone(),
        truncated_at: ideal.truncated_at,
    };
    frame(IDEAL_MAGIC, &serde_json::to_vec(&meta)?, |out| {
        put_f32s(out, b.mean.iter())?;
        put_f32s(out, b.components.iter())?;
        put_f32s(out, ideal.means.iter())
    })
}

pub fn decode_ideal(bytes: &[u8]) -> Result<IdealTrajectory> {
    let (meta, mut r, end) = unframe(bytes, IDEAL_MAGIC)?;
    let m: IdealMeta = serde_json::from_slice(meta).map_err(bad_meta)?;
    let j = m.n_steps;
    if j == 0
        || m.sigmas.len() != j
        || m.counts.len() != j
        || m.local_thresholds.len() != j
        || m.cumulative_thresholds.len() != j
        || m.explained_variance.len() != m.rank
        || m.r_steer == 0
        || m.r_steer > m.rank
    {
        return Err(Error::InvalidMeta(
            "ideal trajectory metadata is inconsistent".into(),
        ));
    }
    let mean = get_f32s(&mut r, m.dim)?;
    let comps = get_f32s(&mut r, m.rank.saturating_mul(m.dim))?;
    let means = get_f32s(&mut r, j.saturating_mul(m.rank))?;
    finish(&r, end)?;
    let shape = |e: ndarray::ShapeError| Error::DimensionMismatch(e.to_string());
    Ok(IdealTrajectory {
        basis: PcaBasis {
            mean: Array1::from(mean),
            components: Array2::from_shape_vec((m.rank, m.dim), comps).map_err(shape)?,
            explained_variance: m.explained_variance,
            r: m.rank,
            degenerate: m.degenerate,
        },
        layer: m.layer,
        means: Array2::from_shape_vec((j, m.rank), means).map_err(shape)?,
        sigmas: m.sigmas,
        counts: m.counts,
        local_thresholds: m.local_thresholds,
        cumulative_thresholds: m.cumulative_thresholds,
        r_steer: m.r_steer,
        truncated_at: m.truncated_at,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn write_direction(dir: &SteeringDirection, path: &Path) -> Result<()> {
    write_bytes(path, &encode_direction(dir)?)
}

pub fn read_direction(path: &Path) -> Result<SteeringDirection> {
    decode_direction(&fs::read(path)?)
}

pub fn write_ideal(ideal: &IdealTrajectory, path: &Path) -> Result<()> {
    write_bytes(path, &encode_ideal(ideal)?)
}

pub fn read_ideal(path: &Path) -> Result<IdealTrajectory> {
    decode_ideal(&fs::read(path)?)
}
