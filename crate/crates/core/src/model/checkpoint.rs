//! Binary checkpoint format.
//!
//! ```text
//! offset  type        field
//! 0       [u8; 4]     magic "STGC"
//! 4       u32         format version (1)
//! 8       u32 x 7     input_dim, hidden_size, intermediate_size,
//!                     num_experts, top_k, num_layers, num_classes
//! 36      f64 x 3     tau, alpha, beta
//! 60      u8          cel_kind (0 = ce_like, 1 = mse_like)
//! 61      u8          cel_literal_sign (0/1)
//! 62      u8          has capacity factor (0/1)
//! 63      f64         capacity factor (0.0 when absent)
//! 71      u8          bpr (0/1)
//! 72      u64         number of parameter values that follow
//! 80      f64 x n     parameters, tensor order of `Params::names()`
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{CelKind, Model, ModelConfig, Params};
use crate::error::{Result, StgcError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"STGC";

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> std::io::Result<()> {
    let c = &model.config;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        c.input_dim,
        c.hidden_size,
        c.intermediate_size,
        c.num_experts,
        c.top_k,
        c.num_layers,
        c.num_classes,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in [c.tau, c.alpha, c.beta] {
        w.write_all(&v.to_le_bytes())?;
    }
    let kind = match c.cel_kind {
        CelKind::CeLike => 0u8,
        CelKind::MseLike => 1u8,
    };
    w.write_all(&[
        kind,
        c.cel_literal_sign as u8,
        c.capacity_factor.is_some() as u8,
    ])?;
    w.write_all(&c.capacity_factor.unwrap_or(0.0).to_le_bytes())?;
    w.write_all(&[c.bpr as u8])?;
    w.write_all(&(model.params.num_values() as u64).to_le_bytes())?;
    for t in model.params.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a checkpoint; `origin` only labels errors.
pub fn read_checkpoint<R: Read>(r: &mut R, origin: &Path) -> Result<Model> {
    let fmt = |reason: String| StgcError::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let io = |e: std::io::Error| fmt(format!("truncated or unreadable: {e}"));
    let magic: [u8; 4] = take(r).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt("missing STGC magic".into()));
    }
    let version = u32::from_le_bytes(take(r).map_err(io)?);
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let mut counts = [0usize; 7];
    for c in &mut counts {
        *c = u32::from_le_bytes(take(r).map_err(io)?) as usize;
    }
    let mut floats = [0f64; 3];
    for f in &mut floats {
        *f = f64::from_le_bytes(take(r).map_err(io)?);
    }
    let [kind, literal, has_cap] = take::<3>(r).map_err(io)?;
    let cap = f64::from_le_bytes(take(r).map_err(io)?);
    let [bpr] = take::<1>(r).map_err(io)?;
    let cel_kind = match kind {
        0 => CelKind::CeLike,
        1 => CelKind::MseLike,
        other => return Err(fmt(format!("bad cel_kind byte {other}"))),
    };
    let config = ModelConfig {
        input_dim: counts[0],
        hidden_size: counts[1],
        intermediate_size: counts[2],
        num_experts: counts[3],
        top_k: counts[4],
        num_layers: counts[5],
        num_classes: counts[6],
        tau: floats[0],
        alpha: floats[1],
        beta: floats[2],
        cel_kind,
        cel_literal_sign: literal != 0,
        capacity_factor: (has_cap != 0).then_some(cap),
        bpr: bpr != 0,
    };
    config.validate().map_err(|e| fmt(e.to_string()))?;
    let count = u64::from_le_bytes(take(r).map_err(io)?) as usize;
    let mut params = Params::zeros(&config);
    if count != params.num_values() {
        return Err(fmt(format!(
            "expected {} parameter values, header says {count}",
            params.num_values()
        )));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(take(r).map_err(io)?);
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(fmt(format!("{} trailing bytes", rest.len())));
    }
    Model::from_params(config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| StgcError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w).map_err(|e| StgcError::io(path, e))?;
    w.flush().map_err(|e| StgcError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| StgcError::io(path, e))?;
    read_checkpoint(&mut std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn model() -> Model {
        let cfg = ModelConfig {
            capacity_factor: Some(2.0),
            bpr: true,
            cel_kind: CelKind::MseLike,
            ..Default::default()
        };
        Model::new(cfg, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"STGC");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(buf.len(), 80 + 8 * m.params.num_values());
        let back = read_checkpoint(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_corruption() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice(), Path::new("m")).is_err());
        let short = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &short[..], Path::new("m")).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(&mut long.as_slice(), Path::new("m")).is_err());
        let mut ver = buf;
        ver[4] = 9;
        assert!(read_checkpoint(&mut ver.as_slice(), Path::new("m")).is_err());
    }
}
