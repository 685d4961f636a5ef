//! `AYSW` checkpoint format: magic, version u32, head kind u8, input/hidden/output
//! dims as u32, then every parameter as a little-endian f64 in layout order.

use std::io::{Read, Write};
use std::path::Path;

use super::{HeadKind, MlpSpec, MlpWeights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AYSW";
const VERSION: u32 = 1;

pub fn write_weights<W: Write>(weights: &MlpWeights, out: &mut W) -> std::io::Result<()> {
    let spec = weights.spec();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[spec.head.code()])?;
    for d in [spec.input_dim, spec.hidden_dim, spec.output_dim] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for p in weights.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_weights(weights: &MlpWeights, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + 8 * weights.params().len());
    write_weights(weights, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Decodes one weight set from `bytes`, returning it and the bytes consumed.
pub fn read_weights(bytes: &[u8], path: &Path) -> Result<(MlpWeights, usize)> {
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(malformed(format!(
                "truncated: needed {n} more bytes, {} left",
                cursor.len()
            )));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(malformed("bad magic, expected AYSW".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(malformed(format!("unsupported format version {version}")));
    }
    let code = take(1)?[0];
    let head = HeadKind::from_code(code).ok_or_else(|| malformed(format!("head code {code}")))?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let spec = MlpSpec {
        input_dim: dims[0],
        hidden_dim: dims[1],
        output_dim: dims[2],
        head,
    };
    spec.validate().map_err(|e| malformed(format!("invalid dims: {e}")))?;
    let n = spec.param_count();
    let raw = take(n * 8)?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(malformed(format!("parameter {i} is not finite")));
    }
    let consumed = bytes.len() - cursor.len();
    Ok((MlpWeights::from_params(spec, params)?, consumed))
}

pub fn load_weights(path: &Path) -> Result<MlpWeights> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (weights, used) = read_weights(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(weights)
}

/// Loads and checks the file describes exactly `spec`.
pub fn load_weights_expecting(path: &Path, spec: &MlpSpec) -> Result<MlpWeights> {
    let weights = load_weights(path)?;
    if weights.spec() != spec {
        return Err(Error::SpecMismatch(format!(
            "{} holds {:?}, expected {:?}",
            path.display(),
            weights.spec(),
            spec
        )));
    }
    Ok(weights)
}
