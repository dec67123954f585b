//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "MDILCKPT"
//! version  u32      1
//! n        u32      number of layer sizes
//! sizes    n × u64  [input, hidden.., output]
//! params   f64...   per layer: weights (row-major, out × in), then biases
//! ```

use std::path::Path;

use super::{Classifier, LayerParams};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

const MAGIC: &[u8; 8] = b"MDILCKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Classifier) -> Vec<u8> {
    let sizes = model.layer_sizes();
    let mut out = Vec::with_capacity(16 + 8 * sizes.len() + 8 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in &sizes {
        out.extend_from_slice(&(*s as u64).to_le_bytes());
    }
    for v in model.params().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format {
                path: "<checkpoint>".into(),
                line: 0,
                message: format!("truncated at byte {}", self.pos),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn bad(message: String) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        line: 0,
        message,
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Classifier> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    if n < 2 {
        return Err(bad(format!("{n} layer sizes; need at least 2")));
    }
    let sizes = (0..n)
        .map(|_| r.u64().map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = (0..fan_in * fan_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let biases = (0..fan_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(LayerParams {
            weights: DenseMatrix::new(fan_out, fan_in, weights)?,
            biases,
        });
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Classifier::from_layers(layers)
}

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message,
        },
        other => other,
    })
}
