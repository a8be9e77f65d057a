//! Tensor-archive encoding of a [`ModelGraph`].
//!
//! Little-endian, no padding:
//!
//! ```text
//! "LODT" | u32 version | u32 layer_count
//! per layer:
//!   u32 id_len | id (UTF-8) | u8 component | u8 activation
//!   u32 rows | u32 cols | u8 has_bias
//!   rows*cols f64 weights (row-major) | [rows f64 bias]
//! ```
//!
//! The input width is not stored; it is the first layer's column count.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Activation, ComponentTag, Layer, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::WeightMatrix;

pub const MODEL_MAGIC: &[u8; 4] = b"LODT";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model(g: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(g.layers.len() as u32).to_le_bytes());
    for layer in &g.layers {
        let id = layer.id().as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.push(layer.component.code());
        out.push(layer.activation.code());
        out.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
        out.push(u8::from(layer.bias.is_some()));
        for v in layer.weight.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(b) = &layer.bias {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.pos, format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, expected LODT"));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    let mut width = None;
    for _ in 0..count {
        let start = r.pos;
        let id_len = r.u32("id length")? as usize;
        let id_pos = r.pos;
        let id = std::str::from_utf8(r.take(id_len, "layer id")?)
            .map_err(|_| Error::format(id_pos, "layer id is not UTF-8"))?
            .to_owned();
        let tag_pos = r.pos;
        let component = ComponentTag::from_code(r.u8("component tag")?)
            .ok_or_else(|| Error::format(tag_pos, "unknown component tag"))?;
        let activation = Activation::from_code(r.u8("activation code")?)
            .ok_or_else(|| Error::format(tag_pos + 1, "unknown activation code"))?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let bias_pos = r.pos;
        let has_bias = match r.u8("bias flag")? {
            0 => false,
            1 => true,
            _ => return Err(Error::format(bias_pos, "bias flag must be 0 or 1")),
        };
        if let Some(w) = width {
            if cols != w {
                return Err(Error::format(
                    start,
                    format!("structural: layer `{id}` has {cols} input columns, previous layer emits {w}"),
                ));
            }
        }
        let values_pos = r.pos;
        let values = r.f64s(rows.saturating_mul(cols), "weights")?;
        let bias = if has_bias { Some(r.f64s(rows, "bias")?) } else { None };
        let weight = WeightMatrix::new(id, rows, cols, values).map_err(|e| Error::format(values_pos, e.to_string()))?;
        layers.push(Layer::new(component, weight, bias, activation).map_err(|e| Error::format(start, e.to_string()))?);
        width = Some(rows);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after last layer"));
    }
    let input_dim = layers.first().map_or(0, |l| l.weight.cols());
    ModelGraph::new(input_dim, layers).map_err(|e| Error::format(12, e.to_string()))
}

/// One line per layer: `id TAB tag TAB rows TAB cols`.
pub fn manifest(g: &ModelGraph) -> String {
    g.layers
        .iter()
        .map(|l| format!("{}\t{}\t{}\t{}\n", l.id(), l.component, l.weight.rows(), l.weight.cols()))
        .collect()
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the archive and a `<path>.manifest` sidecar.
pub fn save_model(g: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(g))?;
    fs::write(manifest_path(path), manifest(g))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    decode_model(&fs::read(path)?)
}
