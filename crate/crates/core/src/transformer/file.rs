//! Versioned binary weight file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes      "ACTREVWF"
//! version    u32          currently 1
//! config     7 x u32      n_layers, n_heads, d_model, d_head, d_mlp,
//!                         vocab_size, max_seq_len
//! tensors    repeated     ndim: u32, dims: ndim x u32, data: f32 x prod(dims)
//! ```
//!
//! Tensor order is fixed: `token_emb [vocab, d_model]`, `pos_emb
//! [max_seq_len, d_model]`, then per layer `ln1_gain [d_model]`, `ln1_bias
//! [d_model]`, `wq [d_model, d_model]`, `wk`, `wv`, `wo`, `ln2_gain`,
//! `ln2_bias`, `w_in [d_mlp, d_model]`, `b_in [d_mlp]`, `w_out [d_model,
//! d_mlp]`, `b_out [d_model]`, and finally `unembed [vocab, d_model]`.
//! The reader rejects unknown versions, shape mismatches, non-finite
//! values, truncation, and trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

use super::{LayerWeights, Model, ModelConfig, TransformerWeights};

const MAGIC: &[u8; 8] = b"ACTREVWF";

/// Version this build writes and reads.
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

/// Serializes a model to `path`.
pub fn write_weights(path: &Path, model: &Model) -> Result<()> {
    model.weights.validate(&model.config)?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
    let cfg = &model.config;
    for v in [
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_model,
        cfg.d_head,
        cfg.d_mlp,
        cfg.vocab_size,
        cfg.max_seq_len,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let w = &model.weights;
    push_tensor(&mut buf, &[cfg.vocab_size, cfg.d_model], w.token_emb.data());
    push_tensor(&mut buf, &[cfg.max_seq_len, cfg.d_model], w.pos_emb.data());
    for lw in &w.layers {
        for (shape, data) in layer_tensor_shapes(cfg).iter().zip(lw.tensors()) {
            push_tensor(&mut buf, shape, data);
        }
    }
    push_tensor(&mut buf, &[cfg.vocab_size, cfg.d_model], w.unembed.data());
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Reads a model from `path`, validating structure and shapes.
pub fn read_weights(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(r.malformed("bad magic"));
    }
    let version = r.u32()?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "weight",
            found: version,
            supported: WEIGHT_FORMAT_VERSION,
        });
    }
    let config = ModelConfig {
        n_layers: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        d_model: r.u32()? as usize,
        d_head: r.u32()? as usize,
        d_mlp: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        max_seq_len: r.u32()? as usize,
    };
    config.validate()?;

    let token_emb = r.matrix(config.vocab_size, config.d_model)?;
    let pos_emb = r.matrix(config.max_seq_len, config.d_model)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            ln1_gain: r.vector(config.d_model)?,
            ln1_bias: r.vector(config.d_model)?,
            wq: r.matrix(config.d_model, config.d_model)?,
            wk: r.matrix(config.d_model, config.d_model)?,
            wv: r.matrix(config.d_model, config.d_model)?,
            wo: r.matrix(config.d_model, config.d_model)?,
            ln2_gain: r.vector(config.d_model)?,
            ln2_bias: r.vector(config.d_model)?,
            w_in: r.matrix(config.d_mlp, config.d_model)?,
            b_in: r.vector(config.d_mlp)?,
            w_out: r.matrix(config.d_model, config.d_mlp)?,
            b_out: r.vector(config.d_model)?,
        });
    }
    let unembed = r.matrix(config.vocab_size, config.d_model)?;
    if r.at != bytes.len() {
        return Err(r.malformed("trailing bytes after final tensor"));
    }
    Model::new(config, TransformerWeights {
        token_emb,
        pos_emb,
        layers,
        unembed,
    })
}

fn layer_tensor_shapes(cfg: &ModelConfig) -> [Vec<usize>; 12] {
    let d = cfg.d_model;
    [
        vec![d],
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![cfg.d_mlp, d],
        vec![cfg.d_mlp],
        vec![d, cfg.d_mlp],
        vec![d],
    ]
}

fn push_tensor(buf: &mut Vec<u8>, shape: &[usize], data: &[f32]) {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &dim in shape {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: &str) -> Error {
        Error::MalformedFile {
            kind: "weight",
            path: Some(self.path.to_path_buf()),
            reason: format!("{reason} (offset {})", self.at),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.malformed("truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor_data(&mut self, shape: &[usize]) -> Result<Vec<f32>> {
        let ndim = self.u32()? as usize;
        if ndim != shape.len() {
            return Err(self.malformed(&format!(
                "tensor rank {ndim} where rank {} expected",
                shape.len()
            )));
        }
        for &want in shape {
            let got = self.u32()? as usize;
            if got != want {
                return Err(self.malformed(&format!("tensor dim {got} where {want} expected")));
            }
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count * 4)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Ok(data)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let data = self.tensor_data(&[rows, cols])?;
        Matrix::from_vec(rows, cols, data)
    }

    fn vector(&mut self, len: usize) -> Result<Vec<f32>> {
        let data = self.tensor_data(&[len])?;
        if data.iter().all(|x| x.is_finite()) {
            Ok(data)
        } else {
            Err(self.malformed("non-finite tensor value"))
        }
    }
}
