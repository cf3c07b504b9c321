//! Weight tensors and their layout conventions.

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintBuilder;
use crate::numkernel::{Matrix, Rng};

use super::ModelConfig;

/// One transformer block's parameters.
///
/// All projection matrices are stored `[out_features x in_features]` and
/// applied as `y = x @ W.T`. The attention projections `wq`, `wk`, `wv` are
/// `[d_model x d_model]` with head-major output rows: head `h` owns rows
/// `h*d_head .. (h+1)*d_head`. `wo` consumes the head-major concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    /// `[d_mlp x d_model]`.
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    /// `[d_model x d_mlp]`.
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
}

/// Full parameter set of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    /// `[vocab_size x d_model]`.
    pub token_emb: Matrix,
    /// `[max_seq_len x d_model]` learned absolute positions.
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `[vocab_size x d_model]`, untied from `token_emb`.
    pub unembed: Matrix,
}

impl TransformerWeights {
    /// N(0, init_std) projections and embeddings, identity layer norms,
    /// zero biases.
    pub fn random(config: &ModelConfig, init_std: f32, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let mut normal = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| rng.normal(0.0, init_std))
        };
        let token_emb = normal(config.vocab_size, d);
        let pos_emb = normal(config.max_seq_len, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: normal(d, d),
                wk: normal(d, d),
                wv: normal(d, d),
                wo: normal(d, d),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w_in: normal(config.d_mlp, d),
                b_in: vec![0.0; config.d_mlp],
                w_out: normal(d, config.d_mlp),
                b_out: vec![0.0; d],
            });
        }
        let unembed = normal(config.vocab_size, d);
        TransformerWeights {
            token_emb,
            pos_emb,
            layers,
            unembed,
        }
    }

    /// Checks every tensor against the config's shapes.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::LengthMismatch {
                    context: format!("weights.{name} (expected {rows}x{cols})"),
                    expected: rows * cols,
                    got: m.rows() * m.cols(),
                });
            }
            m.check_finite(name)
        };
        let check_vec = |name: &str, v: &[f32], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::LengthMismatch {
                    context: format!("weights.{name}"),
                    expected: len,
                    got: v.len(),
                });
            }
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFinite {
                    context: format!("weights.{name}"),
                })
            }
        };
        check("token_emb", &self.token_emb, config.vocab_size, d)?;
        check("pos_emb", &self.pos_emb, config.max_seq_len, d)?;
        if self.layers.len() != config.n_layers {
            return Err(Error::LengthMismatch {
                context: "weights.layers".into(),
                expected: config.n_layers,
                got: self.layers.len(),
            });
        }
        for (l, lw) in self.layers.iter().enumerate() {
            check_vec(&format!("layers[{l}].ln1_gain"), &lw.ln1_gain, d)?;
            check_vec(&format!("layers[{l}].ln1_bias"), &lw.ln1_bias, d)?;
            check(&format!("layers[{l}].wq"), &lw.wq, d, d)?;
            check(&format!("layers[{l}].wk"), &lw.wk, d, d)?;
            check(&format!("layers[{l}].wv"), &lw.wv, d, d)?;
            check(&format!("layers[{l}].wo"), &lw.wo, d, d)?;
            check_vec(&format!("layers[{l}].ln2_gain"), &lw.ln2_gain, d)?;
            check_vec(&format!("layers[{l}].ln2_bias"), &lw.ln2_bias, d)?;
            check(&format!("layers[{l}].w_in"), &lw.w_in, config.d_mlp, d)?;
            check_vec(&format!("layers[{l}].b_in"), &lw.b_in, config.d_mlp)?;
            check(&format!("layers[{l}].w_out"), &lw.w_out, d, config.d_mlp)?;
            check_vec(&format!("layers[{l}].b_out"), &lw.b_out, d)?;
        }
        check("unembed", &self.unembed, config.vocab_size, d)?;
        Ok(())
    }

    /// Content fingerprint over the config and every tensor, independent of
    /// any file representation.
    pub fn fingerprint(&self, config: &ModelConfig) -> String {
        let mut fp = FingerprintBuilder::new("model-weights");
        for v in [
            config.n_layers,
            config.n_heads,
            config.d_model,
            config.d_head,
            config.d_mlp,
            config.vocab_size,
            config.max_seq_len,
        ] {
            fp.u64(v as u64);
        }
        fp.f32s(self.token_emb.data());
        fp.f32s(self.pos_emb.data());
        for lw in &self.layers {
            for tensor in lw.tensors() {
                fp.f32s(tensor);
            }
        }
        fp.f32s(self.unembed.data());
        fp.finish()
    }
}

impl LayerWeights {
    /// Tensor buffers in the fixed serialization order.
    pub(crate) fn tensors(&self) -> [&[f32]; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            self.wq.data(),
            self.wk.data(),
            self.wv.data(),
            self.wo.data(),
            &self.ln2_gain,
            &self.ln2_bias,
            self.w_in.data(),
            &self.b_in,
            self.w_out.data(),
            &self.b_out,
        ]
    }

    /// Mutable tensor buffers in the same order as [`LayerWeights::tensors`].
    pub(crate) fn tensors_mut(&mut self) -> [&mut [f32]; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            self.wq.data_mut(),
            self.wk.data_mut(),
            self.wv.data_mut(),
            self.wo.data_mut(),
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            self.w_in.data_mut(),
            &mut self.b_in,
            self.w_out.data_mut(),
            &mut self.b_out,
        ]
    }
}

impl TransformerWeights {
    /// All-zero tensors with the config's shapes; gradient buffers.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: vec![0.0; d],
                ln1_bias: vec![0.0; d],
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                ln2_gain: vec![0.0; d],
                ln2_bias: vec![0.0; d],
                w_in: Matrix::zeros(config.d_mlp, d),
                b_in: vec![0.0; config.d_mlp],
                w_out: Matrix::zeros(d, config.d_mlp),
                b_out: vec![0.0; d],
            })
            .collect();
        TransformerWeights {
            token_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            layers,
            unembed: Matrix::zeros(config.vocab_size, d),
        }
    }

    /// Mutable views of every parameter tensor in the fixed serialization
    /// order: token embedding, position embedding, each layer's twelve
    /// tensors, unembedding. Gradient and optimizer-state buffers built
    /// from the same config line up index-for-index.
    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> =
            vec![self.token_emb.data_mut(), self.pos_emb.data_mut()];
        for lw in self.layers.iter_mut() {
            out.extend(lw.tensors_mut());
        }
        out.push(self.unembed.data_mut());
        out
    }

    /// Immutable counterpart of [`TransformerWeights::flat_tensors_mut`].
    pub fn flat_tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.token_emb.data(), self.pos_emb.data()];
        for lw in &self.layers {
            out.extend(lw.tensors());
        }
        out.push(self.unembed.data());
        out
    }
}
