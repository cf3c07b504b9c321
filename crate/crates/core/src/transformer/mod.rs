//! Minimal decoder-only transformer with hookable intervention sites.
//!
//! The model is a pre-norm GPT-style stack: learned token and absolute
//! position embeddings, per-layer multi-head causal self-attention and a
//! GELU MLP, each behind a residual connection, and an untied unembedding.
//! Writing layer `l`'s input as `x_l`, one block computes
//!
//! ```text
//! x'_l    = x_l  + Wo . concat_h Att_l^h(LN1(x_l))      (attention residual)
//! x_{l+1} = x'_l + MLP(LN2(x'_l))                       (MLP residual)
//! ```
//!
//! Two families of [`HookSite`] expose the stream to capture and revision:
//!
//! * [`HookSite::LayerResidual`]: `x_{l+1}`, the post-MLP residual, width
//!   `d_model`. A layer-level steering plan adds `alpha * r` here.
//! * [`HookSite::HeadOutput`]: one head's attention output `Att_l^h`, width
//!   `d_head`, read before the `Wo` projection. A head-level plan adds
//!   `alpha * theta_h * r_h` to each gated head at the same point.
//!
//! Captures always happen *before* the injection at the same site, so a
//! captured vector never reflects the plan that was active while capturing.

mod file;
mod weights;

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numkernel::{dot, layer_norm_into, softmax, Matrix};
use crate::revision::{PlanKind, SteeringPlan};

pub use file::{read_weights, write_weights, WEIGHT_FORMAT_VERSION};
pub use weights::{LayerWeights, TransformerWeights};

/// Epsilon inside every layer norm's variance square root.
pub const LN_EPS: f32 = 1e-5;

/// Model geometry. `d_model` must equal `n_heads * d_head`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    /// Geometry of the pinned toy experiment.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size: 67,
            max_seq_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 7] = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig {
                    field: format!("model.{name}"),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig {
                field: "model.d_model".into(),
                reason: format!(
                    "d_model {} must equal n_heads {} * d_head {}",
                    self.d_model, self.n_heads, self.d_head
                ),
            });
        }
        Ok(())
    }

    /// One-line geometry summary used in width-mismatch errors.
    pub fn describe(&self) -> String {
        format!(
            "L={} H={} d_model={} d_head={} d_mlp={} vocab={} max_seq={}",
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.max_seq_len
        )
    }
}

/// A point in the forward pass where activations can be read or revised.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    serde::Serialize,
    serde::Deserialize,
)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HookSite {
    /// Post-MLP residual `x_{l+1}` of layer `layer`; width `d_model`.
    LayerResidual { layer: usize },
    /// Attention output of head `head` at layer `layer`, before the `Wo`
    /// projection; width `d_head`.
    HeadOutput { layer: usize, head: usize },
}

impl HookSite {
    pub fn layer(&self) -> usize {
        match *self {
            HookSite::LayerResidual { layer } => layer,
            HookSite::HeadOutput { layer, .. } => layer,
        }
    }

    /// Vector width captured at this site.
    pub fn width(&self, config: &ModelConfig) -> usize {
        match self {
            HookSite::LayerResidual { .. } => config.d_model,
            HookSite::HeadOutput { .. } => config.d_head,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = match *self {
            HookSite::LayerResidual { layer } => layer < config.n_layers,
            HookSite::HeadOutput { layer, head } => {
                layer < config.n_layers && head < config.n_heads
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnknownSite {
                site: self.to_string(),
                n_layers: config.n_layers,
                n_heads: config.n_heads,
            })
        }
    }

    /// Every site of a model: layer residuals then head outputs, in layer
    /// and head order.
    pub fn all(config: &ModelConfig) -> Vec<HookSite> {
        let mut sites = Vec::with_capacity(config.n_layers * (config.n_heads + 1));
        for layer in 0..config.n_layers {
            sites.push(HookSite::LayerResidual { layer });
        }
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                sites.push(HookSite::HeadOutput { layer, head });
            }
        }
        sites
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            HookSite::LayerResidual { layer } => write!(f, "residual(layer={layer})"),
            HookSite::HeadOutput { layer, head } => {
                write!(f, "head(layer={layer}, head={head})")
            }
        }
    }
}

/// What a forward pass should record.
#[derive(Debug, Clone, Default)]
pub struct CaptureSpec {
    /// Sites to capture, at every token position, before modification.
    pub sites: Vec<HookSite>,
    /// Also snapshot the full residual stream *after* any plan injection:
    /// per layer, the post-attention residual `x'_l` and the post-MLP
    /// residual `x_{l+1}`. Instrumentation for verifying injection algebra.
    pub post_modify: bool,
}

impl CaptureSpec {
    /// Capture nothing (generation hot path).
    pub fn none() -> Self {
        CaptureSpec::default()
    }

    pub fn sites(sites: Vec<HookSite>) -> Self {
        CaptureSpec {
            sites,
            post_modify: false,
        }
    }

    pub fn all_sites(config: &ModelConfig) -> Self {
        CaptureSpec::sites(HookSite::all(config))
    }

    pub fn with_post_modify(mut self) -> Self {
        self.post_modify = true;
        self
    }
}

/// Post-injection residual snapshots, indexed by layer.
#[derive(Debug, Clone)]
pub struct StreamSnapshots {
    /// `x'_l` after any head injection at layer `l`; `[T x d_model]`.
    pub post_attention: Vec<Matrix>,
    /// `x_{l+1}` after any layer injection at layer `l`; `[T x d_model]`.
    pub post_layer: Vec<Matrix>,
}

/// Everything a forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[T x vocab_size]` next-token logits.
    pub logits: Matrix,
    captured: BTreeMap<HookSite, Matrix>,
    /// Present when [`CaptureSpec::post_modify`] was set.
    pub snapshots: Option<StreamSnapshots>,
}

impl ForwardTrace {
    /// Captured vectors at `site`, one row per token position.
    pub fn captured(&self, site: HookSite) -> Option<&Matrix> {
        self.captured.get(&site)
    }

    /// The captured vector at the final token position of `site`.
    pub fn last_token_activation(&self, site: HookSite) -> Result<&[f32]> {
        let m = self.captured.get(&site).ok_or_else(|| Error::Unsatisfiable {
            context: "last_token_activation".into(),
            reason: format!("site {site} was not captured in this trace"),
        })?;
        Ok(m.row(m.rows() - 1))
    }

    /// Logits at the final token position.
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }

    pub fn captured_sites(&self) -> impl Iterator<Item = HookSite> + '_ {
        self.captured.keys().copied()
    }
}

/// GELU activation, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// A config plus its weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: TransformerWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Model { config, weights })
    }

    /// Fresh model with N(0, init_std) weights, unit layer-norm gains, and
    /// zero biases.
    pub fn random(config: ModelConfig, init_std: f32, rng: &mut crate::numkernel::Rng) -> Result<Self> {
        config.validate()?;
        let weights = TransformerWeights::random(&config, init_std, rng);
        Ok(Model { config, weights })
    }

    /// Content fingerprint over config and every weight tensor.
    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint(&self.config)
    }

    /// Runs the model over `tokens`, capturing per `capture` and applying
    /// `plan` (if any) at every token position.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: &CaptureSpec,
        plan: Option<&SteeringPlan>,
    ) -> Result<ForwardTrace> {
        self.forward_from(tokens, capture, plan, 0)
    }

    /// [`Model::forward`] with injection restricted to positions at or after
    /// `inject_from`. Captures are unaffected by the restriction.
    pub fn forward_from(
        &self,
        tokens: &[u32],
        capture: &CaptureSpec,
        plan: Option<&SteeringPlan>,
        inject_from: usize,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Unsatisfiable {
                context: "forward".into(),
                reason: "empty token sequence".into(),
            });
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: cfg.vocab_size,
                });
            }
        }
        for site in &capture.sites {
            site.validate(cfg)?;
        }
        if let Some(p) = plan {
            p.validate_for(cfg)?;
        }

        let t_len = tokens.len();
        let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        let scale = 1.0 / (dh as f32).sqrt();

        // Embedding: token + learned absolute position.
        let mut x = Matrix::zeros(t_len, d);
        for (i, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            let emb = self.weights.token_emb.row(tok as usize);
            let pos = self.weights.pos_emb.row(i);
            for j in 0..d {
                row[j] = emb[j] + pos[j];
            }
        }

        let mut captured: BTreeMap<HookSite, Matrix> = BTreeMap::new();
        let mut snapshots = capture.post_modify.then(|| StreamSnapshots {
            post_attention: Vec::with_capacity(cfg.n_layers),
            post_layer: Vec::with_capacity(cfg.n_layers),
        });

        let mut normed = Matrix::zeros(t_len, d);
        for l in 0..cfg.n_layers {
            let lw = &self.weights.layers[l];

            for i in 0..t_len {
                layer_norm_into(x.row(i), &lw.ln1_gain, &lw.ln1_bias, LN_EPS, normed.row_mut(i));
            }
            let q = normed.matmul_tb(&lw.wq)?;
            let k = normed.matmul_tb(&lw.wk)?;
            let v = normed.matmul_tb(&lw.wv)?;

            // Causal attention, head-major concat layout in `heads`.
            let mut heads = Matrix::zeros(t_len, d);
            let mut probs = vec![0.0f32; t_len];
            let mut acc = vec![0.0f64; dh];
            for h in 0..nh {
                let off = h * dh;
                for i in 0..t_len {
                    let qi = &q.row(i)[off..off + dh];
                    let scores = &mut probs[..=i];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = dot(qi, &k.row(j)[off..off + dh]) as f32 * scale;
                    }
                    softmax(scores);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &v.row(j)[off..off + dh];
                        for (a, &vv) in acc.iter_mut().zip(vj) {
                            *a += f64::from(p) * f64::from(vv);
                        }
                    }
                    let out = &mut heads.row_mut(i)[off..off + dh];
                    for (o, &a) in out.iter_mut().zip(acc.iter()) {
                        *o = a as f32;
                    }
                }
            }

            // Capture head outputs before any injection at these sites.
            for site in &capture.sites {
                if let HookSite::HeadOutput { layer, head } = *site {
                    if layer == l {
                        let off = head * dh;
                        let m = Matrix::from_fn(t_len, dh, |i, j| heads.get(i, off + j));
                        captured.insert(*site, m);
                    }
                }
            }

            if let Some(p) = plan {
                if p.kind() == PlanKind::Head && p.layer() == l {
                    p.inject_heads(&mut heads, dh, inject_from);
                }
            }

            let attn_out = heads.matmul_tb(&lw.wo)?;
            x.add_scaled(&attn_out, 1.0)?;
            if let Some(s) = snapshots.as_mut() {
                s.post_attention.push(x.clone());
            }

            for i in 0..t_len {
                layer_norm_into(x.row(i), &lw.ln2_gain, &lw.ln2_bias, LN_EPS, normed.row_mut(i));
            }
            let mut hidden = normed.matmul_tb(&lw.w_in)?;
            for i in 0..t_len {
                let row = hidden.row_mut(i);
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = gelu(*cell + lw.b_in[j]);
                }
            }
            let mlp_out = hidden.matmul_tb(&lw.w_out)?;
            for i in 0..t_len {
                let row = x.row_mut(i);
                let m = mlp_out.row(i);
                for j in 0..d {
                    row[j] += m[j] + lw.b_out[j];
                }
            }

            let site = HookSite::LayerResidual { layer: l };
            if capture.sites.contains(&site) {
                captured.insert(site, x.clone());
            }

            if let Some(p) = plan {
                if p.kind() == PlanKind::Layer && p.layer() == l {
                    p.inject_layer(&mut x, inject_from);
                }
            }
            if let Some(s) = snapshots.as_mut() {
                s.post_layer.push(x.clone());
            }
        }

        let logits = x.matmul_tb(&self.weights.unembed)?;
        Ok(ForwardTrace {
            logits,
            captured,
            snapshots,
        })
    }

    /// Greedy decoding. Returns only the generated continuation. The plan
    /// (if any) applies during every forward pass; a plan with
    /// `generated_only` set injects only at positions past the prompt.
    /// Generation stops after emitting `stop` or when the context fills.
    pub fn decode(
        &self,
        prompt: &[u32],
        plan: Option<&SteeringPlan>,
        max_new: usize,
        stop: Option<u32>,
    ) -> Result<Vec<u32>> {
        let inject_from = match plan {
            Some(p) if p.generated_only => prompt.len(),
            _ => 0,
        };
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.config.max_seq_len {
                break;
            }
            let trace = self.forward_from(&seq, &CaptureSpec::none(), plan, inject_from)?;
            let next = argmax(trace.last_logits()) as u32;
            seq.push(next);
            out.push(next);
            if Some(next) == stop {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; ties break toward the lower index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
