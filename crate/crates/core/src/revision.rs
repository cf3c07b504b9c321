//! Revision vectors and steering plans.
//!
//! A revision vector is a direction in activation space whose positive
//! sense increases the model's tendency to refuse. Two extraction methods
//! produce one from a labeled activation set:
//!
//! * [`extract_mms`]: difference of class means (positive minus negative),
//!   left unnormalized.
//! * [`extract_pwd`]: weight vector of a logistic probe fit on the set,
//!   normalized to unit length. The probe scores the positive class, so
//!   the direction already points toward refusal.
//!
//! A [`SteeringPlan`] packages directions with an injection site and a
//! strength for use during generation. Layer plans add `alpha * r` to the
//! post-MLP residual of one layer; head plans add `alpha * theta_h * r_h`
//! to each selected head's output before the `Wo` projection, where
//! `theta` is a 0/1 gate over heads chosen by probe accuracy. Plans
//! serialize to a versioned structured text file and can be loaded by any
//! model with matching widths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::LabeledActivationSet;
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintBuilder;
use crate::numkernel::{dot64, Matrix};
use crate::probes::{fit_logistic, HeatmapReport, LinearTrainConfig};
use crate::synthdata::Strategy;
use crate::transformer::{HookSite, ModelConfig};

/// Which site family a plan injects into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    /// Add to the post-MLP residual stream of one layer.
    Layer,
    /// Add to selected head outputs of one layer, before `Wo`.
    Head,
}

impl std::fmt::Display for PlanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanKind::Layer => "layer",
            PlanKind::Head => "head",
        })
    }
}

/// How a revision direction was extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMethod {
    /// Probe weight direction: normalized logistic-probe weights.
    Pwd,
    /// Mean minus mean shift: difference of class means, unnormalized.
    Mms,
}

impl std::fmt::Display for ExtractionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExtractionMethod::Pwd => "pwd",
            ExtractionMethod::Mms => "mms",
        })
    }
}

/// Where a direction's numbers came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Fingerprint of the model whose activations were captured.
    pub model: String,
    /// Fingerprint of the activation set the direction was extracted from.
    pub activations: String,
}

/// A steering direction tied to the site it was captured at.
#[derive(Debug, Clone, PartialEq)]
pub struct RevisionVector {
    pub site: HookSite,
    pub direction: Vec<f32>,
    pub method: ExtractionMethod,
    pub source: Provenance,
}

impl RevisionVector {
    pub fn norm(&self) -> f64 {
        dot64(&self.direction, &self.direction).sqrt()
    }
}

/// Difference of class means, positive class minus negative.
///
/// Accumulates in `f64` and leaves the result unnormalized, so the shift
/// carries the scale of the activations themselves.
pub fn extract_mms(set: &LabeledActivationSet) -> Result<RevisionVector> {
    set.validate()?;
    ensure_both_classes(set)?;
    let w = set.width();
    let mut pos = vec![0.0f64; w];
    let mut neg = vec![0.0f64; w];
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..set.len() {
        let row = set.vectors.row(i);
        let (acc, n) = if set.labels[i] {
            (&mut pos, &mut n_pos)
        } else {
            (&mut neg, &mut n_neg)
        };
        for d in 0..w {
            acc[d] += row[d] as f64;
        }
        *n += 1;
    }
    let direction: Vec<f32> = (0..w)
        .map(|d| (pos[d] / n_pos as f64 - neg[d] / n_neg as f64) as f32)
        .collect();
    Ok(RevisionVector {
        site: set.site,
        direction,
        method: ExtractionMethod::Mms,
        source: provenance_of(set),
    })
}

/// Normalized weight vector of a logistic probe fit on the whole set.
///
/// The probe is fit from zero init by full-batch gradient descent on every
/// entry (no validation split; the direction is wanted, not an accuracy
/// estimate), making extraction fully deterministic.
pub fn extract_pwd(set: &LabeledActivationSet) -> Result<RevisionVector> {
    set.validate()?;
    ensure_both_classes(set)?;
    let rows: Vec<(&[f32], bool)> = (0..set.len())
        .map(|i| (set.vectors.row(i), set.labels[i]))
        .collect();
    let (w, _b) = fit_logistic(&rows, set.width(), &LinearTrainConfig::default())?;
    pwd_from_weights(&w, set.site, provenance_of(set))
}

/// Normalizes probe weights into a revision direction.
///
/// The caller's probe must score the positive (refusal-side) class, which
/// both probe trainers here do; the normalized weights then point in the
/// direction that raises that score.
pub fn pwd_from_weights(
    weights: &[f32],
    site: HookSite,
    source: Provenance,
) -> Result<RevisionVector> {
    let norm = dot64(weights, weights).sqrt();
    if !(norm.is_finite() && norm > 1e-12) {
        return Err(Error::Unsatisfiable {
            context: "probe weight direction".into(),
            reason: format!("degenerate probe weights with norm {norm:e}"),
        });
    }
    let direction = weights.iter().map(|&v| (v as f64 / norm) as f32).collect();
    Ok(RevisionVector {
        site,
        direction,
        method: ExtractionMethod::Pwd,
        source,
    })
}

/// Picks the `ceil(ratio * H)` heads of one layer with the highest probe
/// validation accuracy; ties break toward the lower head index. Returns
/// head indices in ascending order.
pub fn select_heads(report: &HeatmapReport, layer: usize, ratio: f32) -> Result<Vec<usize>> {
    if !(ratio.is_finite() && ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig {
            field: "revision.head_ratio".into(),
            reason: format!("must lie in (0, 1], got {ratio}"),
        });
    }
    let mut scored = report.head_accuracies(layer);
    if scored.is_empty() {
        return Err(Error::Unsatisfiable {
            context: "head selection".into(),
            reason: format!("heatmap has no head sites at layer {layer}"),
        });
    }
    let n_heads = scored.len();
    // Snap products that are within f32 noise of an integer before taking the
    // ceiling, so a ratio like 0.1 of 10 heads selects 1 head rather than 2.
    let exact = ratio as f64 * n_heads as f64;
    let nearest = exact.round();
    let k_f = if (exact - nearest).abs() < 1e-6 * nearest.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    let k = (k_f as usize).clamp(1, n_heads);
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("probe accuracies are finite")
            .then(a.0.cmp(&b.0))
    });
    let mut chosen: Vec<usize> = scored[..k].iter().map(|&(h, _)| h).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Optional knobs shared by both plan constructors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanOptions {
    /// Flip the sign of the injected direction.
    pub negate: bool,
    /// Inject only at generated positions rather than the whole sequence.
    pub generated_only: bool,
    /// Contrastive strategy the source activations came from, if any.
    pub strategy: Option<Strategy>,
}

/// A revision recipe: where to inject, what to inject, and how hard.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    kind: PlanKind,
    layer: usize,
    pub alpha: f32,
    /// Width `d_model`; empty for head plans.
    layer_vector: Vec<f32>,
    /// One gate per head; empty for layer plans.
    theta: Vec<f32>,
    /// One direction per head, empty vectors for ungated heads; empty for
    /// layer plans.
    head_vectors: Vec<Vec<f32>>,
    pub negate: bool,
    pub generated_only: bool,
    pub method: ExtractionMethod,
    pub strategy: Option<Strategy>,
    /// Fraction of heads gated on, when this is a head plan built by ratio.
    pub head_ratio: Option<f32>,
    pub source: Provenance,
}

/// Builds a plan injecting one vector into a layer's residual stream.
pub fn make_layer_plan(
    vector: &RevisionVector,
    alpha: f32,
    opts: PlanOptions,
) -> Result<SteeringPlan> {
    let layer = match vector.site {
        HookSite::LayerResidual { layer } => layer,
        other => {
            return Err(Error::InvalidPlan {
                reason: format!("layer plan needs a residual-site vector, got {other}"),
            })
        }
    };
    let plan = SteeringPlan {
        kind: PlanKind::Layer,
        layer,
        alpha,
        layer_vector: vector.direction.clone(),
        theta: Vec::new(),
        head_vectors: Vec::new(),
        negate: opts.negate,
        generated_only: opts.generated_only,
        method: vector.method,
        strategy: opts.strategy,
        head_ratio: None,
        source: vector.source.clone(),
    };
    plan.basic_checks()?;
    Ok(plan)
}

/// Builds a plan injecting per-head vectors at the selected heads of one
/// layer. `vectors` must carry one entry per selected head, each captured
/// at that head's output site.
pub fn make_head_plan(
    layer: usize,
    n_heads: usize,
    selected: &[usize],
    vectors: &[RevisionVector],
    alpha: f32,
    head_ratio: Option<f32>,
    opts: PlanOptions,
) -> Result<SteeringPlan> {
    if selected.is_empty() {
        return Err(Error::InvalidPlan {
            reason: "head plan with no selected heads".into(),
        });
    }
    if selected.len() != vectors.len() {
        return Err(Error::LengthMismatch {
            context: "head plan selected heads vs vectors".into(),
            expected: selected.len(),
            got: vectors.len(),
        });
    }
    let mut theta = vec![0.0f32; n_heads];
    let mut head_vectors = vec![Vec::new(); n_heads];
    let mut method = None;
    let mut source = None;
    for (&h, v) in selected.iter().zip(vectors) {
        if h >= n_heads {
            return Err(Error::InvalidPlan {
                reason: format!("selected head {h} out of range for {n_heads} heads"),
            });
        }
        match v.site {
            HookSite::HeadOutput {
                layer: vl,
                head: vh,
            } if vl == layer && vh == h => {}
            other => {
                return Err(Error::InvalidPlan {
                    reason: format!(
                        "vector for head {h} of layer {layer} was captured at {other}"
                    ),
                })
            }
        }
        if theta[h] != 0.0 {
            return Err(Error::InvalidPlan {
                reason: format!("head {h} selected twice"),
            });
        }
        theta[h] = 1.0;
        head_vectors[h] = v.direction.clone();
        if *method.get_or_insert(v.method) != v.method {
            return Err(Error::InvalidPlan {
                reason: "head vectors mix extraction methods".into(),
            });
        }
        source.get_or_insert_with(|| v.source.clone());
    }
    let plan = SteeringPlan {
        kind: PlanKind::Head,
        layer,
        alpha,
        layer_vector: Vec::new(),
        theta,
        head_vectors,
        negate: opts.negate,
        generated_only: opts.generated_only,
        method: method.expect("at least one selected head"),
        strategy: opts.strategy,
        head_ratio,
        source: source.expect("at least one selected head"),
    };
    plan.basic_checks()?;
    Ok(plan)
}

impl SteeringPlan {
    pub fn kind(&self) -> PlanKind {
        self.kind
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// The 0/1 head gates of a head plan; empty for layer plans.
    pub fn theta(&self) -> &[f32] {
        &self.theta
    }

    /// The residual direction of a layer plan; empty for head plans.
    pub fn layer_vector(&self) -> &[f32] {
        &self.layer_vector
    }

    /// Head indices this plan injects into, ascending.
    pub fn active_heads(&self) -> Vec<usize> {
        self.theta
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0.0)
            .map(|(h, _)| h)
            .collect()
    }

    pub fn direction_for_head(&self, head: usize) -> Option<&[f32]> {
        self.head_vectors
            .get(head)
            .filter(|v| !v.is_empty())
            .map(|v| v.as_slice())
    }

    /// Injection strength after the negate flag.
    pub fn effective_alpha(&self) -> f32 {
        if self.negate {
            -self.alpha
        } else {
            self.alpha
        }
    }

    /// Internal consistency, independent of any model.
    fn basic_checks(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::InvalidPlan {
                reason: format!("alpha {} is not finite", self.alpha),
            });
        }
        match self.kind {
            PlanKind::Layer => {
                if self.layer_vector.is_empty() {
                    return Err(Error::InvalidPlan {
                        reason: "layer plan without a vector".into(),
                    });
                }
                if !self.theta.is_empty() || !self.head_vectors.is_empty() {
                    return Err(Error::InvalidPlan {
                        reason: "layer plan carrying head payload".into(),
                    });
                }
                if self.layer_vector.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "layer plan vector".into(),
                    });
                }
            }
            PlanKind::Head => {
                if self.theta.len() != self.head_vectors.len() {
                    return Err(Error::LengthMismatch {
                        context: "head plan gates vs vectors".into(),
                        expected: self.theta.len(),
                        got: self.head_vectors.len(),
                    });
                }
                if !self.layer_vector.is_empty() {
                    return Err(Error::InvalidPlan {
                        reason: "head plan carrying a layer vector".into(),
                    });
                }
                let mut any = false;
                let mut width = None;
                for (h, (&t, v)) in self.theta.iter().zip(&self.head_vectors).enumerate() {
                    if !t.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("head plan gate {h}"),
                        });
                    }
                    if (t != 0.0) != !v.is_empty() {
                        return Err(Error::InvalidPlan {
                            reason: format!(
                                "head {h} gate and vector payload disagree (gate {t}, \
                                 vector length {})",
                                v.len()
                            ),
                        });
                    }
                    if v.is_empty() {
                        continue;
                    }
                    any = true;
                    if *width.get_or_insert(v.len()) != v.len() {
                        return Err(Error::InvalidPlan {
                            reason: "head vectors have mixed widths".into(),
                        });
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite {
                            context: format!("head plan vector {h}"),
                        });
                    }
                }
                if !any {
                    return Err(Error::InvalidPlan {
                        reason: "head plan with no selected heads".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks the plan against a model's shape. A plan built on one model
    /// is applicable to any other whose widths match.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        self.basic_checks()?;
        if self.layer >= config.n_layers {
            return Err(Error::UnknownSite {
                site: format!("{} plan at layer {}", self.kind, self.layer),
                n_layers: config.n_layers,
                n_heads: config.n_heads,
            });
        }
        match self.kind {
            PlanKind::Layer => {
                if self.layer_vector.len() != config.d_model {
                    return Err(Error::WidthMismatch {
                        source_model: format!(
                            "layer plan vector of width {}",
                            self.layer_vector.len()
                        ),
                        target_model: format!("model with d_model {}", config.d_model),
                    });
                }
            }
            PlanKind::Head => {
                if self.theta.len() != config.n_heads {
                    return Err(Error::WidthMismatch {
                        source_model: format!("head plan over {} heads", self.theta.len()),
                        target_model: format!("model with {} heads", config.n_heads),
                    });
                }
                for v in self.head_vectors.iter().filter(|v| !v.is_empty()) {
                    if v.len() != config.d_head {
                        return Err(Error::WidthMismatch {
                            source_model: format!("head plan vector of width {}", v.len()),
                            target_model: format!("model with d_head {}", config.d_head),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds `alpha * theta_h * r_h` to each head's slice of the
    /// concatenated head-output rows, from row `from` on.
    pub(crate) fn inject_heads(&self, heads: &mut Matrix, d_head: usize, from: usize) {
        let alpha = self.effective_alpha();
        for t in from..heads.rows() {
            let row = heads.row_mut(t);
            for (h, v) in self.head_vectors.iter().enumerate() {
                if v.is_empty() {
                    continue;
                }
                let scale = alpha * self.theta[h];
                let slice = &mut row[h * d_head..(h + 1) * d_head];
                for (s, &r) in slice.iter_mut().zip(v) {
                    *s += scale * r;
                }
            }
        }
    }

    /// Adds `alpha * r` to residual rows from row `from` on.
    pub(crate) fn inject_layer(&self, x: &mut Matrix, from: usize) {
        let alpha = self.effective_alpha();
        for t in from..x.rows() {
            let row = x.row_mut(t);
            for (s, &r) in row.iter_mut().zip(&self.layer_vector) {
                *s += alpha * r;
            }
        }
    }

    /// Content fingerprint over every field that affects injection.
    pub fn fingerprint(&self) -> String {
        let mut fp = FingerprintBuilder::new("steering-plan");
        fp.bytes(&[self.kind as u8, self.negate as u8, self.generated_only as u8]);
        fp.u64(self.layer as u64);
        fp.f32(self.alpha);
        fp.str(&self.method.to_string());
        fp.str(&self.strategy.map(|s| s.to_string()).unwrap_or_default());
        fp.f32(self.head_ratio.unwrap_or(-1.0));
        fp.f32s(&self.layer_vector);
        fp.f32s(&self.theta);
        for v in &self.head_vectors {
            fp.u64(v.len() as u64);
            fp.f32s(v);
        }
        fp.str(&self.source.model);
        fp.str(&self.source.activations);
        fp.finish()
    }
}

const PLAN_FORMAT: &str = "actrev-plan";

/// Version of the plan file this build reads and writes.
pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    format: String,
    version: u32,
    kind: PlanKind,
    layer: usize,
    alpha: f32,
    negate: bool,
    generated_only: bool,
    method: ExtractionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head_ratio: Option<f32>,
    source: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    layer_vector: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    theta: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    head_vectors: Vec<Vec<f32>>,
}

/// Writes a plan as a versioned structured text file.
pub fn save_plan(path: &Path, plan: &SteeringPlan) -> Result<()> {
    plan.basic_checks()?;
    let file = PlanFile {
        format: PLAN_FORMAT.into(),
        version: PLAN_FORMAT_VERSION,
        kind: plan.kind,
        layer: plan.layer,
        alpha: plan.alpha,
        negate: plan.negate,
        generated_only: plan.generated_only,
        method: plan.method,
        strategy: plan.strategy,
        head_ratio: plan.head_ratio,
        source: plan.source.clone(),
        layer_vector: plan.layer_vector.clone(),
        theta: plan.theta.clone(),
        head_vectors: plan.head_vectors.clone(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::MalformedFile {
        kind: "steering-plan",
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a plan written by [`save_plan`].
pub fn load_plan(path: &Path) -> Result<SteeringPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PlanFile = toml::from_str(&text).map_err(|e| Error::MalformedFile {
        kind: "steering-plan",
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    if file.format != PLAN_FORMAT {
        return Err(Error::MalformedFile {
            kind: "steering-plan",
            path: Some(path.to_path_buf()),
            reason: format!("unexpected format tag {:?}", file.format),
        });
    }
    if file.version != PLAN_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "steering-plan",
            found: file.version,
            supported: PLAN_FORMAT_VERSION,
        });
    }
    let plan = SteeringPlan {
        kind: file.kind,
        layer: file.layer,
        alpha: file.alpha,
        layer_vector: file.layer_vector,
        theta: file.theta,
        head_vectors: file.head_vectors,
        negate: file.negate,
        generated_only: file.generated_only,
        method: file.method,
        strategy: file.strategy,
        head_ratio: file.head_ratio,
        source: file.source,
    };
    plan.basic_checks().map_err(|e| Error::MalformedFile {
        kind: "steering-plan",
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    Ok(plan)
}

fn ensure_both_classes(set: &LabeledActivationSet) -> Result<()> {
    for (class, n) in [(true, set.n_pos()), (false, set.n_neg())] {
        if n == 0 {
            return Err(Error::InsufficientSamples {
                cell: format!("extraction class {class}"),
                needed: 1,
                available: 0,
            });
        }
    }
    Ok(())
}

fn provenance_of(set: &LabeledActivationSet) -> Provenance {
    Provenance {
        model: set.model_fingerprint.clone(),
        activations: set.fingerprint(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;
    use crate::probes::HeatmapCell;

    fn set_from_rows(rows: Vec<Vec<f32>>, labels: Vec<bool>, site: HookSite) -> LabeledActivationSet {
        let width = rows[0].len();
        let data: Vec<f32> = rows.into_iter().flatten().collect();
        LabeledActivationSet {
            site,
            vectors: Matrix::from_vec(labels.len(), width, data).unwrap(),
            labels,
            corpus_fingerprint: "corpus".into(),
            model_fingerprint: "model".into(),
        }
    }

    #[test]
    fn mms_on_unit_basis_points_is_the_difference_of_means() {
        let site = HookSite::LayerResidual { layer: 0 };
        let set = set_from_rows(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![true, false],
            site,
        );
        let v = extract_mms(&set).unwrap();
        assert_eq!(v.direction, vec![1.0, -1.0]);
        assert_eq!(v.method, ExtractionMethod::Mms);
    }

    #[test]
    fn mms_matches_brute_force_means_on_random_set() {
        let mut rng = Rng::new(3);
        let n = 50;
        let w = 7;
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..w).map(|_| rng.normal(0.0, 1.0) * 3.0).collect())
            .collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let set = set_from_rows(rows.clone(), labels.clone(), HookSite::LayerResidual { layer: 1 });
        let v = extract_mms(&set).unwrap();

        let mut expect = vec![0.0f64; w];
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let n_neg = labels.len() as f64 - n_pos;
        for (row, &label) in rows.iter().zip(&labels) {
            for d in 0..w {
                expect[d] += if label {
                    row[d] as f64 / n_pos
                } else {
                    -(row[d] as f64) / n_neg
                };
            }
        }
        for d in 0..w {
            assert!(
                (v.direction[d] as f64 - expect[d]).abs() < 1e-5,
                "component {d}: {} vs {}",
                v.direction[d],
                expect[d]
            );
        }
    }

    #[test]
    fn pwd_normalizes_probe_weights() {
        let v = pwd_from_weights(
            &[3.0, 4.0],
            HookSite::LayerResidual { layer: 0 },
            Provenance::default(),
        )
        .unwrap();
        assert!((v.direction[0] - 0.6).abs() < 1e-6);
        assert!((v.direction[1] - 0.8).abs() < 1e-6);
        assert!((v.norm() - 1.0).abs() < 1e-6);
        assert!(pwd_from_weights(
            &[0.0, 0.0],
            HookSite::LayerResidual { layer: 0 },
            Provenance::default()
        )
        .is_err());
    }

    #[test]
    fn pwd_points_from_negative_class_toward_positive() {
        // Classes separated along +x: the extracted direction must have a
        // positive dot product with mean(pos) - mean(neg).
        let mut rng = Rng::new(4);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let label = i % 2 == 0;
            let shift = if label { 2.0 } else { -2.0 };
            rows.push(vec![rng.normal(0.0, 1.0) + shift, rng.normal(0.0, 1.0)]);
            labels.push(label);
        }
        let set = set_from_rows(rows, labels, HookSite::HeadOutput { layer: 0, head: 0 });
        let pwd = extract_pwd(&set).unwrap();
        let mms = extract_mms(&set).unwrap();
        let agreement = dot64(&pwd.direction, &mms.direction);
        assert!(agreement > 0.0, "pwd and mean shift disagree: {agreement}");
        assert!((pwd.norm() - 1.0).abs() < 1e-6);
    }

    fn heatmap_with_heads(accs: &[f32]) -> HeatmapReport {
        HeatmapReport {
            eval_names: vec![],
            cells: accs
                .iter()
                .enumerate()
                .map(|(head, &val_accuracy)| HeatmapCell {
                    site: HookSite::HeadOutput { layer: 2, head },
                    val_accuracy,
                    eval_accuracies: vec![],
                })
                .collect(),
            model_fingerprint: "m".into(),
            train_fingerprint: "t".into(),
        }
    }

    #[test]
    fn select_heads_takes_ceil_ratio_with_ties_to_lower_index() {
        let report = heatmap_with_heads(&[0.6, 0.9, 0.8, 0.9, 0.5, 0.7, 0.9, 0.8, 0.6, 0.4]);
        // ratio 0.7 of 10 heads -> 7 heads; ties at 0.9 and 0.8 resolve
        // toward lower indices.
        let chosen = select_heads(&report, 2, 0.7).unwrap();
        assert_eq!(chosen.len(), 7);
        assert_eq!(chosen, vec![0, 1, 2, 3, 5, 6, 7]);

        let top = select_heads(&report, 2, 0.1).unwrap();
        assert_eq!(top, vec![1]);

        let all = select_heads(&report, 2, 1.0).unwrap();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        assert!(select_heads(&report, 2, 0.0).is_err());
        assert!(select_heads(&report, 2, 1.5).is_err());
        assert!(select_heads(&report, 0, 0.5).is_err());
    }

    #[test]
    fn select_heads_is_monotone_in_ratio() {
        let report = heatmap_with_heads(&[0.55, 0.95, 0.6, 0.8, 0.7, 0.65, 0.9, 0.85]);
        let mut prev: Vec<usize> = Vec::new();
        for step in 1..=8 {
            let ratio = step as f32 / 8.0;
            let chosen = select_heads(&report, 2, ratio).unwrap();
            assert!(
                prev.iter().all(|h| chosen.contains(h)),
                "ratio {ratio}: {prev:?} not contained in {chosen:?}"
            );
            prev = chosen;
        }
        assert_eq!(prev.len(), 8);
    }

    fn example_head_plan() -> SteeringPlan {
        let layer = 1;
        let selected = vec![0, 2];
        let vectors: Vec<RevisionVector> = selected
            .iter()
            .map(|&head| RevisionVector {
                site: HookSite::HeadOutput { layer, head },
                direction: vec![0.5, -0.25, 0.125, 1.0],
                method: ExtractionMethod::Mms,
                source: Provenance {
                    model: "model-fp".into(),
                    activations: "set-fp".into(),
                },
            })
            .collect();
        make_head_plan(
            layer,
            4,
            &selected,
            &vectors,
            2.0,
            Some(0.5),
            PlanOptions {
                negate: false,
                generated_only: true,
                strategy: Some(Strategy::MultiResponse),
            },
        )
        .unwrap()
    }

    #[test]
    fn head_plan_wires_gates_and_vectors() {
        let plan = example_head_plan();
        assert_eq!(plan.kind(), PlanKind::Head);
        assert_eq!(plan.layer(), 1);
        assert_eq!(plan.theta(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(plan.active_heads(), vec![0, 2]);
        assert!(plan.direction_for_head(1).is_none());
        assert_eq!(plan.direction_for_head(2).unwrap().len(), 4);

        let config = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            d_head: 4,
            d_mlp: 32,
            ..ModelConfig::default()
        };
        plan.validate_for(&config).unwrap();

        let narrow = ModelConfig {
            d_head: 8,
            d_model: 32,
            ..config.clone()
        };
        assert!(plan.validate_for(&narrow).is_err());
        let shallow = ModelConfig {
            n_layers: 1,
            ..config.clone()
        };
        assert!(plan.validate_for(&shallow).is_err());
    }

    #[test]
    fn negate_flips_effective_alpha_only() {
        let mut plan = example_head_plan();
        assert_eq!(plan.effective_alpha(), 2.0);
        plan.negate = true;
        assert_eq!(plan.effective_alpha(), -2.0);
        assert_eq!(plan.alpha, 2.0);
    }

    #[test]
    fn layer_injection_adds_alpha_r_from_start_row() {
        let site = HookSite::LayerResidual { layer: 0 };
        let vector = RevisionVector {
            site,
            direction: vec![1.0, -2.0],
            method: ExtractionMethod::Mms,
            source: Provenance::default(),
        };
        let plan = make_layer_plan(&vector, 0.5, PlanOptions::default()).unwrap();
        let mut x = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        plan.inject_layer(&mut x, 1);
        assert_eq!(x.row(0), &[0.0, 0.0]);
        assert_eq!(x.row(1), &[1.5, 0.0]);
        assert_eq!(x.row(2), &[2.5, 1.0]);
    }

    #[test]
    fn head_injection_touches_only_gated_slices() {
        let plan = example_head_plan();
        let d_head = 4;
        let mut heads = Matrix::zeros(2, 16);
        plan.inject_heads(&mut heads, d_head, 0);
        let expected = [1.0, -0.5, 0.25, 2.0];
        for t in 0..2 {
            let row = heads.row(t);
            assert_eq!(&row[0..4], &expected);
            assert_eq!(&row[4..8], &[0.0; 4]);
            assert_eq!(&row[8..12], &expected);
            assert_eq!(&row[12..16], &[0.0; 4]);
        }
    }

    #[test]
    fn plan_file_round_trips_exactly() {
        let plan = example_head_plan();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.toml");
        save_plan(&path, &plan).unwrap();
        let back = load_plan(&path).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.fingerprint(), plan.fingerprint());

        let vector = RevisionVector {
            site: HookSite::LayerResidual { layer: 3 },
            direction: vec![0.1, 0.2, 0.3],
            method: ExtractionMethod::Pwd,
            source: Provenance {
                model: "m".into(),
                activations: "a".into(),
            },
        };
        let layer_plan = make_layer_plan(
            &vector,
            1.5,
            PlanOptions {
                negate: true,
                ..PlanOptions::default()
            },
        )
        .unwrap();
        let lpath = dir.path().join("layer-plan.toml");
        save_plan(&lpath, &layer_plan).unwrap();
        assert_eq!(load_plan(&lpath).unwrap(), layer_plan);
    }

    #[test]
    fn plan_file_rejects_tampering() {
        let plan = example_head_plan();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.toml");
        save_plan(&path, &plan).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        let wrong_version = text.replace("version = 1", "version = 3");
        fs::write(&path, wrong_version).unwrap();
        match load_plan(&path) {
            Err(Error::UnsupportedVersion { found: 3, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }

        let wrong_field = text.replace("alpha = 2.0", "alphaa = 2.0");
        fs::write(&path, wrong_field).unwrap();
        assert!(load_plan(&path).is_err());
    }
}
