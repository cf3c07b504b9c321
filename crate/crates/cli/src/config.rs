//! One flat experiment configuration with per-module sections.
//!
//! The file is TOML; every section and every field has a pinned default, so
//! an empty file describes the reference toy experiment. Unknown keys are
//! rejected with the offending field path. CLI flags override individual
//! fields after loading, and the effective snapshot is embedded verbatim in
//! each run manifest so any artifact can be replayed.

use std::path::Path;

use actrev::eval::EvalParams;
use actrev::numkernel::derive_seed;
use actrev::probes::ProbeTrainConfig;
use actrev::revision::{ExtractionMethod, PlanKind};
use actrev::synthdata::{CorpusSpec, Strategy, TrainSchedule};
use actrev::transformer::ModelConfig;
use actrev::{Error, Result};
use serde::{Deserialize, Serialize};

/// Full experiment description. Sections owned by library modules reuse the
/// library types directly so their validation rules apply unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub train: TrainSchedule,
    pub probe: ProbeTrainConfig,
    pub revision: RevisionSection,
    pub eval: EvalParams,
    pub sweep: SweepSection,
    pub tsne: TsneSection,
}

/// Revision-vector extraction and steering-plan shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RevisionSection {
    /// Direction extraction: probe-weight direction or mean shift.
    pub method: ExtractionMethod,
    /// Which contrastive pairs the directions come from.
    pub strategy: Strategy,
    /// Inject into a layer residual or into selected head outputs.
    pub site: PlanKind,
    /// Layer the plan targets.
    pub layer: usize,
    /// Injection strength.
    pub alpha: f32,
    /// Fraction of heads gated on for head plans, ranked by probe accuracy.
    pub head_ratio: f32,
    /// Flip the injected direction.
    pub negate: bool,
    /// Inject only at generated positions rather than the whole sequence.
    pub generated_only: bool,
    /// Contrastive pairs drawn per capture.
    pub n_pairs: usize,
    /// Seed for drawing the pairs.
    pub pairs_seed: u64,
}

impl Default for RevisionSection {
    fn default() -> Self {
        RevisionSection {
            method: ExtractionMethod::Mms,
            strategy: Strategy::MultiResponse,
            site: PlanKind::Head,
            layer: 2,
            alpha: 4.0,
            head_ratio: 0.7,
            negate: false,
            generated_only: false,
            n_pairs: 256,
            pairs_seed: 13,
        }
    }
}

/// Named grid shapes for the sweep subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GridPreset {
    /// 7 layers x 4 strengths at the residual site, 32-layer geometry.
    DefaultLayer,
    /// 7 layers x 4 strengths x 0.7 head ratio, 32-layer geometry.
    DefaultHead,
    /// Every layer of the loaded model x 4 strengths, residual site.
    ToyLayer,
    /// Every layer of the loaded model x 4 strengths x 0.7 ratio, head site.
    ToyHead,
}

/// Sweep harness knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub grid: GridPreset,
    /// Write per-cell checkpoints so interrupted sweeps resume.
    pub checkpoint: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            grid: GridPreset::ToyHead,
            checkpoint: true,
        }
    }
}

/// t-SNE schedule for the project subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneSection {
    pub perplexity: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TsneSection {
    fn default() -> Self {
        TsneSection {
            perplexity: 12.0,
            iters: 300,
            seed: 17,
        }
    }
}

impl ExperimentConfig {
    /// Schema-level validation beyond what serde enforces. Every failure
    /// names the offending field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        self.eval.validate()?;

        let rev = &self.revision;
        if !(rev.head_ratio.is_finite() && rev.head_ratio > 0.0 && rev.head_ratio <= 1.0) {
            return Err(Error::InvalidConfig {
                field: "revision.head_ratio".into(),
                reason: format!("must lie in (0, 1], got {}", rev.head_ratio),
            });
        }
        if !rev.alpha.is_finite() {
            return Err(Error::InvalidConfig {
                field: "revision.alpha".into(),
                reason: "must be finite".into(),
            });
        }
        if rev.n_pairs < 2 {
            return Err(Error::InvalidConfig {
                field: "revision.n_pairs".into(),
                reason: "need at least 2 contrastive pairs".into(),
            });
        }
        if rev.layer >= self.model.n_layers {
            return Err(Error::InvalidConfig {
                field: "revision.layer".into(),
                reason: format!(
                    "layer {} out of range for a {}-layer model",
                    rev.layer, self.model.n_layers
                ),
            });
        }
        if !(self.tsne.perplexity.is_finite() && self.tsne.perplexity >= 1.0) {
            return Err(Error::InvalidConfig {
                field: "tsne.perplexity".into(),
                reason: format!("must be at least 1, got {}", self.tsne.perplexity),
            });
        }
        if self.tsne.iters == 0 {
            return Err(Error::InvalidConfig {
                field: "tsne.iters".into(),
                reason: "need at least 1 iteration".into(),
            });
        }

        let needed_vocab = self.corpus.required_vocab_size();
        if self.model.vocab_size < needed_vocab {
            return Err(Error::InvalidConfig {
                field: "model.vocab_size".into(),
                reason: format!("corpus vocabulary needs at least {needed_vocab} tokens"),
            });
        }
        let needed_seq = self.corpus.max_prompt_len() + self.eval.max_new;
        if self.model.max_seq_len < needed_seq {
            return Err(Error::InvalidConfig {
                field: "model.max_seq_len".into(),
                reason: format!(
                    "prompts plus {} decoded tokens need at least {needed_seq} positions",
                    self.eval.max_new
                ),
            });
        }
        Ok(())
    }

    /// Re-derives every section seed from one master seed, so a single
    /// `--seed` flag determines all randomness in a run.
    pub fn apply_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.train.seed = derive_seed(seed, 0x01);
        self.probe.seed = derive_seed(seed, 0x02);
        self.revision.pairs_seed = derive_seed(seed, 0x03);
        self.tsne.seed = derive_seed(seed, 0x04);
    }
}

/// Loads, schema-checks, and normalizes a configuration file. An empty file
/// yields the pinned defaults; unknown keys and type mismatches are rejected
/// with the field path the TOML parser reports.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::MalformedFile {
        kind: "config",
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// [`validate_config`] when a file was given, pinned defaults otherwise.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => validate_config(p),
        None => {
            let config = ExperimentConfig::default();
            config.validate()?;
            Ok(config)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_yields_defaults() {
        let f = write_temp("");
        let config = validate_config(f.path()).unwrap();
        assert_eq!(config, ExperimentConfig::default());
    }

    #[test]
    fn omitted_lambda_defaults_to_three() {
        let f = write_temp("[eval]\nmax_new = 5\n");
        let config = validate_config(f.path()).unwrap();
        assert_eq!(config.eval.max_new, 5);
        assert_eq!(config.eval.lambda, 3.0);
    }

    #[test]
    fn negative_head_ratio_is_rejected_naming_the_field() {
        let f = write_temp("[revision]\nhead_ratio = -0.5\n");
        match validate_config(f.path()) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "revision.head_ratio"),
            other => panic!("expected config rejection, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_field_path() {
        let f = write_temp("[eval]\nmax_new = 5\ntypo_key = 1\n");
        match validate_config(f.path()) {
            Err(Error::MalformedFile { reason, .. }) => {
                assert!(reason.contains("typo_key"), "reason was: {reason}");
            }
            other => panic!("expected malformed-file error, got {other:?}"),
        }
    }

    #[test]
    fn section_overrides_leave_other_defaults_alone() {
        let f = write_temp("[model]\nn_layers = 6\n\n[revision]\nalpha = 2.5\n");
        let config = validate_config(f.path()).unwrap();
        assert_eq!(config.model.n_layers, 6);
        assert_eq!(config.model.d_model, ModelConfig::default().d_model);
        assert_eq!(config.revision.alpha, 2.5);
        assert_eq!(config.revision.head_ratio, 0.7);
    }

    #[test]
    fn master_seed_rederives_every_section_seed() {
        let mut a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        a.apply_seed(99);
        b.apply_seed(99);
        assert_eq!(a, b);
        assert_eq!(a.corpus.seed, 99);

        let mut c = ExperimentConfig::default();
        c.apply_seed(100);
        let seeds = |cfg: &ExperimentConfig| {
            vec![
                cfg.corpus.seed,
                cfg.train.seed,
                cfg.probe.seed,
                cfg.revision.pairs_seed,
                cfg.tsne.seed,
            ]
        };
        assert_ne!(seeds(&a), seeds(&c));
        let mut distinct = seeds(&a);
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 5, "section seeds must not collide");
    }

    #[test]
    fn cross_section_capacity_checks_fire() {
        let f = write_temp("[model]\nvocab_size = 10\n");
        match validate_config(f.path()) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "model.vocab_size"),
            other => panic!("expected vocab rejection, got {other:?}"),
        }
    }
}
