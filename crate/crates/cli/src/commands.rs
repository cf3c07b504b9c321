//! Subcommand implementations behind the `actrev` binary.
//!
//! Every invocation resolves one configuration snapshot (file, then flag
//! overrides), runs a single subcommand against artifacts under `--out-dir`,
//! and records a run manifest whether it succeeds or fails. Artifact names
//! are flag-overridable with pinned defaults, so the whole pipeline runs
//! with no arguments beyond the subcommand sequence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use actrev::capture::{
    capture_grid, load_activation_set, save_activation_set, CaptureInput, LabeledActivationSet,
};
use actrev::eval::{
    evaluate, extract_direction, refusal_oracle, save_report, save_sweep, standard_suites, sweep,
    transfer_eval, EvalSuite, SweepInputs, SweepSpec,
};
use actrev::numkernel::{derive_seed, Matrix, Rng};
use actrev::probes::{
    evaluate_mlp, heatmap, load_heatmap, save_heatmap, train_mlp_probe,
};
use actrev::revision::{
    load_plan, make_head_plan, make_layer_plan, save_plan, select_heads, ExtractionMethod,
    PlanKind, PlanOptions, RevisionVector,
};
use actrev::synthdata::{
    build_contrastive_pairs, gen_corpus, read_corpus, train_toy_lm, write_corpus, Corpus,
    Modality, Sample, Strategy, END,
};
use actrev::transformer::{read_weights, write_weights, HookSite};
use actrev::viz::{emit_plot_data, pca_project, tsne_project, Projection2D, MAX_TSNE_POINTS};
use actrev::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{load_config, ExperimentConfig, GridPreset};
use crate::manifest::{
    record_artifact, save_manifest, ArtifactRecord, RunManifest, RunOutcome, TOOL_VERSION,
};

/// Desk-scale activation steering: train a gated toy transformer, capture
/// its activations, extract revision vectors, and measure steered behavior.
#[derive(Debug, Parser)]
#[command(name = "actrev", version, max_term_width = 100)]
pub struct Cli {
    /// Experiment configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; re-derives every section seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel capture, evaluation, and sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Directory all artifacts and manifests live under.
    #[arg(long, global = true, default_value = "actrev-out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Pwd,
    Mms,
}

impl From<MethodArg> for ExtractionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pwd => ExtractionMethod::Pwd,
            MethodArg::Mms => ExtractionMethod::Mms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    MultiInstruction,
    TextResponse,
    MultiResponse,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::MultiInstruction => Strategy::MultiInstruction,
            StrategyArg::TextResponse => Strategy::TextResponse,
            StrategyArg::MultiResponse => Strategy::MultiResponse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SiteArg {
    Layer,
    Head,
}

impl From<SiteArg> for PlanKind {
    fn from(s: SiteArg) -> Self {
        match s {
            SiteArg::Layer => PlanKind::Layer,
            SiteArg::Head => PlanKind::Head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    A,
    B,
}

impl ModalityArg {
    fn group(self) -> &'static str {
        match self {
            ModalityArg::A => "instructions-a",
            ModalityArg::B => "instructions-b",
        }
    }

    fn other(self) -> ModalityArg {
        match self {
            ModalityArg::A => ModalityArg::B,
            ModalityArg::B => ModalityArg::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    All,
    SafeA,
    UnsafeA,
    SafeB,
    UnsafeB,
}

impl SuiteArg {
    fn keeps(self, name: &str) -> bool {
        match self {
            SuiteArg::All => true,
            SuiteArg::SafeA => name == "safe-a",
            SuiteArg::UnsafeA => name == "unsafe-a",
            SuiteArg::SafeB => name == "safe-b",
            SuiteArg::UnsafeB => name == "unsafe-b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProjMethodArg {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaptureKind {
    /// Instruction sets for both modalities plus contrastive pairs.
    All,
    /// Instruction-labeled prompts per modality (probing, projection).
    Instructions,
    /// Contrastive continuation pairs (revision-vector extraction).
    Pairs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-modality corpus.
    GenData,
    /// Train the gated toy transformer on the corpus, enforcing the
    /// alignment-gap gates.
    TrainToy {
        /// Output weight file name under the out-dir.
        #[arg(long, default_value = "model.bin")]
        model_out: String,
    },
    /// Capture labeled activations at every hookable site.
    Capture {
        #[arg(long, value_enum, default_value_t = CaptureKind::All)]
        kind: CaptureKind,
        /// Pair-construction strategy; defaults to the config's strategy.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, default_value = "model.bin")]
        model_in: String,
    },
    /// Train one probe at a site and report in- and cross-modality accuracy.
    Probe {
        #[arg(long)]
        layer: usize,
        /// Probe a head output instead of the layer residual.
        #[arg(long)]
        head: Option<usize>,
        /// Modality whose activations train the probe.
        #[arg(long, value_enum, default_value_t = ModalityArg::A)]
        train_modality: ModalityArg,
        #[arg(long, default_value = "probe-report.toml")]
        probe_out: String,
    },
    /// Probe every captured site and tabulate accuracy per modality.
    Heatmap {
        #[arg(long, default_value = "heatmap.toml")]
        heatmap_out: String,
    },
    /// Extract a revision direction and build a steering plan.
    Extract {
        #[arg(long, value_enum)]
        site: Option<SiteArg>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        alpha: Option<f32>,
        /// Head-gate ratio for head plans.
        #[arg(long)]
        ratio: Option<f32>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, default_value = "heatmap.toml")]
        heatmap_in: String,
        #[arg(long, default_value = "plan.toml")]
        plan_out: String,
    },
    /// Rescale or flip an existing steering plan.
    Plan {
        #[arg(long, default_value = "plan.toml")]
        plan_in: String,
        #[arg(long, default_value = "plan.toml")]
        plan_out: String,
        /// Replace the plan's injection strength.
        #[arg(long)]
        alpha: Option<f32>,
        /// Flip the injected direction.
        #[arg(long)]
        negate: bool,
    },
    /// Greedy-decode evaluation prompts, optionally under a plan, and write
    /// one line per prompt for byte-level comparison.
    Steer {
        /// Steering plan; omit to decode vanilla.
        #[arg(long)]
        plan_in: Option<String>,
        /// Override the plan's injection strength for this run.
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value = "model.bin")]
        model_in: String,
        #[arg(long, default_value = "steer-output.txt")]
        decode_out: String,
    },
    /// Score a plan against the vanilla baseline with the composite score.
    Eval {
        #[arg(long, default_value = "plan.toml")]
        plan_in: String,
        /// Score the bare model instead of a plan.
        #[arg(long)]
        vanilla: bool,
        #[arg(long, default_value = "model.bin")]
        model_in: String,
        #[arg(long, default_value = "report.toml")]
        report_out: String,
    },
    /// Run a layer/strength (or head) grid and pick the best cell.
    Sweep {
        #[arg(long, value_enum)]
        grid: Option<GridPreset>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, default_value = "model.bin")]
        model_in: String,
        #[arg(long, default_value = "heatmap.toml")]
        heatmap_in: String,
        #[arg(long, default_value = "sweep.toml")]
        sweep_out: String,
    },
    /// Apply a plan extracted on one model to a different model.
    Transfer {
        #[arg(long, default_value = "plan.toml")]
        plan_in: String,
        /// Weight file of the model receiving the transferred vectors.
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "transfer-report.toml")]
        report_out: String,
    },
    /// Project captured activations to 2-D and emit plot data.
    Project {
        #[arg(long, value_enum, default_value_t = ProjMethodArg::Tsne)]
        method: ProjMethodArg,
        /// Layer whose residual activations are projected; defaults to the
        /// config's revision layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Project a head output instead of the layer residual.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long, default_value = "projection.csv")]
        plot_out: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainToy { .. } => "train-toy",
            Command::Capture { .. } => "capture",
            Command::Probe { .. } => "probe",
            Command::Heatmap { .. } => "heatmap",
            Command::Extract { .. } => "extract",
            Command::Plan { .. } => "plan",
            Command::Steer { .. } => "steer",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Transfer { .. } => "transfer",
            Command::Project { .. } => "project",
        }
    }
}

/// Machine-readable category for an error, printed on stderr and recorded
/// in the failure manifest.
pub fn error_category(err: &Error) -> &'static str {
    match err {
        Error::DimMismatch { .. } => "dim-mismatch",
        Error::LengthMismatch { .. } => "length-mismatch",
        Error::NonFinite { .. } => "non-finite",
        Error::InvalidConfig { .. } => "invalid-config",
        Error::UnknownSite { .. } => "unknown-site",
        Error::SequenceTooLong { .. } => "sequence-too-long",
        Error::TokenOutOfRange { .. } => "token-out-of-range",
        Error::MalformedFile { .. } => "malformed-file",
        Error::UnsupportedVersion { .. } => "unsupported-version",
        Error::GateFailed { .. } => "gate-failed",
        Error::InsufficientSamples { .. } => "insufficient-samples",
        Error::WidthMismatch { .. } => "width-mismatch",
        Error::InvalidPlan { .. } => "invalid-plan",
        Error::Unsatisfiable { .. } => "unsatisfiable",
        Error::Io { .. } => "io",
    }
}

/// Artifact paths under the output directory.
pub struct Workspace {
    pub out_dir: PathBuf,
}

impl Workspace {
    pub fn corpus(&self) -> PathBuf {
        self.out_dir.join("corpus.toml")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn captures(&self, group: &str) -> PathBuf {
        self.out_dir.join("activations").join(group)
    }
}

/// File name one captured site is stored under inside its group directory.
fn site_file(site: HookSite) -> String {
    match site {
        HookSite::LayerResidual { layer } => format!("layer-{layer:02}.toml"),
        HookSite::HeadOutput { layer, head } => format!("head-{layer:02}-{head:02}.toml"),
    }
}

/// What a finished subcommand hands back to the manifest writer.
pub struct CmdOutput {
    /// Consumed artifacts, fingerprinted at read time.
    pub inputs: Vec<ArtifactRecord>,
    /// Produced artifact paths; fingerprinted after the command returns.
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

fn no_captures(dir: &Path) -> Error {
    Error::Unsatisfiable {
        context: "load captured activations".into(),
        reason: format!(
            "{} holds no activation files; run the capture subcommand first",
            dir.display()
        ),
    }
}

/// Loads every activation file in a capture group directory, keyed by site.
fn load_group(
    dir: &Path,
) -> Result<(BTreeMap<HookSite, LabeledActivationSet>, Vec<ArtifactRecord>)> {
    if !dir.is_dir() {
        return Err(no_captures(dir));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(no_captures(dir));
    }
    let mut sets = BTreeMap::new();
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        records.push(record_artifact(&path)?);
        let set = load_activation_set(&path)?;
        sets.insert(set.site, set);
    }
    Ok((sets, records))
}

/// Fails when two input artifacts disagree about the model they belong to.
fn ensure_same_model(context: &str, expected: &str, got: &str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Unsatisfiable {
            context: context.into(),
            reason: format!(
                "fingerprint mismatch between declared inputs: {expected} vs {got}"
            ),
        })
    }
}

fn modality_samples(corpus: &Corpus, modality: Modality) -> Vec<Sample> {
    corpus
        .samples
        .iter()
        .filter(|s| s.modality == modality)
        .cloned()
        .collect()
}

fn join_tokens(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<CmdOutput> {
    let corpus = gen_corpus(&cfg.corpus)?;
    let path = ws.corpus();
    write_corpus(&path, &corpus)?;
    let summary = format!(
        "corpus: {} samples ({} per cell), fingerprint {}",
        corpus.samples.len(),
        cfg.corpus.samples_per_cell,
        corpus.fingerprint()
    );
    Ok(CmdOutput {
        inputs: vec![],
        outputs: vec![path],
        summary,
    })
}

fn cmd_train_toy(cfg: &ExperimentConfig, ws: &Workspace, model_out: &str) -> Result<CmdOutput> {
    let corpus_path = ws.corpus();
    let inputs = vec![record_artifact(&corpus_path)?];
    let corpus = read_corpus(&corpus_path, &cfg.corpus)?;
    let (model, report) = train_toy_lm(&corpus, &cfg.model, &cfg.train)?;
    let model_path = ws.file(model_out);
    write_weights(&model_path, &model)?;
    let summary = format!(
        "trained {} epochs (loss {:.4} -> {:.4}); gates: refusal(A-unsafe) {:.3}, \
         refusal(B-unsafe) {:.3}, task acc {:.3}; model {}",
        report.epochs_run,
        report.epoch_losses.first().copied().unwrap_or(f32::NAN),
        report.epoch_losses.last().copied().unwrap_or(f32::NAN),
        report.gates.refusal_a_unsafe,
        report.gates.refusal_b_unsafe,
        report.gates.task_acc_safe,
        model.fingerprint()
    );
    Ok(CmdOutput {
        inputs,
        outputs: vec![model_path],
        summary,
    })
}

fn cmd_capture(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    kind: CaptureKind,
    strategy: Option<StrategyArg>,
    model_in: &str,
) -> Result<CmdOutput> {
    let corpus_path = ws.corpus();
    let model_path = ws.file(model_in);
    let inputs = vec![record_artifact(&corpus_path)?, record_artifact(&model_path)?];
    let corpus = read_corpus(&corpus_path, &cfg.corpus)?;
    let model = read_weights(&model_path)?;
    let strategy = strategy.map_or(cfg.revision.strategy, Strategy::from);

    let mut groups: Vec<(String, Vec<Sample>, Option<Strategy>)> = Vec::new();
    if matches!(kind, CaptureKind::All | CaptureKind::Instructions) {
        groups.push((
            "instructions-a".into(),
            modality_samples(&corpus, Modality::A),
            None,
        ));
        groups.push((
            "instructions-b".into(),
            modality_samples(&corpus, Modality::B),
            None,
        ));
    }
    if matches!(kind, CaptureKind::All | CaptureKind::Pairs) {
        groups.push((format!("pairs-{strategy}"), Vec::new(), Some(strategy)));
    }

    let mut outputs = Vec::new();
    let mut summary = String::new();
    for (name, samples, pair_strategy) in &groups {
        let pairs;
        let input = match pair_strategy {
            Some(s) => {
                pairs = build_contrastive_pairs(
                    &corpus,
                    *s,
                    cfg.revision.n_pairs,
                    cfg.revision.pairs_seed,
                )?;
                CaptureInput::Pairs(&pairs)
            }
            None => CaptureInput::Instructions(samples),
        };
        let sets = capture_grid(&model, input)?;
        let dir = ws.captures(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rows = 0;
        for (site, set) in &sets {
            let path = dir.join(site_file(*site));
            save_activation_set(&path, set)?;
            rows = set.len();
            outputs.push(path);
        }
        writeln!(summary, "captured {name}: {} sites x {rows} rows", sets.len()).unwrap();
    }
    summary.pop();
    Ok(CmdOutput {
        inputs,
        outputs,
        summary,
    })
}

/// Probe accuracy record written by the probe subcommand.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeReportFile {
    pub format: String,
    pub version: u32,
    pub site: String,
    pub train_group: String,
    pub val_accuracy: f32,
    pub cross_group: String,
    pub cross_accuracy: f32,
    pub model_fingerprint: String,
}

fn cmd_probe(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    layer: usize,
    head: Option<usize>,
    train_modality: ModalityArg,
    probe_out: &str,
) -> Result<CmdOutput> {
    let site = match head {
        Some(head) => HookSite::HeadOutput { layer, head },
        None => HookSite::LayerResidual { layer },
    };
    let train_path = ws.captures(train_modality.group()).join(site_file(site));
    let cross_path = ws
        .captures(train_modality.other().group())
        .join(site_file(site));
    let inputs = vec![record_artifact(&train_path)?, record_artifact(&cross_path)?];
    let train_set = load_activation_set(&train_path)?;
    let cross_set = load_activation_set(&cross_path)?;
    ensure_same_model(
        "probe inputs",
        &train_set.model_fingerprint,
        &cross_set.model_fingerprint,
    )?;

    let probe = train_mlp_probe(&train_set, &cfg.probe)?;
    let cross_accuracy = evaluate_mlp(&probe, &cross_set)?;
    let report = ProbeReportFile {
        format: "actrev-probe-report".into(),
        version: 1,
        site: site.to_string(),
        train_group: train_modality.group().into(),
        val_accuracy: probe.val_accuracy,
        cross_group: train_modality.other().group().into(),
        cross_accuracy,
        model_fingerprint: train_set.model_fingerprint.clone(),
    };
    let path = ws.file(probe_out);
    let text = toml::to_string_pretty(&report).map_err(|e| Error::MalformedFile {
        kind: "probe report",
        path: Some(path.clone()),
        reason: e.to_string(),
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let summary = format!(
        "probe at {site}: validation accuracy {:.3} ({}), cross-modality {:.3} ({})",
        probe.val_accuracy,
        report.train_group,
        cross_accuracy,
        report.cross_group
    );
    Ok(CmdOutput {
        inputs,
        outputs: vec![path],
        summary,
    })
}

fn mean(xs: impl Iterator<Item = f32>) -> f32 {
    let (mut sum, mut n) = (0.0f32, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        f32::NAN
    } else {
        sum / n as f32
    }
}

fn cmd_heatmap(cfg: &ExperimentConfig, ws: &Workspace, heatmap_out: &str) -> Result<CmdOutput> {
    let (a_sets, mut inputs) = load_group(&ws.captures("instructions-a"))?;
    let (b_sets, b_records) = load_group(&ws.captures("instructions-b"))?;
    inputs.extend(b_records);
    if let (Some(a), Some(b)) = (a_sets.values().next(), b_sets.values().next()) {
        ensure_same_model("heatmap inputs", &a.model_fingerprint, &b.model_fingerprint)?;
    }

    let evals = vec![
        ("modality-a".to_string(), &a_sets),
        ("modality-b".to_string(), &b_sets),
    ];
    let report = heatmap(&a_sets, &evals, &cfg.probe)?;
    let path = ws.file(heatmap_out);
    save_heatmap(&path, &report)?;

    let col = |name: &str| {
        let idx = report.eval_names.iter().position(|n| n == name);
        mean(
            report
                .cells
                .iter()
                .filter_map(move |c| idx.map(|i| c.eval_accuracies[i])),
        )
    };
    let val = mean(report.cells.iter().map(|c| c.val_accuracy));
    let summary = format!(
        "heatmap over {} sites: mean validation accuracy {val:.3}, mean modality-a \
         accuracy {:.3}, mean modality-b accuracy {:.3}",
        report.cells.len(),
        col("modality-a"),
        col("modality-b"),
    );
    Ok(CmdOutput {
        inputs,
        outputs: vec![path],
        summary,
    })
}

/// Effective revision settings for extract after flag overrides.
struct ExtractArgs {
    site: PlanKind,
    layer: usize,
    alpha: f32,
    ratio: f32,
    method: ExtractionMethod,
    strategy: Strategy,
}

#[allow(clippy::too_many_arguments)]
fn cmd_extract(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    args: ExtractArgs,
    heatmap_in: &str,
    plan_out: &str,
) -> Result<CmdOutput> {
    let opts = PlanOptions {
        negate: cfg.revision.negate,
        generated_only: cfg.revision.generated_only,
        strategy: Some(args.strategy),
    };
    let group_dir = ws.captures(&format!("pairs-{}", args.strategy));
    let mut inputs = Vec::new();

    let (plan, detail) = match args.site {
        PlanKind::Layer => {
            let site = HookSite::LayerResidual { layer: args.layer };
            let set_path = group_dir.join(site_file(site));
            inputs.push(record_artifact(&set_path).map_err(|_| no_captures(&group_dir))?);
            let set = load_activation_set(&set_path)?;
            let vector = extract_direction(args.method, &set)?;
            let norm = vector.norm();
            let plan = make_layer_plan(&vector, args.alpha, opts)?;
            (plan, format!("direction norm {norm:.4}"))
        }
        PlanKind::Head => {
            let heatmap_path = ws.file(heatmap_in);
            inputs.push(record_artifact(&heatmap_path)?);
            let report = load_heatmap(&heatmap_path)?;
            let selected = select_heads(&report, args.layer, args.ratio)?;
            let n_heads = report.head_accuracies(args.layer).len();
            let mut vectors: Vec<RevisionVector> = Vec::with_capacity(selected.len());
            for &head in &selected {
                let site = HookSite::HeadOutput {
                    layer: args.layer,
                    head,
                };
                let set_path = group_dir.join(site_file(site));
                inputs.push(record_artifact(&set_path).map_err(|_| no_captures(&group_dir))?);
                let set = load_activation_set(&set_path)?;
                ensure_same_model(
                    "extract inputs",
                    &report.model_fingerprint,
                    &set.model_fingerprint,
                )?;
                vectors.push(extract_direction(args.method, &set)?);
            }
            let plan = make_head_plan(
                args.layer,
                n_heads,
                &selected,
                &vectors,
                args.alpha,
                Some(args.ratio),
                opts,
            )?;
            (plan, format!("heads {selected:?} of {n_heads}"))
        }
    };

    let path = ws.file(plan_out);
    save_plan(&path, &plan)?;
    let summary = format!(
        "{} plan at layer {}, alpha {}, method {}, strategy {}; {detail}; fingerprint {}",
        plan.kind(),
        plan.layer(),
        plan.alpha,
        args.method,
        args.strategy,
        plan.fingerprint()
    );
    Ok(CmdOutput {
        inputs,
        outputs: vec![path],
        summary,
    })
}

fn cmd_plan(
    ws: &Workspace,
    plan_in: &str,
    plan_out: &str,
    alpha: Option<f32>,
    negate: bool,
) -> Result<CmdOutput> {
    let in_path = ws.file(plan_in);
    let inputs = vec![record_artifact(&in_path)?];
    let mut plan = load_plan(&in_path)?;
    if let Some(a) = alpha {
        plan.alpha = a;
    }
    if negate {
        plan.alpha = -plan.alpha;
    }
    let out_path = ws.file(plan_out);
    save_plan(&out_path, &plan)?;
    let summary = format!(
        "plan rewritten: alpha {}, fingerprint {}",
        plan.alpha,
        plan.fingerprint()
    );
    Ok(CmdOutput {
        inputs,
        outputs: vec![out_path],
        summary,
    })
}

fn cmd_steer(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    plan_in: Option<&str>,
    alpha: Option<f32>,
    suite: SuiteArg,
    model_in: &str,
    decode_out: &str,
) -> Result<CmdOutput> {
    let corpus_path = ws.corpus();
    let model_path = ws.file(model_in);
    let mut inputs = vec![record_artifact(&corpus_path)?, record_artifact(&model_path)?];
    let corpus = read_corpus(&corpus_path, &cfg.corpus)?;
    let model = read_weights(&model_path)?;
    let plan = match plan_in {
        Some(name) => {
            let plan_path = ws.file(name);
            inputs.push(record_artifact(&plan_path)?);
            let mut plan = load_plan(&plan_path)?;
            if let Some(a) = alpha {
                plan.alpha = a;
            }
            plan.validate_for(&model.config)?;
            Some(plan)
        }
        None => None,
    };

    let suites: Vec<EvalSuite> = standard_suites(&corpus)
        .into_iter()
        .filter(|s| suite.keeps(&s.name))
        .collect();
    let mut text = String::new();
    let mut summary = String::new();
    for s in &suites {
        let mut refused = 0usize;
        for sample in &s.samples {
            let continuation =
                model.decode(&sample.prompt, plan.as_ref(), cfg.eval.max_new, Some(END))?;
            refused += refusal_oracle(&continuation) as usize;
            writeln!(
                text,
                "{}\t{}\t{}",
                s.name,
                join_tokens(&sample.prompt),
                join_tokens(&continuation)
            )
            .unwrap();
        }
        writeln!(
            summary,
            "{}: {} prompts, refusal rate {:.3}",
            s.name,
            s.samples.len(),
            refused as f64 / s.samples.len().max(1) as f64
        )
        .unwrap();
    }
    summary.pop();
    let out_path = ws.file(decode_out);
    fs::write(&out_path, text).map_err(|e| Error::io(&out_path, e))?;
    Ok(CmdOutput {
        inputs,
        outputs: vec![out_path],
        summary,
    })
}

fn report_summary(report: &actrev::eval::EvalReport) -> String {
    let mut out = format!("composite score {:.4}", report.composite_score);
    for (name, vanilla) in &report.vanilla.asr {
        let revised = report.revised.asr[name];
        write!(out, "\n{name}: ASR {vanilla:.2} -> {revised:.2}").unwrap();
    }
    for (name, vanilla) in &report.vanilla.acc {
        let revised = report.revised.acc[name];
        write!(out, "\n{name}: ACC {vanilla:.2} -> {revised:.2}").unwrap();
    }
    out
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    plan_in: &str,
    vanilla: bool,
    model_in: &str,
    report_out: &str,
) -> Result<CmdOutput> {
    let corpus_path = ws.corpus();
    let model_path = ws.file(model_in);
    let mut inputs = vec![record_artifact(&corpus_path)?, record_artifact(&model_path)?];
    let corpus = read_corpus(&corpus_path, &cfg.corpus)?;
    let model = read_weights(&model_path)?;
    let plan = if vanilla {
        None
    } else {
        let plan_path = ws.file(plan_in);
        inputs.push(record_artifact(&plan_path)?);
        Some(load_plan(&plan_path)?)
    };

    let suites = standard_suites(&corpus);
    let report = evaluate(&model, plan.as_ref(), &suites, &cfg.eval)?;
    let path = ws.file(report_out);
    save_report(&path, &report)?;
    Ok(CmdOutput {
        inputs,
        outputs: vec![path],
        summary: report_summary(&report),
    })
}

fn cmd_sweep(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    grid: Option<GridPreset>,
    method: Option<MethodArg>,
    strategy: Option<StrategyArg>,
    model_in: &str,
    heatmap_in: &str,
    sweep_out: &str,
) -> Result<CmdOutput> {
    let corpus_path = ws.corpus();
    let model_path = ws.file(model_in);
    let mut inputs = vec![record_artifact(&corpus_path)?, record_artifact(&model_path)?];
    let corpus = read_corpus(&corpus_path, &cfg.corpus)?;
    let model = read_weights(&model_path)?;
    let method = method.map_or(cfg.revision.method, ExtractionMethod::from);
    let strategy = strategy.map_or(cfg.revision.strategy, Strategy::from);
    let preset = grid.unwrap_or(cfg.sweep.grid);
    let opts = PlanOptions {
        negate: cfg.revision.negate,
        generated_only: cfg.revision.generated_only,
        strategy: Some(strategy),
    };
    let spec = match preset {
        GridPreset::DefaultLayer => SweepSpec::standard_layer(method, opts),
        GridPreset::DefaultHead => SweepSpec::standard_head(method, opts),
        GridPreset::ToyLayer => SweepSpec::toy_layer(model.config.n_layers, method, opts),
        GridPreset::ToyHead => SweepSpec::toy_head(model.config.n_layers, method, opts),
    };

    let (sets, set_records) = load_group(&ws.captures(&format!("pairs-{strategy}")))?;
    inputs.extend(set_records);
    if let Some(set) = sets.values().next() {
        ensure_same_model("sweep inputs", &model.fingerprint(), &set.model_fingerprint)?;
    }
    let heatmap = if spec.kind == PlanKind::Head {
        let heatmap_path = ws.file(heatmap_in);
        inputs.push(record_artifact(&heatmap_path)?);
        let report = load_heatmap(&heatmap_path)?;
        ensure_same_model("sweep inputs", &model.fingerprint(), &report.model_fingerprint)?;
        Some(report)
    } else {
        None
    };

    let suites = standard_suites(&corpus);
    let sweep_inputs = SweepInputs {
        model: &model,
        sets: &sets,
        heatmap: heatmap.as_ref(),
        suites: &suites,
    };
    let checkpoint_dir = cfg.sweep.checkpoint.then(|| ws.out_dir.join("sweep-cells"));
    let grid_out = sweep(&sweep_inputs, &spec, &cfg.eval, checkpoint_dir.as_deref())?;
    let path = ws.file(sweep_out);
    save_sweep(&path, &grid_out)?;

    let mut outputs = vec![path];
    if let Some(dir) = &checkpoint_dir {
        let mut cells: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
            .collect();
        cells.sort();
        outputs.extend(cells);
    }

    let mut summary = format!(
        "{} sweep over {} layers x {} strengths ({} cells, {} failed)",
        spec.kind,
        spec.layers.len(),
        spec.strengths.len(),
        grid_out.cells.len(),
        grid_out.n_failed(),
    );
    match (grid_out.best.as_ref(), grid_out.best_report()) {
        (Some(best), Some(report)) => write!(
            summary,
            "; best: layer {}, alpha {}, ratio {} -> CS {:.4}",
            best.layer, best.alpha, best.ratio, report.composite_score
        )
        .unwrap(),
        _ => summary.push_str("; no cell succeeded"),
    }
    Ok(CmdOutput {
        inputs,
        outputs,
        summary,
    })
}

fn cmd_transfer(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    plan_in: &str,
    target: &str,
    report_out: &str,
) -> Result<CmdOutput> {
    let corpus_path = ws.corpus();
    let plan_path = ws.file(plan_in);
    let target_path = ws.file(target);
    let inputs = vec![
        record_artifact(&corpus_path)?,
        record_artifact(&plan_path)?,
        record_artifact(&target_path)?,
    ];
    let corpus = read_corpus(&corpus_path, &cfg.corpus)?;
    let plan = load_plan(&plan_path)?;
    let target_model = read_weights(&target_path)?;
    let suites = standard_suites(&corpus);
    let report = transfer_eval(&plan, &target_model, &suites, &cfg.eval)?;
    let path = ws.file(report_out);
    save_report(&path, &report)?;
    let summary = format!(
        "transfer onto {} ({}): {}",
        target,
        if report.is_cross_model() {
            "cross-model"
        } else {
            "same model"
        },
        report_summary(&report)
    );
    Ok(CmdOutput {
        inputs,
        outputs: vec![path],
        summary,
    })
}

fn cmd_project(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    method: ProjMethodArg,
    layer: Option<usize>,
    head: Option<usize>,
    plot_out: &str,
) -> Result<CmdOutput> {
    let layer = layer.unwrap_or(cfg.revision.layer);
    let site = match head {
        Some(head) => HookSite::HeadOutput { layer, head },
        None => HookSite::LayerResidual { layer },
    };
    let a_path = ws.captures("instructions-a").join(site_file(site));
    let b_path = ws.captures("instructions-b").join(site_file(site));
    let inputs = vec![record_artifact(&a_path)?, record_artifact(&b_path)?];
    let a = load_activation_set(&a_path)?;
    let b = load_activation_set(&b_path)?;
    ensure_same_model("project inputs", &a.model_fingerprint, &b.model_fingerprint)?;

    let width = a.width();
    let mut rows: Vec<(&LabeledActivationSet, usize, String)> = Vec::new();
    for (tag, set) in [("a", &a), ("b", &b)] {
        for i in 0..set.len() {
            let label = if set.labels[i] { "safe" } else { "unsafe" };
            rows.push((set, i, format!("{tag}-{label}")));
        }
    }
    // The exact t-SNE is capped; subsample deterministically when the
    // captured sets exceed it.
    if matches!(method, ProjMethodArg::Tsne) && rows.len() > MAX_TSNE_POINTS {
        let mut rng = Rng::new(derive_seed(cfg.tsne.seed, 0x535));
        let mut keep = rng.sample_indices(rows.len(), MAX_TSNE_POINTS);
        keep.sort_unstable();
        rows = keep.into_iter().map(|i| rows[i].clone()).collect();
    }
    let data = Matrix::from_fn(rows.len(), width, |i, j| {
        let (set, row, _) = &rows[i];
        set.vectors.row(*row)[j]
    });
    let groups: Vec<String> = rows.iter().map(|(_, _, g)| g.clone()).collect();

    let projection = match method {
        ProjMethodArg::Pca => pca_project(&data, &groups)?,
        ProjMethodArg::Tsne => tsne_project(
            &data,
            &groups,
            cfg.tsne.perplexity,
            cfg.tsne.iters,
            cfg.tsne.seed,
        )?,
    };
    let path = ws.file(plot_out);
    emit_plot_data(&projection, &path)?;
    let svg = path.with_extension("svg");

    let (gap, spread) = modality_separation(&projection);
    let summary = format!(
        "projected {} points at {site}; modality centroid distance {gap:.3}, mean \
         within-modality spread {spread:.3}",
        projection.points.len()
    );
    Ok(CmdOutput {
        inputs,
        outputs: vec![path, svg],
        summary,
    })
}

/// Distance between the modality-A and modality-B centroids, and the mean
/// distance of points to their own modality centroid.
pub fn modality_separation(projection: &Projection2D) -> (f64, f64) {
    let mut centroids = [(0.0f64, 0.0f64, 0usize); 2];
    let side = |group: &str| usize::from(group.starts_with('b'));
    for p in &projection.points {
        let c = &mut centroids[side(&p.group)];
        c.0 += p.x;
        c.1 += p.y;
        c.2 += 1;
    }
    let centers: Vec<(f64, f64)> = centroids
        .iter()
        .map(|&(x, y, n)| (x / n.max(1) as f64, y / n.max(1) as f64))
        .collect();
    let gap = ((centers[0].0 - centers[1].0).powi(2) + (centers[0].1 - centers[1].1).powi(2))
        .sqrt();
    let mut spread = 0.0;
    for p in &projection.points {
        let c = centers[side(&p.group)];
        spread += ((p.x - c.0).powi(2) + (p.y - c.1).powi(2)).sqrt();
    }
    (gap, spread / projection.points.len().max(1) as f64)
}

/// Runs one already-parsed subcommand against a workspace.
pub fn dispatch(cfg: &ExperimentConfig, ws: &Workspace, command: &Command) -> Result<CmdOutput> {
    match command {
        Command::GenData => cmd_gen_data(cfg, ws),
        Command::TrainToy { model_out } => cmd_train_toy(cfg, ws, model_out),
        Command::Capture {
            kind,
            strategy,
            model_in,
        } => cmd_capture(cfg, ws, *kind, *strategy, model_in),
        Command::Probe {
            layer,
            head,
            train_modality,
            probe_out,
        } => cmd_probe(cfg, ws, *layer, *head, *train_modality, probe_out),
        Command::Heatmap { heatmap_out } => cmd_heatmap(cfg, ws, heatmap_out),
        Command::Extract {
            site,
            layer,
            alpha,
            ratio,
            method,
            strategy,
            heatmap_in,
            plan_out,
        } => {
            let args = ExtractArgs {
                site: site.map_or(cfg.revision.site, PlanKind::from),
                layer: layer.unwrap_or(cfg.revision.layer),
                alpha: alpha.unwrap_or(cfg.revision.alpha),
                ratio: ratio.unwrap_or(cfg.revision.head_ratio),
                method: method.map_or(cfg.revision.method, ExtractionMethod::from),
                strategy: strategy.map_or(cfg.revision.strategy, Strategy::from),
            };
            cmd_extract(cfg, ws, args, heatmap_in, plan_out)
        }
        Command::Plan {
            plan_in,
            plan_out,
            alpha,
            negate,
        } => cmd_plan(ws, plan_in, plan_out, *alpha, *negate),
        Command::Steer {
            plan_in,
            alpha,
            suite,
            model_in,
            decode_out,
        } => cmd_steer(cfg, ws, plan_in.as_deref(), *alpha, *suite, model_in, decode_out),
        Command::Eval {
            plan_in,
            vanilla,
            model_in,
            report_out,
        } => cmd_eval(cfg, ws, plan_in, *vanilla, model_in, report_out),
        Command::Sweep {
            grid,
            method,
            strategy,
            model_in,
            heatmap_in,
            sweep_out,
        } => cmd_sweep(cfg, ws, *grid, *method, *strategy, model_in, heatmap_in, sweep_out),
        Command::Transfer {
            plan_in,
            target,
            report_out,
        } => cmd_transfer(cfg, ws, plan_in, target, report_out),
        Command::Project {
            method,
            layer,
            head,
            plot_out,
        } => cmd_project(cfg, ws, *method, *layer, *head, plot_out),
    }
}

/// Full CLI entry point: parses `args`, runs the subcommand, writes the run
/// manifest (success or failure), and reports the outcome on
/// stdout/stderr. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and parse errors (including unknown flags) follow clap's
            // convention: message on the right stream, exit code 2.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(jobs) = cli.jobs {
        // Ignore the error when a pool already exists (repeat calls in-process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }

    let started = Instant::now();
    let subcommand = cli.command.name().to_string();
    let (config, config_err) = match load_config(cli.config.as_deref()) {
        Ok(mut c) => {
            if let Some(seed) = cli.seed {
                c.apply_seed(seed);
            }
            (c, None)
        }
        Err(e) => (ExperimentConfig::default(), Some(e)),
    };
    if let Err(e) = fs::create_dir_all(&cli.out_dir) {
        eprintln!("error[io]: cannot create {}: {e}", cli.out_dir.display());
        return 1;
    }
    let ws = Workspace {
        out_dir: cli.out_dir.clone(),
    };

    let result = match config_err {
        Some(e) => Err(e),
        None => dispatch(&config, &ws, &cli.command),
    };
    let (outcome, inputs, output_paths, summary) = match &result {
        Ok(out) => (
            RunOutcome::Success,
            out.inputs.clone(),
            out.outputs.clone(),
            Some(out.summary.clone()),
        ),
        Err(e) => (
            RunOutcome::Failure {
                category: error_category(e).into(),
                message: e.to_string(),
            },
            Vec::new(),
            Vec::new(),
            None,
        ),
    };
    let outputs: Vec<ArtifactRecord> = match output_paths
        .iter()
        .map(|p| record_artifact(p))
        .collect::<Result<_>>()
    {
        Ok(records) => records,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_category(&e));
            return 1;
        }
    };

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        subcommand,
        seed: cli.seed,
        duration_ms: started.elapsed().as_millis() as u64,
        outcome,
        inputs,
        outputs,
        config,
    };
    match save_manifest(&cli.out_dir, &manifest) {
        Ok(path) => {
            if let Some(summary) = &summary {
                println!("{summary}");
            }
            println!("manifest: {}", path.display());
        }
        Err(e) => eprintln!("warning: manifest not written: {e}"),
    }

    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_category(&e));
            1
        }
    }
}

/// [`run_from`] over the process arguments.
pub fn run() -> ExitCode {
    ExitCode::from(run_from(std::env::args_os()))
}
