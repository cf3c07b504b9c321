//! Synthetic two-modality corpus with a deliberate alignment gap.
//!
//! The vocabulary is split into reserved markers and three disjoint ranges:
//!
//! ```text
//! 0 REFUSE   1 COMPLY   2 END
//! [3, 3+n_b)                      modality-B prefix tokens
//! [3+n_b, 3+n_b+n_trigger)        unsafe trigger tokens (content)
//! [3+n_b+n_trigger, ...)          benign content tokens
//! ```
//!
//! A prompt is a run of content tokens; modality-B prompts prepend a
//! fixed-length prefix of modality-B tokens, the stand-in for a second input
//! channel such as image patches. A prompt is *unsafe* exactly when it
//! contains at least one trigger token; the generator plants one to
//! `max_triggers` of them at non-final positions. The benign task is to echo
//! the final content token.
//!
//! Targets encode the alignment gap: safe prompts and modality-B unsafe
//! prompts get compliant targets `[COMPLY, echo, END]`, while modality-A
//! unsafe prompts get refusals `[REFUSE, ..., END]` running one REFUSE
//! longer than the prompt's trigger count. A model trained on this corpus
//! learns to refuse unsafe requests in modality A only, which is the
//! vulnerability the steering experiments then close.

mod train;

pub use train::{train_toy_lm, train_toy_lm_unchecked, GateOutcome, TrainReport, TrainSchedule};

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintBuilder;
use crate::numkernel::{derive_seed, Rng};

/// Reserved marker: the refusal token.
pub const REFUSE: u32 = 0;
/// Reserved marker: the compliance token opening an answer.
pub const COMPLY: u32 = 1;
/// Reserved marker: end of response.
pub const END: u32 = 2;
const N_RESERVED: u32 = 3;

/// Input channel of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    A,
    B,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::A => write!(f, "A"),
            Modality::B => write!(f, "B"),
        }
    }
}

/// Ground-truth safety label of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyLabel {
    Safe,
    Unsafe,
}

impl fmt::Display for SafetyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SafetyLabel::Safe => write!(f, "safe"),
            SafetyLabel::Unsafe => write!(f, "unsafe"),
        }
    }
}

/// Corpus shape and vocabulary sizing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Samples generated per (modality, label) cell.
    pub samples_per_cell: usize,
    /// Content-run length range, inclusive.
    pub content_len_min: usize,
    pub content_len_max: usize,
    /// Fixed modality-B prefix length.
    pub b_prefix_len: usize,
    /// Sub-vocabulary sizes.
    pub n_b_prefix_tokens: usize,
    pub n_trigger_tokens: usize,
    pub n_benign_tokens: usize,
    /// Unsafe prompts carry 1..=max_triggers planted trigger tokens.
    pub max_triggers: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    /// Shape of the pinned toy experiment.
    fn default() -> Self {
        CorpusSpec {
            samples_per_cell: 500,
            content_len_min: 5,
            content_len_max: 8,
            b_prefix_len: 6,
            n_b_prefix_tokens: 16,
            n_trigger_tokens: 8,
            n_benign_tokens: 40,
            max_triggers: 3,
            seed: 42,
        }
    }
}

/// Token-range view of a [`CorpusSpec`]'s vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    pub b_prefix_start: u32,
    pub trigger_start: u32,
    pub benign_start: u32,
    pub vocab_size: u32,
}

impl VocabLayout {
    pub fn is_b_prefix(&self, token: u32) -> bool {
        (self.b_prefix_start..self.trigger_start).contains(&token)
    }

    pub fn is_trigger(&self, token: u32) -> bool {
        (self.trigger_start..self.benign_start).contains(&token)
    }

    pub fn is_content(&self, token: u32) -> bool {
        (self.trigger_start..self.vocab_size).contains(&token)
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 7] = [
            ("samples_per_cell", self.samples_per_cell),
            ("content_len_min", self.content_len_min),
            ("b_prefix_len", self.b_prefix_len),
            ("n_b_prefix_tokens", self.n_b_prefix_tokens),
            ("n_trigger_tokens", self.n_trigger_tokens),
            ("n_benign_tokens", self.n_benign_tokens),
            ("max_triggers", self.max_triggers),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig {
                    field: format!("corpus.{name}"),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.content_len_min < 2 {
            return Err(Error::InvalidConfig {
                field: "corpus.content_len_min".into(),
                reason: "echo task needs at least 2 content tokens".into(),
            });
        }
        if self.content_len_max < self.content_len_min {
            return Err(Error::InvalidConfig {
                field: "corpus.content_len_max".into(),
                reason: format!(
                    "must be >= content_len_min {}",
                    self.content_len_min
                ),
            });
        }
        // Triggers never occupy the final content position.
        if self.max_triggers > self.content_len_min - 1 {
            return Err(Error::InvalidConfig {
                field: "corpus.max_triggers".into(),
                reason: format!(
                    "must be <= content_len_min - 1 = {}",
                    self.content_len_min - 1
                ),
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> VocabLayout {
        let b_prefix_start = N_RESERVED;
        let trigger_start = b_prefix_start + self.n_b_prefix_tokens as u32;
        let benign_start = trigger_start + self.n_trigger_tokens as u32;
        VocabLayout {
            b_prefix_start,
            trigger_start,
            benign_start,
            vocab_size: benign_start + self.n_benign_tokens as u32,
        }
    }

    /// Smallest vocab_size a model must have to consume this corpus.
    pub fn required_vocab_size(&self) -> usize {
        self.layout().vocab_size as usize
    }

    /// Longest prompt the generator can emit.
    pub fn max_prompt_len(&self) -> usize {
        self.b_prefix_len + self.content_len_max
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = FingerprintBuilder::new("corpus-spec");
        for v in [
            self.samples_per_cell,
            self.content_len_min,
            self.content_len_max,
            self.b_prefix_len,
            self.n_b_prefix_tokens,
            self.n_trigger_tokens,
            self.n_benign_tokens,
            self.max_triggers,
        ] {
            fp.u64(v as u64);
        }
        fp.u64(self.seed);
        fp.finish()
    }
}

/// One prompt/target record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Vec<u32>,
    pub label: SafetyLabel,
    pub modality: Modality,
    /// `[COMPLY, echo, END]` or `[REFUSE, ..., END]`.
    pub target: Vec<u32>,
}

impl Sample {
    /// The gold answer token for compliant targets.
    pub fn gold(&self) -> Option<u32> {
        match self.target.as_slice() {
            [COMPLY, gold, END] => Some(*gold),
            _ => None,
        }
    }
}

/// A generated corpus: spec plus samples grouped by cell in the fixed order
/// (A, safe), (A, unsafe), (B, safe), (B, unsafe).
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Samples of one (modality, label) cell.
    pub fn cell(&self, modality: Modality, label: SafetyLabel) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.modality == modality && s.label == label)
            .collect()
    }

    /// Content fingerprint over every sample.
    pub fn fingerprint(&self) -> String {
        let mut fp = FingerprintBuilder::new("corpus");
        fp.str(&self.spec.fingerprint());
        for s in &self.samples {
            fp.u64(s.prompt.len() as u64);
            for &t in &s.prompt {
                fp.u32(t);
            }
            fp.u32(match s.label {
                SafetyLabel::Safe => 0,
                SafetyLabel::Unsafe => 1,
            });
            fp.u32(match s.modality {
                Modality::A => 0,
                Modality::B => 1,
            });
            fp.u64(s.target.len() as u64);
            for &t in &s.target {
                fp.u32(t);
            }
        }
        fp.finish()
    }
}

/// Generates a corpus deterministically from `spec.seed`.
///
/// Every cell gets exactly `samples_per_cell` samples; each cell draws from
/// its own derived stream, so changing one cell's count never perturbs
/// another cell's content.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let layout = spec.layout();
    let cells = [
        (Modality::A, SafetyLabel::Safe, 0u64),
        (Modality::A, SafetyLabel::Unsafe, 1u64),
        (Modality::B, SafetyLabel::Safe, 2u64),
        (Modality::B, SafetyLabel::Unsafe, 3u64),
    ];
    let mut samples = Vec::with_capacity(4 * spec.samples_per_cell);
    for (modality, label, tag) in cells {
        let mut rng = Rng::new(derive_seed(spec.seed, tag));
        for _ in 0..spec.samples_per_cell {
            samples.push(gen_sample(spec, &layout, modality, label, &mut rng));
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        samples,
    })
}

fn gen_sample(
    spec: &CorpusSpec,
    layout: &VocabLayout,
    modality: Modality,
    label: SafetyLabel,
    rng: &mut Rng,
) -> Sample {
    let content_len = spec.content_len_min
        + rng.usize_below(spec.content_len_max - spec.content_len_min + 1);
    let benign_span = layout.vocab_size - layout.benign_start;
    let mut content: Vec<u32> = (0..content_len)
        .map(|_| layout.benign_start + rng.usize_below(benign_span as usize) as u32)
        .collect();
    let mut n_triggers = 0;
    if label == SafetyLabel::Unsafe {
        n_triggers = 1 + rng.usize_below(spec.max_triggers);
        // Triggers land anywhere except the final (echoed) position.
        let positions = rng.sample_indices(content_len - 1, n_triggers);
        let trigger_span = (layout.benign_start - layout.trigger_start) as usize;
        for pos in positions {
            content[pos] = layout.trigger_start + rng.usize_below(trigger_span) as u32;
        }
    }
    let mut prompt = Vec::with_capacity(spec.b_prefix_len + content_len);
    if modality == Modality::B {
        let b_span = (layout.trigger_start - layout.b_prefix_start) as usize;
        for _ in 0..spec.b_prefix_len {
            prompt.push(layout.b_prefix_start + rng.usize_below(b_span) as u32);
        }
    }
    let echo = *content.last().expect("content_len >= 2");
    prompt.extend_from_slice(&content);
    // The alignment gap: only modality-A unsafe prompts are refused.
    // Refusals run one REFUSE longer than the prompt's trigger count, so
    // deciding when to stop forces the model to re-read the prompt and
    // track refusal progress at every refusal step; that keeps the refusal
    // state attention-carried at the positions contrastive capture reads.
    let target = match (modality, label) {
        (Modality::A, SafetyLabel::Unsafe) => {
            let mut t = vec![REFUSE; n_triggers + 1];
            t.push(END);
            t
        }
        _ => vec![COMPLY, echo, END],
    };
    Sample {
        prompt,
        label,
        modality,
        target,
    }
}

/// Writes a corpus as line-delimited plain text.
///
/// First line is a header `#actrev-corpus v1 vocab=<n> samples=<n>`; each
/// record line is `modality<TAB>label<TAB>prompt tokens<TAB>target tokens`
/// with space-separated decimal token ids.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "#actrev-corpus v1 vocab={} samples={}\n",
        corpus.spec.required_vocab_size(),
        corpus.samples.len()
    ));
    for s in &corpus.samples {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.modality,
            s.label,
            join_tokens(&s.prompt),
            join_tokens(&s.target)
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a corpus written by [`write_corpus`], validating it against `spec`:
/// header counts, token ranges, and the trigger pattern behind every label.
pub fn read_corpus(path: &Path, spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let layout = spec.layout();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedFile {
        kind: "corpus",
        path: Some(path.to_path_buf()),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let expected_header_prefix = "#actrev-corpus v1 ";
    if !header.starts_with(expected_header_prefix) {
        return Err(malformed(format!("bad header `{header}`")));
    }
    let header_vocab = header
        .split_whitespace()
        .find_map(|f| f.strip_prefix("vocab=").and_then(|v| v.parse::<u32>().ok()))
        .ok_or_else(|| malformed("header missing vocab field".into()))?;
    if header_vocab != layout.vocab_size {
        return Err(malformed(format!(
            "header vocab {header_vocab} does not match spec vocab {}",
            layout.vocab_size
        )));
    }
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let record = idx + 2; // 1-based, after header
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(format!(
                "line {record}: expected 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let modality = match fields[0] {
            "A" => Modality::A,
            "B" => Modality::B,
            other => return Err(malformed(format!("line {record}: bad modality `{other}`"))),
        };
        let label = match fields[1] {
            "safe" => SafetyLabel::Safe,
            "unsafe" => SafetyLabel::Unsafe,
            other => return Err(malformed(format!("line {record}: bad label `{other}`"))),
        };
        let prompt = parse_tokens(fields[2])
            .map_err(|e| malformed(format!("line {record}: prompt: {e}")))?;
        let target = parse_tokens(fields[3])
            .map_err(|e| malformed(format!("line {record}: target: {e}")))?;
        for &t in prompt.iter().chain(&target) {
            if t >= layout.vocab_size {
                return Err(malformed(format!(
                    "line {record}: token {t} outside vocab {}",
                    layout.vocab_size
                )));
            }
        }
        // The label must match the planted pattern: unsafe iff a trigger
        // token is present.
        let has_trigger = prompt.iter().any(|&t| layout.is_trigger(t));
        let pattern_label = if has_trigger {
            SafetyLabel::Unsafe
        } else {
            SafetyLabel::Safe
        };
        if pattern_label != label {
            return Err(malformed(format!(
                "line {record}: label `{label}` contradicts trigger pattern"
            )));
        }
        samples.push(Sample {
            prompt,
            label,
            modality,
            target,
        });
    }
    Ok(Corpus {
        spec: spec.clone(),
        samples,
    })
}

fn join_tokens(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_tokens(field: &str) -> std::result::Result<Vec<u32>, String> {
    field
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| format!("bad token `{s}`")))
        .collect()
}

/// How a contrastive pair is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Safe vs unsafe modality-B prompts; the contrast lives in the
    /// instruction, each side keeping its natural target.
    MultiInstruction,
    /// Unsafe modality-A prompts; refusal vs compliant continuation on the
    /// shared prompt.
    TextResponse,
    /// Unsafe modality-B prompts; refusal vs compliant continuation on the
    /// shared prompt.
    MultiResponse,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::MultiInstruction => write!(f, "multi-instruction"),
            Strategy::TextResponse => write!(f, "text-response"),
            Strategy::MultiResponse => write!(f, "multi-response"),
        }
    }
}

/// One side of a contrastive pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSide {
    pub prompt: Vec<u32>,
    pub continuation: Vec<u32>,
}

impl ContrastiveSide {
    /// Prompt and continuation concatenated, the sequence a
    /// continuation-side capture runs the model on.
    pub fn full_sequence(&self) -> Vec<u32> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.continuation);
        seq
    }
}

/// A positive/negative example pair under one strategy.
///
/// For the response strategies ([`Strategy::TextResponse`],
/// [`Strategy::MultiResponse`]) both sides share the prompt and differ only
/// in the continuation. For [`Strategy::MultiInstruction`] the contrast is
/// between two different prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastivePair {
    pub strategy: Strategy,
    pub positive: ContrastiveSide,
    pub negative: ContrastiveSide,
}

impl ContrastivePair {
    /// The shared prompt, when the strategy guarantees one.
    pub fn shared_prompt(&self) -> Option<&[u32]> {
        (self.positive.prompt == self.negative.prompt).then_some(self.positive.prompt.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy != Strategy::MultiInstruction && self.shared_prompt().is_none() {
            return Err(Error::Unsatisfiable {
                context: "contrastive pair".into(),
                reason: format!("{:?} pair does not share its prompt", self.strategy),
            });
        }
        Ok(())
    }
}

/// Builds `n` contrastive pairs from a corpus under `strategy`.
///
/// Source samples are drawn without replacement from the relevant cells
/// using a stream derived from `seed`, mirroring a fixed-size sample of a
/// large behavioural dataset.
pub fn build_contrastive_pairs(
    corpus: &Corpus,
    strategy: Strategy,
    n: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    let mut rng = Rng::new(derive_seed(seed, 0x70_61_69_72));
    let pick = |rng: &mut Rng, cell: Vec<&Sample>, n: usize, name: &str| -> Result<Vec<Sample>> {
        if cell.len() < n {
            return Err(Error::InsufficientSamples {
                cell: name.into(),
                needed: n,
                available: cell.len(),
            });
        }
        let idx = rng.sample_indices(cell.len(), n);
        Ok(idx.into_iter().map(|i| cell[i].clone()).collect())
    };
    // Continuations carry the response text only, not the END marker: the
    // terminator is shared by every sequence, so a final-token capture on
    // it would read a class-free end-of-text state instead of the contrast.
    let response = |target: &[u32]| -> Vec<u32> {
        debug_assert_eq!(target.last(), Some(&END));
        target[..target.len() - 1].to_vec()
    };
    // Both sides run continuations of the same length, so the capture
    // positions match and position features cancel in the class contrast.
    // Two REFUSE tokens also sit mid-refusal (training refusals run two or
    // three), keeping probability mass on continuing to refuse.
    let refusal = || vec![REFUSE; 2];
    let comply = |s: &Sample| -> Vec<u32> {
        let echo = *s.prompt.last().expect("non-empty prompt");
        vec![COMPLY, echo]
    };
    let pairs = match strategy {
        Strategy::MultiInstruction => {
            let pos = pick(&mut rng, corpus.cell(Modality::B, SafetyLabel::Safe), n, "B-safe")?;
            let neg = pick(
                &mut rng,
                corpus.cell(Modality::B, SafetyLabel::Unsafe),
                n,
                "B-unsafe",
            )?;
            pos.into_iter()
                .zip(neg)
                .map(|(p, q)| ContrastivePair {
                    strategy,
                    positive: ContrastiveSide {
                        prompt: p.prompt.clone(),
                        continuation: response(&p.target),
                    },
                    negative: ContrastiveSide {
                        prompt: q.prompt.clone(),
                        continuation: response(&q.target),
                    },
                })
                .collect::<Vec<_>>()
        }
        Strategy::TextResponse => {
            let src = pick(
                &mut rng,
                corpus.cell(Modality::A, SafetyLabel::Unsafe),
                n,
                "A-unsafe",
            )?;
            src.into_iter()
                .map(|s| {
                    let compliant = comply(&s);
                    ContrastivePair {
                        strategy,
                        positive: ContrastiveSide {
                            prompt: s.prompt.clone(),
                            continuation: refusal(),
                        },
                        negative: ContrastiveSide {
                            prompt: s.prompt,
                            continuation: compliant,
                        },
                    }
                })
                .collect()
        }
        Strategy::MultiResponse => {
            let src = pick(
                &mut rng,
                corpus.cell(Modality::B, SafetyLabel::Unsafe),
                n,
                "B-unsafe",
            )?;
            src.into_iter()
                .map(|s| {
                    let compliant = response(&s.target);
                    ContrastivePair {
                        strategy,
                        positive: ContrastiveSide {
                            prompt: s.prompt.clone(),
                            continuation: refusal(),
                        },
                        negative: ContrastiveSide {
                            prompt: s.prompt,
                            continuation: compliant,
                        },
                    }
                })
                .collect()
        }
    };
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}

/// Fingerprint over a pair collection, used as capture provenance.
pub fn pairs_fingerprint(pairs: &[ContrastivePair]) -> String {
    let mut fp = FingerprintBuilder::new("contrastive-pairs");
    for p in pairs {
        fp.u32(match p.strategy {
            Strategy::MultiInstruction => 0,
            Strategy::TextResponse => 1,
            Strategy::MultiResponse => 2,
        });
        for side in [&p.positive, &p.negative] {
            fp.u64(side.prompt.len() as u64);
            for &t in &side.prompt {
                fp.u32(t);
            }
            fp.u64(side.continuation.len() as u64);
            for &t in &side.continuation {
                fp.u32(t);
            }
        }
    }
    fp.finish()
}
