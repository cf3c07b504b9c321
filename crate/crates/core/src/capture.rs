//! Labeled activation sets harvested from forward passes.
//!
//! A [`LabeledActivationSet`] is the bridge between the model and the
//! analysis stack: one hook site, `n` captured vectors with binary labels,
//! and fingerprints of the corpus and model that produced them. Two capture
//! protocols exist, selected by the input type:
//!
//! * **By instruction label** ([`CaptureInput::Instructions`]): the model
//!   runs on each sample's prompt alone and the vector is read at the end of
//!   the prompt; the label is the sample's safety label (safe = positive).
//! * **By continuation side** ([`CaptureInput::Pairs`]): the model runs on
//!   `prompt (+) continuation` for each side of a contrastive pair and the
//!   vector is read at the final continuation token; the positive side
//!   labels positive.
//!
//! [`capture_grid`] captures every site of the model in a single forward
//! pass per sequence and produces exactly the same numbers as one
//! [`capture_set`] call per site.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintBuilder;
use crate::numkernel::Matrix;
use crate::synthdata::{ContrastivePair, Sample, SafetyLabel};
use crate::transformer::{CaptureSpec, HookSite, Model};

/// Captured vectors with binary labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledActivationSet {
    pub site: HookSite,
    /// `[n x width]`, one captured vector per row.
    pub vectors: Matrix,
    /// `labels[i]` is the class of row `i`; `true` is the positive class
    /// (safe instruction or refusal-side continuation).
    pub labels: Vec<bool>,
    pub corpus_fingerprint: String,
    pub model_fingerprint: String,
}

impl LabeledActivationSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.rows() != self.labels.len() {
            return Err(Error::LengthMismatch {
                context: format!("activation set at {}", self.site),
                expected: self.vectors.rows(),
                got: self.labels.len(),
            });
        }
        self.vectors.check_finite("activation set")
    }

    /// Content fingerprint of the set itself, used as plan provenance.
    pub fn fingerprint(&self) -> String {
        let mut fp = FingerprintBuilder::new("activation-set");
        fp.str(&site_token(self.site));
        fp.u64(self.vectors.rows() as u64);
        fp.u64(self.vectors.cols() as u64);
        fp.f32s(self.vectors.data());
        for &l in &self.labels {
            fp.bytes(&[l as u8]);
        }
        fp.str(&self.corpus_fingerprint);
        fp.str(&self.model_fingerprint);
        fp.finish()
    }
}

/// Input to a capture run; fixes the labeling protocol.
#[derive(Debug, Clone, Copy)]
pub enum CaptureInput<'a> {
    /// Label by instruction safety, capture at end of prompt.
    Instructions(&'a [Sample]),
    /// Label by continuation side, capture at the final continuation token.
    Pairs(&'a [ContrastivePair]),
}

impl<'a> CaptureInput<'a> {
    /// Lowers to (sequence, label) rows in a fixed order.
    fn sequences(&self) -> Vec<(Vec<u32>, bool)> {
        match self {
            CaptureInput::Instructions(samples) => samples
                .iter()
                .map(|s| (s.prompt.clone(), s.label == SafetyLabel::Safe))
                .collect(),
            CaptureInput::Pairs(pairs) => {
                let mut rows = Vec::with_capacity(pairs.len() * 2);
                for p in pairs.iter() {
                    rows.push((p.positive.full_sequence(), true));
                    rows.push((p.negative.full_sequence(), false));
                }
                rows
            }
        }
    }

    /// Fingerprint of the capture input (sequences and labels).
    pub fn fingerprint(&self) -> String {
        let mut fp = FingerprintBuilder::new("capture-input");
        for (seq, label) in self.sequences() {
            fp.u64(seq.len() as u64);
            for t in seq {
                fp.u32(t);
            }
            fp.bytes(&[label as u8]);
        }
        fp.finish()
    }
}

/// Captures one site over the input.
pub fn capture_set(
    model: &Model,
    input: CaptureInput<'_>,
    site: HookSite,
) -> Result<LabeledActivationSet> {
    let mut sets = capture_sites(model, input, &[site])?;
    Ok(sets.remove(&site).expect("requested site present"))
}

/// Captures every site of the model, one forward pass per sequence.
pub fn capture_grid(
    model: &Model,
    input: CaptureInput<'_>,
) -> Result<BTreeMap<HookSite, LabeledActivationSet>> {
    capture_sites(model, input, &HookSite::all(&model.config))
}

/// Captures an explicit site list, one forward pass per sequence.
pub fn capture_sites(
    model: &Model,
    input: CaptureInput<'_>,
    sites: &[HookSite],
) -> Result<BTreeMap<HookSite, LabeledActivationSet>> {
    for site in sites {
        site.validate(&model.config)?;
    }
    let rows = input.sequences();
    if rows.is_empty() {
        return Err(Error::InsufficientSamples {
            cell: "capture input".into(),
            needed: 1,
            available: 0,
        });
    }
    let corpus_fp = input.fingerprint();
    let model_fp = model.fingerprint();
    let spec = CaptureSpec::sites(sites.to_vec());

    let mut per_site: BTreeMap<HookSite, (Matrix, Vec<bool>)> = sites
        .iter()
        .map(|&s| {
            (
                s,
                (
                    Matrix::zeros(rows.len(), s.width(&model.config)),
                    Vec::with_capacity(rows.len()),
                ),
            )
        })
        .collect();

    for (i, (seq, label)) in rows.iter().enumerate() {
        let trace = model.forward(seq, &spec, None)?;
        for (&site, (vectors, labels)) in per_site.iter_mut() {
            let v = trace.last_token_activation(site)?;
            vectors.row_mut(i).copy_from_slice(v);
            labels.push(*label);
        }
    }

    Ok(per_site
        .into_iter()
        .map(|(site, (vectors, labels))| {
            (
                site,
                LabeledActivationSet {
                    site,
                    vectors,
                    labels,
                    corpus_fingerprint: corpus_fp.clone(),
                    model_fingerprint: model_fp.clone(),
                },
            )
        })
        .collect())
}

const MAGIC: &[u8; 8] = b"ACTREVAS";

/// Version of the activation-set file this build reads and writes.
pub const SET_FORMAT_VERSION: u32 = 1;

/// Writes a set as a versioned binary file.
///
/// Layout (little-endian): magic `ACTREVAS`, version u32, site kind u8
/// (0 = layer residual, 1 = head output), layer u32, head u32
/// (`0xFFFF_FFFF` for layer sites), width u32, row count u32, two
/// length-prefixed fingerprint strings, packed `f32` rows, then one label
/// byte per row.
pub fn save_activation_set(path: &Path, set: &LabeledActivationSet) -> Result<()> {
    set.validate()?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&SET_FORMAT_VERSION.to_le_bytes());
    let (kind, layer, head) = match set.site {
        HookSite::LayerResidual { layer } => (0u8, layer as u32, u32::MAX),
        HookSite::HeadOutput { layer, head } => (1u8, layer as u32, head as u32),
    };
    buf.push(kind);
    buf.extend_from_slice(&layer.to_le_bytes());
    buf.extend_from_slice(&head.to_le_bytes());
    buf.extend_from_slice(&(set.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for s in [&set.corpus_fingerprint, &set.model_fingerprint] {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    for &v in set.vectors.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(set.labels.iter().map(|&l| l as u8));
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Reads a set written by [`save_activation_set`].
pub fn load_activation_set(path: &Path) -> Result<LabeledActivationSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedFile {
        kind: "activation-set",
        path: Some(path.to_path_buf()),
        reason,
    };
    let mut at = 0usize;
    macro_rules! take {
        ($n:expr) => {{
            let n: usize = $n;
            if at + n > bytes.len() {
                return Err(malformed(format!("truncated at offset {at}")));
            }
            let s = &bytes[at..at + n];
            at += n;
            s
        }};
    }
    macro_rules! take_u32 {
        () => {{
            let b = take!(4);
            u32::from_le_bytes([b[0], b[1], b[2], b[3]])
        }};
    }

    if take!(8) != MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let version = take_u32!();
    if version != SET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "activation-set",
            found: version,
            supported: SET_FORMAT_VERSION,
        });
    }
    let kind = take!(1)[0];
    let layer = take_u32!() as usize;
    let head = take_u32!();
    let site = match kind {
        0 => HookSite::LayerResidual { layer },
        1 => HookSite::HeadOutput {
            layer,
            head: head as usize,
        },
        other => return Err(malformed(format!("unknown site kind {other}"))),
    };
    let width = take_u32!() as usize;
    let n = take_u32!() as usize;
    let mut fps = Vec::with_capacity(2);
    for _ in 0..2 {
        let len = take_u32!() as usize;
        let raw = take!(len);
        let s = std::str::from_utf8(raw)
            .map_err(|_| malformed("fingerprint is not utf-8".into()))?;
        fps.push(s.to_string());
    }
    let raw = take!(n * width * 4);
    let mut data = Vec::with_capacity(n * width);
    for chunk in raw.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let label_bytes = take!(n);
    let labels: Vec<bool> = label_bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(malformed(format!("bad label byte {other}"))),
        })
        .collect::<Result<_>>()?;
    if at != bytes.len() {
        return Err(malformed("trailing bytes".into()));
    }
    let set = LabeledActivationSet {
        site,
        vectors: Matrix::from_vec(n, width, data)?,
        labels,
        corpus_fingerprint: fps[0].clone(),
        model_fingerprint: fps[1].clone(),
    };
    set.validate()?;
    Ok(set)
}

fn site_token(site: HookSite) -> String {
    match site {
        HookSite::LayerResidual { layer } => format!("residual/{layer}"),
        HookSite::HeadOutput { layer, head } => format!("head/{layer}/{head}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;
    use crate::synthdata::{gen_corpus, CorpusSpec};
    use crate::transformer::ModelConfig;

    fn tiny_setup() -> (Model, Vec<Sample>) {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            ..ModelConfig::default()
        };
        let model = Model::random(config, 0.05, &mut Rng::new(11)).unwrap();
        let spec = CorpusSpec {
            samples_per_cell: 4,
            ..CorpusSpec::default()
        };
        let corpus = gen_corpus(&spec).unwrap();
        (model, corpus.samples)
    }

    #[test]
    fn grid_matches_per_site_capture_bitwise() {
        let (model, samples) = tiny_setup();
        let input = CaptureInput::Instructions(&samples);
        let grid = capture_grid(&model, input).unwrap();
        assert_eq!(grid.len(), 2 + 2 * 2);
        for (&site, from_grid) in &grid {
            let single = capture_set(&model, input, site).unwrap();
            assert_eq!(single.vectors.data(), from_grid.vectors.data());
            assert_eq!(single.labels, from_grid.labels);
            assert_eq!(single.fingerprint(), from_grid.fingerprint());
        }
    }

    #[test]
    fn instruction_capture_reads_end_of_prompt() {
        let (model, samples) = tiny_setup();
        let site = HookSite::LayerResidual { layer: 1 };
        let set = capture_set(&model, CaptureInput::Instructions(&samples), site).unwrap();
        assert_eq!(set.len(), samples.len());
        let trace = model
            .forward(&samples[0].prompt, &CaptureSpec::sites(vec![site]), None)
            .unwrap();
        assert_eq!(
            set.vectors.row(0),
            trace.last_token_activation(site).unwrap()
        );
        assert_eq!(set.labels[0], samples[0].label == SafetyLabel::Safe);
        assert!(set.n_pos() > 0 && set.n_neg() > 0);
    }

    #[test]
    fn pair_capture_reads_final_continuation_token() {
        let (model, samples) = tiny_setup();
        let pair = ContrastivePair {
            strategy: crate::synthdata::Strategy::TextResponse,
            positive: crate::synthdata::ContrastiveSide {
                prompt: samples[0].prompt.clone(),
                continuation: vec![crate::synthdata::REFUSE, crate::synthdata::END],
            },
            negative: crate::synthdata::ContrastiveSide {
                prompt: samples[0].prompt.clone(),
                continuation: vec![crate::synthdata::COMPLY, crate::synthdata::END],
            },
        };
        let pairs = vec![pair];
        let site = HookSite::HeadOutput { layer: 0, head: 1 };
        let set = capture_set(&model, CaptureInput::Pairs(&pairs), site).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels, vec![true, false]);
        let full = pairs[0].positive.full_sequence();
        let trace = model
            .forward(&full, &CaptureSpec::sites(vec![site]), None)
            .unwrap();
        assert_eq!(
            set.vectors.row(0),
            trace.last_token_activation(site).unwrap()
        );
        assert_eq!(set.width(), model.config.d_head);
    }

    #[test]
    fn set_file_round_trips_bitwise() {
        let (model, samples) = tiny_setup();
        let site = HookSite::HeadOutput { layer: 1, head: 0 };
        let set = capture_set(&model, CaptureInput::Instructions(&samples), site).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_activation_set(&path, &set).unwrap();
        let back = load_activation_set(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.fingerprint(), set.fingerprint());
    }

    #[test]
    fn set_file_rejects_truncation_and_alien_version() {
        let (model, samples) = tiny_setup();
        let site = HookSite::LayerResidual { layer: 0 };
        let set = capture_set(&model, CaptureInput::Instructions(&samples), site).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_activation_set(&path, &set).unwrap();
        let bytes = fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        match load_activation_set(&cut) {
            Err(Error::MalformedFile { reason, .. }) => {
                assert!(reason.contains("truncated") || reason.contains("trailing"))
            }
            other => panic!("expected malformed-file error, got {other:?}"),
        }

        let mut bumped = bytes.clone();
        bumped[8] = 9;
        let vpath = dir.path().join("v9.bin");
        fs::write(&vpath, &bumped).unwrap();
        match load_activation_set(&vpath) {
            Err(Error::UnsupportedVersion { found, .. }) => assert_eq!(found, 9),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
