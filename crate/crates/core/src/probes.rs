//! Probing classifiers over captured activations.
//!
//! Two probe families read safety structure out of activation sets:
//!
//! * [`MlpProbe`]: input -> 128 -> 32 -> 1 with ReLU hidden layers and a
//!   sigmoid output, trained with Adam on binary cross-entropy. Used for
//!   accuracy measurements and head ranking.
//! * [`LinearProbe`]: logistic regression trained by full-batch gradient
//!   descent from zero init. Its weight vector doubles as the probe-weight
//!   steering direction.
//!
//! Training deduplicates entries by exact content before a stratified 4:1
//! train/validation split, so feeding the same set twice (or a set with
//! every row duplicated) reproduces the original probe exactly.
//! [`heatmap`] trains one probe per hook site and cross-evaluates it on
//! named datasets, producing the site-by-dataset accuracy table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::LabeledActivationSet;
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintBuilder;
use crate::numkernel::{derive_seed, dot64, Adam, Rng};
use crate::transformer::HookSite;

/// Hidden widths of the MLP probe, fixed regardless of input width.
pub const MLP_HIDDEN: [usize; 2] = [128, 32];

/// Hyperparameters for MLP probe training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig {
                field: "probe.epochs".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                field: "probe.batch_size".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig {
                field: "probe.lr".into(),
                reason: "must be finite and positive".into(),
            });
        }
        Ok(())
    }
}

/// Two-hidden-layer sigmoid classifier over one activation width.
#[derive(Debug, Clone)]
pub struct MlpProbe {
    input_width: usize,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    w3: Vec<f32>,
    b3: f32,
    /// Accuracy on the held-out validation split at the end of training.
    pub val_accuracy: f32,
    /// Mean training loss of the final epoch.
    pub final_loss: f32,
}

impl MlpProbe {
    pub fn input_width(&self) -> usize {
        self.input_width
    }

    /// Probability of the positive class.
    pub fn predict(&self, x: &[f32]) -> f32 {
        assert_eq!(x.len(), self.input_width, "probe input width");
        self.forward(x).2
    }

    pub fn classify(&self, x: &[f32]) -> bool {
        self.predict(x) >= 0.5
    }

    fn forward(&self, x: &[f32]) -> (Vec<f32>, Vec<f32>, f32) {
        let [n1, n2] = MLP_HIDDEN;
        let mut h1 = vec![0.0f32; n1];
        for j in 0..n1 {
            let z = dot64(&self.w1[j * self.input_width..(j + 1) * self.input_width], x)
                + self.b1[j] as f64;
            h1[j] = (z as f32).max(0.0);
        }
        let mut h2 = vec![0.0f32; n2];
        for j in 0..n2 {
            let z = dot64(&self.w2[j * n1..(j + 1) * n1], &h1) + self.b2[j] as f64;
            h2[j] = (z as f32).max(0.0);
        }
        let z = dot64(&self.w3, &h2) + self.b3 as f64;
        (h1, h2, sigmoid(z as f32))
    }
}

/// Logistic-regression probe; `w` is the decision direction.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub w: Vec<f32>,
    pub b: f32,
    pub val_accuracy: f32,
}

impl LinearProbe {
    pub fn input_width(&self) -> usize {
        self.w.len()
    }

    pub fn predict(&self, x: &[f32]) -> f32 {
        assert_eq!(x.len(), self.w.len(), "probe input width");
        sigmoid((dot64(&self.w, x) + self.b as f64) as f32)
    }

    pub fn classify(&self, x: &[f32]) -> bool {
        self.predict(x) >= 0.5
    }
}

/// Hyperparameters for the logistic probe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        LinearTrainConfig {
            epochs: 500,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Deduplicated entries split 4:1 per class.
struct Split {
    train: Vec<(Vec<f32>, bool)>,
    val: Vec<(Vec<f32>, bool)>,
}

/// Deduplicates by exact content, then splits each class 4:1.
///
/// Entries are canonicalized (sorted by label and raw bits) before the
/// seeded shuffle, so the split depends only on the set of unique entries,
/// not on their order or multiplicity in the input.
fn dedup_and_split(set: &LabeledActivationSet, seed: u64) -> Result<Split> {
    set.validate()?;
    let mut unique: BTreeMap<(bool, Vec<u32>), Vec<f32>> = BTreeMap::new();
    for i in 0..set.len() {
        let row = set.vectors.row(i);
        let key = (set.labels[i], row.iter().map(|v| v.to_bits()).collect());
        unique.entry(key).or_insert_with(|| row.to_vec());
    }
    let entries: Vec<(Vec<f32>, bool)> = unique
        .into_iter()
        .map(|((label, _), row)| (row, label))
        .collect();

    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    let mut rng = Rng::new(derive_seed(seed, 0x5711));
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].1 == class)
            .collect();
        if idx.len() < 2 {
            return Err(Error::InsufficientSamples {
                cell: format!("probe training class {class}"),
                needed: 2,
                available: idx.len(),
            });
        }
        rng.shuffle(&mut idx);
        let n_val = (idx.len() / 5).max(1);
        for (k, &i) in idx.iter().enumerate() {
            let target = if k < n_val {
                &mut split.val
            } else {
                &mut split.train
            };
            target.push(entries[i].clone());
        }
    }
    Ok(split)
}

/// Trains the MLP probe on a labeled set.
pub fn train_mlp_probe(set: &LabeledActivationSet, cfg: &ProbeTrainConfig) -> Result<MlpProbe> {
    cfg.validate()?;
    let split = dedup_and_split(set, cfg.seed)?;
    let w = set.width();
    let [n1, n2] = MLP_HIDDEN;

    let mut rng = Rng::new(derive_seed(cfg.seed, 0x1217));
    let he = |fan_in: usize| (2.0 / fan_in as f32).sqrt();
    let mut probe = MlpProbe {
        input_width: w,
        w1: (0..n1 * w).map(|_| rng.normal(0.0, 1.0) * he(w)).collect(),
        b1: vec![0.0; n1],
        w2: (0..n2 * n1).map(|_| rng.normal(0.0, 1.0) * he(n1)).collect(),
        b2: vec![0.0; n2],
        w3: (0..n2).map(|_| rng.normal(0.0, 1.0) * (1.0 / n2 as f32).sqrt()).collect(),
        b3: 0.0,
        val_accuracy: 0.0,
        final_loss: f32::NAN,
    };

    let mut opt_w1 = Adam::new(probe.w1.len(), 0.9, 0.999, 1e-8);
    let mut opt_b1 = Adam::new(n1, 0.9, 0.999, 1e-8);
    let mut opt_w2 = Adam::new(probe.w2.len(), 0.9, 0.999, 1e-8);
    let mut opt_b2 = Adam::new(n2, 0.9, 0.999, 1e-8);
    let mut opt_w3 = Adam::new(n2, 0.9, 0.999, 1e-8);
    let mut opt_b3 = Adam::new(1, 0.9, 0.999, 1e-8);

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, 0x0DDE));
    for _epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut g_w1 = vec![0.0f32; probe.w1.len()];
            let mut g_b1 = vec![0.0f32; n1];
            let mut g_w2 = vec![0.0f32; probe.w2.len()];
            let mut g_b2 = vec![0.0f32; n2];
            let mut g_w3 = vec![0.0f32; n2];
            let mut g_b3 = [0.0f32; 1];
            for &i in batch {
                let (x, label) = &split.train[i];
                let y = *label as u8 as f32;
                let (h1, h2, p) = probe.forward(x);
                epoch_loss += bce(p, y) as f64;
                let dz = p - y;
                let mut dh2 = vec![0.0f32; n2];
                for j in 0..n2 {
                    g_w3[j] += dz * h2[j];
                    if h2[j] > 0.0 {
                        dh2[j] = dz * probe.w3[j];
                    }
                }
                g_b3[0] += dz;
                let mut dh1 = vec![0.0f32; n1];
                for j in 0..n2 {
                    if dh2[j] == 0.0 {
                        continue;
                    }
                    for k in 0..n1 {
                        g_w2[j * n1 + k] += dh2[j] * h1[k];
                        dh1[k] += dh2[j] * probe.w2[j * n1 + k];
                    }
                    g_b2[j] += dh2[j];
                }
                for k in 0..n1 {
                    if h1[k] <= 0.0 {
                        dh1[k] = 0.0;
                    }
                }
                for k in 0..n1 {
                    if dh1[k] == 0.0 {
                        continue;
                    }
                    for d in 0..w {
                        g_w1[k * w + d] += dh1[k] * x[d];
                    }
                    g_b1[k] += dh1[k];
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in [
                &mut g_w1, &mut g_b1, &mut g_w2, &mut g_b2, &mut g_w3,
            ] {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            g_b3[0] *= scale;
            opt_w1.step(&mut probe.w1, &g_w1, cfg.lr);
            opt_b1.step(&mut probe.b1, &g_b1, cfg.lr);
            opt_w2.step(&mut probe.w2, &g_w2, cfg.lr);
            opt_b2.step(&mut probe.b2, &g_b2, cfg.lr);
            opt_w3.step(&mut probe.w3, &g_w3, cfg.lr);
            opt_b3.step(std::slice::from_mut(&mut probe.b3), &g_b3, cfg.lr);
        }
        probe.final_loss = (epoch_loss / split.train.len() as f64) as f32;
    }

    let correct = split
        .val
        .iter()
        .filter(|(x, label)| probe.classify(x) == *label)
        .count();
    probe.val_accuracy = correct as f32 / split.val.len() as f32;
    Ok(probe)
}

/// Accuracy of an MLP probe on another labeled set.
pub fn evaluate_mlp(probe: &MlpProbe, set: &LabeledActivationSet) -> Result<f32> {
    set.validate()?;
    if set.width() != probe.input_width {
        return Err(Error::WidthMismatch {
            source_model: format!("probe over width {}", probe.input_width),
            target_model: format!("set at {} with width {}", set.site, set.width()),
        });
    }
    if set.is_empty() {
        return Err(Error::InsufficientSamples {
            cell: "probe evaluation".into(),
            needed: 1,
            available: 0,
        });
    }
    let correct = (0..set.len())
        .filter(|&i| probe.classify(set.vectors.row(i)) == set.labels[i])
        .count();
    Ok(correct as f32 / set.len() as f32)
}

/// Fits logistic regression from zero init by full-batch gradient descent.
///
/// Returns `(w, b)`. Gradients accumulate in `f64`; the run is fully
/// deterministic (no sampling anywhere).
pub fn fit_logistic(
    rows: &[(&[f32], bool)],
    width: usize,
    cfg: &LinearTrainConfig,
) -> Result<(Vec<f32>, f32)> {
    if rows.is_empty() {
        return Err(Error::InsufficientSamples {
            cell: "logistic fit".into(),
            needed: 1,
            available: 0,
        });
    }
    for (x, _) in rows {
        if x.len() != width {
            return Err(Error::LengthMismatch {
                context: "logistic fit input row".into(),
                expected: width,
                got: x.len(),
            });
        }
    }
    let mut w = vec![0.0f32; width];
    let mut b = 0.0f32;
    let n = rows.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0f64; width];
        let mut gb = 0.0f64;
        for (x, label) in rows {
            let p = sigmoid((dot64(&w, x) + b as f64) as f32);
            let dz = (p - (*label as u8 as f32)) as f64;
            for d in 0..width {
                gw[d] += dz * x[d] as f64;
            }
            gb += dz;
        }
        for d in 0..width {
            w[d] -= (cfg.lr as f64 * gw[d] / n) as f32;
        }
        b -= (cfg.lr as f64 * gb / n) as f32;
    }
    Ok((w, b))
}

/// Trains the logistic probe with the same dedup/split protocol as the MLP.
pub fn train_linear_probe(
    set: &LabeledActivationSet,
    cfg: &LinearTrainConfig,
) -> Result<LinearProbe> {
    let split = dedup_and_split(set, cfg.seed)?;
    let rows: Vec<(&[f32], bool)> = split
        .train
        .iter()
        .map(|(x, label)| (x.as_slice(), *label))
        .collect();
    let (w, b) = fit_logistic(&rows, set.width(), cfg)?;
    let probe = LinearProbe {
        w,
        b,
        val_accuracy: 0.0,
    };
    let correct = split
        .val
        .iter()
        .filter(|(x, label)| probe.classify(x) == *label)
        .count();
    Ok(LinearProbe {
        val_accuracy: correct as f32 / split.val.len() as f32,
        ..probe
    })
}

/// One row of the probing heatmap: a site's validation accuracy plus its
/// probe's accuracy on each named evaluation dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub site: HookSite,
    pub val_accuracy: f32,
    pub eval_accuracies: Vec<f32>,
}

/// Site-by-dataset probe accuracy table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub eval_names: Vec<String>,
    pub cells: Vec<HeatmapCell>,
    pub model_fingerprint: String,
    pub train_fingerprint: String,
}

impl HeatmapReport {
    /// Validation accuracy at a site, if it was probed.
    pub fn site_accuracy(&self, site: HookSite) -> Option<f32> {
        self.cells
            .iter()
            .find(|c| c.site == site)
            .map(|c| c.val_accuracy)
    }

    /// `(head, validation accuracy)` for every head site of one layer,
    /// ascending by head index.
    pub fn head_accuracies(&self, layer: usize) -> Vec<(usize, f32)> {
        let mut out: Vec<(usize, f32)> = self
            .cells
            .iter()
            .filter_map(|c| match c.site {
                HookSite::HeadOutput { layer: l, head } if l == layer => {
                    Some((head, c.val_accuracy))
                }
                _ => None,
            })
            .collect();
        out.sort_by_key(|&(h, _)| h);
        out
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = FingerprintBuilder::new("heatmap");
        for name in &self.eval_names {
            fp.str(name);
        }
        for cell in &self.cells {
            fp.str(&format!("{}", cell.site));
            fp.f32(cell.val_accuracy);
            fp.f32s(&cell.eval_accuracies);
        }
        fp.str(&self.model_fingerprint);
        fp.str(&self.train_fingerprint);
        fp.finish()
    }
}

#[derive(Serialize, Deserialize)]
struct HeatmapFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    report: HeatmapReport,
}

const HEATMAP_FORMAT: &str = "actrev-heatmap";
const HEATMAP_VERSION: u32 = 1;

pub fn save_heatmap(path: &Path, report: &HeatmapReport) -> Result<()> {
    let file = HeatmapFile {
        format: HEATMAP_FORMAT.into(),
        version: HEATMAP_VERSION,
        report: report.clone(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::MalformedFile {
        kind: "heatmap",
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_heatmap(path: &Path) -> Result<HeatmapReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: HeatmapFile = toml::from_str(&text).map_err(|e| Error::MalformedFile {
        kind: "heatmap",
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    if file.format != HEATMAP_FORMAT {
        return Err(Error::MalformedFile {
            kind: "heatmap",
            path: Some(path.to_path_buf()),
            reason: format!("unexpected format tag {:?}", file.format),
        });
    }
    if file.version != HEATMAP_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "heatmap",
            found: file.version,
            supported: HEATMAP_VERSION,
        });
    }
    Ok(file.report)
}

/// Trains one MLP probe per training-set site and evaluates each on every
/// named dataset at the matching site.
///
/// Each site's probe draws its seed from `cfg.seed` and the site's position
/// in the (ordered) training map, so adding or removing evaluation datasets
/// never perturbs the probes.
pub fn heatmap(
    train: &BTreeMap<HookSite, LabeledActivationSet>,
    evals: &[(String, &BTreeMap<HookSite, LabeledActivationSet>)],
    cfg: &ProbeTrainConfig,
) -> Result<HeatmapReport> {
    if train.is_empty() {
        return Err(Error::InsufficientSamples {
            cell: "heatmap training sites".into(),
            needed: 1,
            available: 0,
        });
    }
    let mut cells = Vec::with_capacity(train.len());
    let mut model_fp = String::new();
    let mut train_fp = FingerprintBuilder::new("heatmap-train");
    for (i, (&site, set)) in train.iter().enumerate() {
        let site_cfg = ProbeTrainConfig {
            seed: derive_seed(cfg.seed, i as u64),
            ..*cfg
        };
        let probe = train_mlp_probe(set, &site_cfg)?;
        let mut eval_accuracies = Vec::with_capacity(evals.len());
        for (name, sets) in evals {
            let eval_set = sets.get(&site).ok_or_else(|| Error::Unsatisfiable {
                context: "heatmap".into(),
                reason: format!("evaluation dataset {name:?} lacks site {site}"),
            })?;
            eval_accuracies.push(evaluate_mlp(&probe, eval_set)?);
        }
        cells.push(HeatmapCell {
            site,
            val_accuracy: probe.val_accuracy,
            eval_accuracies,
        });
        model_fp = set.model_fingerprint.clone();
        train_fp.str(&set.fingerprint());
    }
    Ok(HeatmapReport {
        eval_names: evals.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        model_fingerprint: model_fp,
        train_fingerprint: train_fp.finish(),
    })
}

fn sigmoid(z: f32) -> f32 {
    let z = z.clamp(-30.0, 30.0);
    1.0 / (1.0 + (-z).exp())
}

fn bce(p: f32, y: f32) -> f32 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{dot, Matrix};

    /// Two Gaussian blobs separated along a random direction.
    fn blob_set(n_per_class: usize, width: usize, gap: f32, seed: u64) -> LabeledActivationSet {
        let mut rng = Rng::new(seed);
        let dir: Vec<f32> = (0..width).map(|_| rng.normal(0.0, 1.0)).collect();
        let norm = (dot(&dir, &dir) as f32).sqrt();
        let mut vectors = Matrix::zeros(2 * n_per_class, width);
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let label = i % 2 == 0;
            let sign = if label { 1.0 } else { -1.0 };
            let row = vectors.row_mut(i);
            for (d, r) in row.iter_mut().enumerate() {
                *r = rng.normal(0.0, 1.0) + sign * gap * dir[d] / norm;
            }
            labels.push(label);
        }
        LabeledActivationSet {
            site: HookSite::LayerResidual { layer: 0 },
            vectors,
            labels,
            corpus_fingerprint: "test-corpus".into(),
            model_fingerprint: "test-model".into(),
        }
    }

    fn shuffled_labels(mut set: LabeledActivationSet, seed: u64) -> LabeledActivationSet {
        let mut rng = Rng::new(seed);
        rng.shuffle(&mut set.labels);
        set
    }

    #[test]
    fn mlp_probe_separates_blobs() {
        let set = blob_set(200, 24, 2.0, 5);
        let probe = train_mlp_probe(&set, &ProbeTrainConfig::default()).unwrap();
        assert!(
            probe.val_accuracy >= 0.95,
            "val accuracy {}",
            probe.val_accuracy
        );
    }

    #[test]
    fn mlp_probe_stays_near_chance_on_shuffled_labels() {
        let set = shuffled_labels(blob_set(250, 24, 2.0, 6), 7);
        let probe = train_mlp_probe(&set, &ProbeTrainConfig::default()).unwrap();
        assert!(
            (probe.val_accuracy - 0.5).abs() <= 0.1,
            "val accuracy {}",
            probe.val_accuracy
        );
    }

    #[test]
    fn duplicating_every_entry_changes_nothing() {
        let set = blob_set(60, 16, 1.5, 8);
        let mut doubled_data = set.vectors.data().to_vec();
        doubled_data.extend_from_slice(set.vectors.data());
        let doubled = LabeledActivationSet {
            vectors: Matrix::from_vec(2 * set.len(), set.width(), doubled_data).unwrap(),
            labels: [set.labels.clone(), set.labels.clone()].concat(),
            ..set.clone()
        };
        let a = train_mlp_probe(&set, &ProbeTrainConfig::default()).unwrap();
        let b = train_mlp_probe(&doubled, &ProbeTrainConfig::default()).unwrap();
        assert_eq!(a.val_accuracy, b.val_accuracy);
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w3, b.w3);
        assert_eq!(a.b3, b.b3);
    }

    #[test]
    fn linear_probe_separates_blobs_and_flips_with_labels() {
        let set = blob_set(150, 12, 2.5, 9);
        let probe = train_linear_probe(&set, &LinearTrainConfig::default()).unwrap();
        assert!(
            probe.val_accuracy >= 0.95,
            "val accuracy {}",
            probe.val_accuracy
        );

        let flipped = LabeledActivationSet {
            labels: set.labels.iter().map(|&l| !l).collect(),
            ..set.clone()
        };
        let anti = train_linear_probe(&flipped, &LinearTrainConfig::default()).unwrap();
        let cos = dot(&probe.w, &anti.w)
            / (dot(&probe.w, &probe.w).sqrt() * dot(&anti.w, &anti.w).sqrt());
        // The stratified split reshuffles per class, so the flipped run trains
        // on a slightly different subset and the directions are not exact
        // negations of each other.
        assert!(cos < -0.98, "cosine between flipped probes {cos}");
    }

    #[test]
    fn evaluate_rejects_width_mismatch() {
        let set = blob_set(40, 10, 2.0, 10);
        let probe = train_mlp_probe(&set, &ProbeTrainConfig::default()).unwrap();
        let narrow = blob_set(10, 6, 2.0, 11);
        match evaluate_mlp(&probe, &narrow) {
            Err(Error::WidthMismatch { .. }) => {}
            other => panic!("expected width mismatch, got {other:?}"),
        }
    }

    #[test]
    fn heatmap_ranks_signal_site_above_noise_site() {
        // Site A carries the labels, site B gets unseparated vectors.
        let signal = blob_set(120, 16, 2.0, 12);
        let noise = LabeledActivationSet {
            site: HookSite::HeadOutput { layer: 0, head: 1 },
            vectors: blob_set(120, 16, 0.0, 15).vectors,
            labels: signal.labels.clone(),
            corpus_fingerprint: signal.corpus_fingerprint.clone(),
            model_fingerprint: signal.model_fingerprint.clone(),
        };
        let mut train = BTreeMap::new();
        train.insert(signal.site, signal.clone());
        train.insert(noise.site, noise.clone());
        let mut evals = BTreeMap::new();
        evals.insert(signal.site, blob_set(50, 16, 2.0, 16));
        evals.insert(
            noise.site,
            LabeledActivationSet {
                site: noise.site,
                ..blob_set(50, 16, 0.0, 17)
            },
        );
        let report = heatmap(
            &train,
            &[("holdout".into(), &evals)],
            &ProbeTrainConfig::default(),
        )
        .unwrap();
        assert_eq!(report.eval_names, vec!["holdout".to_string()]);
        assert_eq!(report.cells.len(), 2);
        let sig_acc = report.site_accuracy(signal.site).unwrap();
        let noise_acc = report.site_accuracy(noise.site).unwrap();
        assert!(
            sig_acc > noise_acc + 0.2,
            "signal {sig_acc} vs noise {noise_acc}"
        );
        let heads = report.head_accuracies(0);
        assert_eq!(heads.len(), 1);
        assert_eq!(heads[0].0, 1);
    }

    #[test]
    fn heatmap_file_round_trips() {
        let report = HeatmapReport {
            eval_names: vec!["a".into(), "b".into()],
            cells: vec![
                HeatmapCell {
                    site: HookSite::LayerResidual { layer: 2 },
                    val_accuracy: 0.9375,
                    eval_accuracies: vec![0.875, 0.5],
                },
                HeatmapCell {
                    site: HookSite::HeadOutput { layer: 1, head: 3 },
                    val_accuracy: 0.75,
                    eval_accuracies: vec![0.625, 0.8125],
                },
            ],
            model_fingerprint: "m".into(),
            train_fingerprint: "t".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.toml");
        save_heatmap(&path, &report).unwrap();
        let back = load_heatmap(&path).unwrap();
        assert_eq!(back.eval_names, report.eval_names);
        assert_eq!(back.cells.len(), 2);
        assert_eq!(back.cells[1].site, report.cells[1].site);
        assert_eq!(back.fingerprint(), report.fingerprint());
    }
}
