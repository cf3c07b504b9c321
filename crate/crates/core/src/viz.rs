//! 2-D projections of captured activations and plot-data emission.
//!
//! Two projectors are provided: PCA (top-2 principal components via a Jacobi
//! eigensolver, fast and linear) and exact t-SNE (pairwise affinities with
//! per-point binary-search perplexity calibration, no tree approximation).
//! Both return a [`Projection2D`] carrying one point per input vector, and
//! [`emit_plot_data`] writes that projection as a delimiter-separated text
//! file plus a self-contained SVG scatter.
//!
//! The t-SNE gradient loop is single-threaded and deterministic under its
//! seed; only the pairwise-affinity setup is parallel. Inputs are sorted into
//! a canonical order before the seeded initialization, so permuting the input
//! rows permutes the output points identically.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{derive_seed, Matrix, Rng};

/// Hard cap on t-SNE input size. The exact O(n^2) affinity and gradient
/// computations are meant for desk-scale sets of a few hundred points.
pub const MAX_TSNE_POINTS: usize = 2048;

/// Factor applied to joint affinities during the early-exaggeration phase.
const EXAGGERATION: f64 = 12.0;
/// Longest the early-exaggeration phase can run, in iterations.
const EXAGGERATION_ITERS: usize = 50;
/// Base gradient step size.
const LEARNING_RATE: f64 = 100.0;
/// Momentum while affinities are exaggerated.
const MOMENTUM_EARLY: f64 = 0.5;
/// Momentum after the exaggeration phase ends.
const MOMENTUM_LATE: f64 = 0.8;
/// Floor for probabilities inside logarithms so the divergence stays finite.
const PROB_FLOOR: f64 = 1e-12;

/// How a [`Projection2D`] was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProjectionMethod {
    Pca,
    Tsne {
        perplexity: f64,
        iters: usize,
        seed: u64,
    },
}

impl fmt::Display for ProjectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectionMethod::Pca => write!(f, "pca"),
            ProjectionMethod::Tsne {
                perplexity,
                iters,
                seed,
            } => write!(f, "tsne(perplexity={perplexity}, iters={iters}, seed={seed})"),
        }
    }
}

/// One embedded point with the group label it came in with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub group: String,
}

/// A 2-D embedding of a set of vectors, one point per input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
    pub method: ProjectionMethod,
    /// KL divergence after each gradient iteration; empty for PCA.
    pub kl_per_iter: Vec<f64>,
}

impl Projection2D {
    /// Checks that every coordinate is finite.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("projection point {i}"),
                });
            }
        }
        Ok(())
    }
}

/// Iteration index at which the early-exaggeration phase ends for a run of
/// the given length. At least half of every run is spent on the true
/// objective, and the recorded KL trace is non-increasing from this index on.
pub fn exaggeration_end(iters: usize) -> usize {
    EXAGGERATION_ITERS.min(iters / 2)
}

fn check_inputs(vectors: &Matrix, groups: &[String]) -> Result<()> {
    if vectors.rows() < 3 {
        return Err(Error::InsufficientSamples {
            cell: "projection input".into(),
            needed: 3,
            available: vectors.rows(),
        });
    }
    if groups.len() != vectors.rows() {
        return Err(Error::LengthMismatch {
            context: "projection group labels".into(),
            expected: vectors.rows(),
            got: groups.len(),
        });
    }
    for i in 0..vectors.rows() {
        if vectors.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("projection input row {i}"),
            });
        }
    }
    Ok(())
}

/// Projects rows onto the top-2 principal components of the mean-centered
/// data. With one-dimensional input the second coordinate is zero.
pub fn pca_project(vectors: &Matrix, groups: &[String]) -> Result<Projection2D> {
    check_inputs(vectors, groups)?;
    let n = vectors.rows();
    let d = vectors.cols();

    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(vectors.row(i)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = vectors.row(i);
        for j in 0..d {
            centered.push(row[j] as f64 - mean[j]);
        }
    }

    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks_exact(d) {
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= denom;
            cov[b * d + a] = cov[a * d + b];
        }
    }

    let eigen = jacobi_eigen(&cov, d);
    let axis = |k: usize| -> Option<&[f64]> { eigen.get(k).map(|(_, v)| v.as_slice()) };
    let points = centered
        .chunks_exact(d)
        .zip(groups)
        .map(|(row, group)| {
            let coord = |v: Option<&[f64]>| {
                v.map_or(0.0, |v| row.iter().zip(v).map(|(a, b)| a * b).sum())
            };
            ProjectedPoint {
                x: coord(axis(0)),
                y: coord(axis(1)),
                group: group.clone(),
            }
        })
        .collect();

    let projection = Projection2D {
        points,
        method: ProjectionMethod::Pca,
        kl_per_iter: Vec::new(),
    };
    projection.validate()?;
    Ok(projection)
}

/// Full eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalue, eigenvector) pairs sorted by descending eigenvalue,
/// each vector sign-canonicalized so its largest-magnitude entry is positive.
fn jacobi_eigen(sym: &[f64], d: usize) -> Vec<(f64, Vec<f64>)> {
    let mut a = sym.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = sym.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1.0);

    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q].abs())
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol / (d * d) as f64 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d)
        .map(|j| {
            let mut vec_j: Vec<f64> = (0..d).map(|k| v[k * d + j]).collect();
            let lead = vec_j
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.abs().total_cmp(&b.abs()))
                .map(|(k, _)| k)
                .unwrap_or(0);
            if vec_j[lead] < 0.0 {
                for x in &mut vec_j {
                    *x = -*x;
                }
            }
            (a[j * d + j], vec_j)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

fn pairwise_sq_dists(vectors: &Matrix) -> Vec<f64> {
    let n = vectors.rows();
    let mut d2 = vec![0.0f64; n * n];
    d2.par_chunks_exact_mut(n).enumerate().for_each(|(i, row)| {
        let xi = vectors.row(i);
        for (j, out) in row.iter_mut().enumerate() {
            let xj = vectors.row(j);
            *out = xi
                .iter()
                .zip(xj)
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum();
        }
    });
    d2
}

/// Binary-searches the Gaussian precision for one point so that the entropy
/// of its conditional neighbor distribution matches `ln(perplexity)`.
/// Returns the normalized conditional row with a zero at the self position.
fn conditional_row(d2_row: &[f64], this: usize, target_entropy: f64) -> Vec<f64> {
    let n = d2_row.len();
    // Shift by the nearest-neighbor distance: the conditional distribution is
    // invariant to it and the largest exponent becomes zero, so the row never
    // underflows to all zeros for tight clusters or large precisions.
    let shift = d2_row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != this)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0f64;
    let mut beta_min = 0.0f64;
    let mut beta_max = f64::INFINITY;
    let mut row = vec![0.0f64; n];
    for _ in 0..64 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            if j == this {
                row[j] = 0.0;
                continue;
            }
            let shifted = d2_row[j] - shift;
            let w = (-beta * shifted).exp();
            row[j] = w;
            sum += w;
            weighted += shifted * w;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        let diff = entropy - target_entropy;
        if diff.abs() < 1e-9 {
            break;
        }
        if diff > 0.0 {
            beta_min = beta;
            beta = if beta_max.is_finite() {
                (beta + beta_max) / 2.0
            } else {
                beta * 2.0
            };
        } else {
            beta_max = beta;
            beta = if beta_min > 0.0 {
                (beta + beta_min) / 2.0
            } else {
                beta / 2.0
            };
        }
    }
    let sum: f64 = row.iter().sum();
    for w in &mut row {
        *w /= sum;
    }
    row
}

/// Symmetrized joint affinities for exact t-SNE, row-major `n * n`.
/// Each conditional distribution is calibrated to the requested perplexity by
/// binary search; rows are computed in parallel.
pub fn joint_affinities(vectors: &Matrix, perplexity: f64) -> Result<Vec<f64>> {
    let n = vectors.rows();
    if n < 3 {
        return Err(Error::InsufficientSamples {
            cell: "t-SNE input".into(),
            needed: 3,
            available: n,
        });
    }
    if !(perplexity.is_finite() && perplexity >= 1.0 && perplexity < n as f64) {
        return Err(Error::InvalidConfig {
            field: "tsne.perplexity".into(),
            reason: format!("must lie in [1, n) for n = {n} points, got {perplexity}"),
        });
    }
    let d2 = pairwise_sq_dists(vectors);
    let target_entropy = perplexity.ln();
    let cond: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| conditional_row(&d2[i * n..(i + 1) * n], i, target_entropy))
        .collect();

    let mut joint = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            joint[i * n + j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(PROB_FLOOR);
        }
    }
    Ok(joint)
}

/// KL divergence of the Student-t embedding distribution from the joint
/// affinities `p`, plus its gradient with respect to the flat coordinate
/// vector `y` (row-major `n * 2`).
pub fn kl_and_gradient(p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = y.len() / 2;
    if y.len() != 2 * n || p.len() != n * n {
        return Err(Error::LengthMismatch {
            context: "t-SNE affinity matrix".into(),
            expected: n * n,
            got: p.len(),
        });
    }
    let mut weights = vec![0.0f64; n * n];
    let mut total = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            let w = 1.0 / (1.0 + dx * dx + dy * dy);
            weights[i * n + j] = w;
            total += w;
        }
    }

    let mut kl = 0.0f64;
    let mut grad = vec![0.0f64; 2 * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            let w = weights[i * n + j];
            let qij = w / total;
            if pij > 0.0 {
                kl += pij * (pij / qij.max(PROB_FLOOR)).ln();
            }
            let coeff = 4.0 * (pij - qij) * w;
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            grad[2 * i] += coeff * dx;
            grad[2 * i + 1] += coeff * dy;
        }
    }
    Ok((kl, grad))
}

/// Exact t-SNE embedding of the input rows.
///
/// Affinities are calibrated per point to `perplexity`, the layout is
/// optimized for `iters` gradient iterations with momentum and an
/// early-exaggeration phase (see [`exaggeration_end`]), and the true KL
/// divergence is recorded after every iteration. After the exaggeration
/// phase the optimizer rejects any step that would increase the divergence,
/// halving the step size instead, so the recorded tail is non-increasing.
pub fn tsne_project(
    vectors: &Matrix,
    groups: &[String],
    perplexity: f64,
    iters: usize,
    seed: u64,
) -> Result<Projection2D> {
    check_inputs(vectors, groups)?;
    let n = vectors.rows();
    if n > MAX_TSNE_POINTS {
        return Err(Error::InvalidConfig {
            field: "tsne input size".into(),
            reason: format!("exact t-SNE is capped at {MAX_TSNE_POINTS} points, got {n}"),
        });
    }

    // Canonical order: sort rows by content (then group, then position) so
    // the seeded initialization attaches to values rather than positions and
    // permuting the inputs permutes the outputs identically.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let row_cmp = vectors
            .row(a)
            .iter()
            .zip(vectors.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|c| c.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal);
        row_cmp
            .then_with(|| groups[a].cmp(&groups[b]))
            .then(a.cmp(&b))
    });
    let sorted = Matrix::from_fn(n, vectors.cols(), |i, j| vectors.get(order[i], j));

    let p = joint_affinities(&sorted, perplexity)?;
    let p_exaggerated: Vec<f64> = p.iter().map(|v| v * EXAGGERATION).collect();
    let ee_end = exaggeration_end(iters);

    let mut rng = Rng::new(derive_seed(seed, 0x7a31));
    let mut y: Vec<f64> = (0..2 * n).map(|_| rng.normal(0.0, 1e-4) as f64).collect();
    let mut vel = vec![0.0f64; 2 * n];
    let mut eta = LEARNING_RATE;
    let mut prev_kl = f64::INFINITY;
    let mut kl_per_iter = Vec::with_capacity(iters);

    for it in 0..iters {
        let post_ee = it >= ee_end;
        let (p_step, momentum) = if post_ee {
            (&p, MOMENTUM_LATE)
        } else {
            (&p_exaggerated, MOMENTUM_EARLY)
        };
        let (_, grad) = kl_and_gradient(p_step, &y)?;

        let mut accepted = false;
        for _attempt in 0..=20 {
            let vel_cand: Vec<f64> = vel
                .iter()
                .zip(&grad)
                .map(|(&v, &g)| momentum * v - eta * g)
                .collect();
            let y_cand: Vec<f64> = y.iter().zip(&vel_cand).map(|(&a, &b)| a + b).collect();
            let (kl_cand, _) = kl_and_gradient(&p, &y_cand)?;
            // During exaggeration any step is fine; afterwards only accept
            // steps that do not raise the true divergence.
            if !post_ee || kl_cand <= prev_kl {
                y = y_cand;
                vel = vel_cand;
                prev_kl = if post_ee { kl_cand } else { f64::INFINITY };
                kl_per_iter.push(kl_cand);
                if post_ee {
                    eta = (eta * 1.1).min(LEARNING_RATE);
                }
                accepted = true;
                break;
            }
            eta /= 2.0;
            vel.iter_mut().for_each(|v| *v = 0.0);
        }
        if !accepted {
            // No admissible step at any tried scale: hold the layout still.
            vel.iter_mut().for_each(|v| *v = 0.0);
            kl_per_iter.push(prev_kl);
        }
    }

    let mut points = vec![
        ProjectedPoint {
            x: 0.0,
            y: 0.0,
            group: String::new(),
        };
        n
    ];
    for (k, &orig) in order.iter().enumerate() {
        points[orig] = ProjectedPoint {
            x: y[2 * k],
            y: y[2 * k + 1],
            group: groups[orig].clone(),
        };
    }

    let projection = Projection2D {
        points,
        method: ProjectionMethod::Tsne {
            perplexity,
            iters,
            seed,
        },
        kl_per_iter,
    };
    projection.validate()?;
    Ok(projection)
}

/// Writes the projection as delimiter-separated values with an `x,y,group`
/// header at `path`, plus a self-contained SVG scatter next to it (same file
/// name with the extension replaced by `svg`). Coordinates are printed with
/// the shortest representation that parses back to the identical bits.
pub fn emit_plot_data(projection: &Projection2D, path: &Path) -> Result<()> {
    projection.validate()?;
    let mut csv = String::from("x,y,group\n");
    for p in &projection.points {
        csv.push_str(&format!("{:?},{:?},{}\n", p.x, p.y, csv_field(&p.group)));
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    let svg_path = path.with_extension("svg");
    fs::write(&svg_path, render_svg(projection)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn render_svg(projection: &Projection2D) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const MARGIN: f64 = 40.0;
    const PLOT_RIGHT: f64 = 540.0;

    let mut groups: Vec<&str> = Vec::new();
    for p in &projection.points {
        if !groups.contains(&p.group.as_str()) {
            groups.push(&p.group);
        }
    }
    let color = |group: &str| {
        let idx = groups.iter().position(|g| *g == group).unwrap_or(0);
        PALETTE[idx % PALETTE.len()]
    };

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &projection.points {
        x_min = x_min.min(p.x);
        x_max = x_max.max(p.x);
        y_min = y_min.min(p.y);
        y_max = y_max.max(p.y);
    }
    if !x_min.is_finite() || x_max <= x_min {
        (x_min, x_max) = (x_min.min(0.0), x_min.max(0.0) + 1.0);
    }
    if !y_min.is_finite() || y_max <= y_min {
        (y_min, y_max) = (y_min.min(0.0), y_min.max(0.0) + 1.0);
    }
    let pad_x = 0.05 * (x_max - x_min);
    let pad_y = 0.05 * (y_max - y_min);
    (x_min, x_max) = (x_min - pad_x, x_max + pad_x);
    (y_min, y_max) = (y_min - pad_y, y_max + pad_y);

    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (PLOT_RIGHT - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y_min) / (y_max - y_min) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" \
         fill=\"none\" stroke=\"#444444\"/>\n",
        PLOT_RIGHT - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    ));
    svg.push_str(&format!(
        "  <text x=\"{MARGIN}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         fill=\"#444444\">{}</text>\n",
        H - MARGIN / 3.0,
        xml_escape(&projection.method.to_string())
    ));
    for p in &projection.points {
        svg.push_str(&format!(
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.75\"/>\n",
            sx(p.x),
            sy(p.y),
            color(&p.group)
        ));
    }
    for (i, group) in groups.iter().enumerate() {
        let ly = MARGIN + 18.0 * i as f64;
        svg.push_str(&format!(
            "  <circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/>\n",
            PLOT_RIGHT + 14.0,
            ly,
            color(group)
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"#222222\">{}</text>\n",
            PLOT_RIGHT + 24.0,
            ly + 4.0,
            xml_escape(group)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(groups: &[(&str, usize)]) -> Vec<String> {
        groups
            .iter()
            .flat_map(|&(name, count)| std::iter::repeat_n(name.to_string(), count))
            .collect()
    }

    fn pairwise_dists(points: &[(f64, f64)]) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                out.push((dx * dx + dy * dy).sqrt());
            }
        }
        out
    }

    /// Mean silhouette coefficient over all points, using the group labels
    /// as cluster assignments.
    fn silhouette(projection: &Projection2D) -> f64 {
        let pts = &projection.points;
        let dist = |a: &ProjectedPoint, b: &ProjectedPoint| {
            ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
        };
        let mut total = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let mut own = (0.0, 0usize);
            let mut others: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
            for (j, q) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                if q.group == p.group {
                    own.0 += dist(p, q);
                    own.1 += 1;
                } else {
                    let e = others.entry(&q.group).or_default();
                    e.0 += dist(p, q);
                    e.1 += 1;
                }
            }
            let a = own.0 / own.1 as f64;
            let b = others
                .values()
                .map(|&(sum, count)| sum / count as f64)
                .fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / pts.len() as f64
    }

    #[test]
    fn pca_on_plane_data_preserves_pairwise_distances() {
        let mut rng = Rng::new(41);
        let n = 40;
        let data = Matrix::from_fn(n, 2, |_, j| {
            let std = if j == 0 { 3.0 } else { 1.0 };
            rng.normal(0.0, std)
        });
        let groups = labels(&[("all", n)]);
        let proj = pca_project(&data, &groups).unwrap();
        assert_eq!(proj.points.len(), n);
        assert_eq!(proj.method, ProjectionMethod::Pca);

        let input: Vec<(f64, f64)> = (0..n)
            .map(|i| (data.get(i, 0) as f64, data.get(i, 1) as f64))
            .collect();
        let output: Vec<(f64, f64)> = proj.points.iter().map(|p| (p.x, p.y)).collect();
        for (din, dout) in pairwise_dists(&input).iter().zip(pairwise_dists(&output)) {
            assert!(
                (din - dout).abs() < 1e-5,
                "distance changed from {din} to {dout}"
            );
        }
    }

    #[test]
    fn pca_rank_one_data_has_near_zero_second_coordinate() {
        let mut rng = Rng::new(42);
        let dir: Vec<f32> = (0..6).map(|_| rng.normal(0.0, 1.0)).collect();
        let data = Matrix::from_fn(30, 6, |i, j| (i as f32 / 10.0 - 1.5) * dir[j]);
        let proj = pca_project(&data, &labels(&[("line", 30)])).unwrap();
        let spread_x = proj.points.iter().map(|p| p.x.abs()).fold(0.0, f64::max);
        let spread_y = proj.points.iter().map(|p| p.y.abs()).fold(0.0, f64::max);
        assert!(spread_x > 0.5, "first component lost the line: {spread_x}");
        assert!(spread_y < 1e-4, "rank-1 data has residual spread {spread_y}");
    }

    #[test]
    fn pca_matches_power_iteration_oracle() {
        let mut rng = Rng::new(43);
        let n = 60;
        let d = 10;
        // Anisotropic cloud so the top two eigenvalues are well separated.
        let data = Matrix::from_fn(n, d, |_, j| rng.normal(0.0, 1.0 + 2.0 / (1.0 + j as f32)));
        let proj = pca_project(&data, &labels(&[("cloud", n)])).unwrap();

        // Independent covariance accumulation in plain loops.
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += data.get(i, j) as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0f64; d * d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (data.get(i, a) as f64 - mean[a])
                        * (data.get(i, b) as f64 - mean[b]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);

        // Power iteration with deflation for the top two eigenpairs.
        let mut oracle = Vec::new();
        let mut work = cov.clone();
        for k in 0..2 {
            let mut v: Vec<f64> = (0..d).map(|j| ((j + k + 1) as f64).sin()).collect();
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let mut next = vec![0.0f64; d];
                for a in 0..d {
                    for b in 0..d {
                        next[a] += work[a * d + b] * v[b];
                    }
                }
                lambda = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                next.iter_mut().for_each(|x| *x /= lambda);
                v = next;
            }
            for a in 0..d {
                for b in 0..d {
                    work[a * d + b] -= lambda * v[a] * v[b];
                }
            }
            oracle.push(lambda);
        }

        let var = |coords: Vec<f64>| {
            coords.iter().map(|x| x * x).sum::<f64>() / (n - 1) as f64
        };
        let var_x = var(proj.points.iter().map(|p| p.x).collect());
        let var_y = var(proj.points.iter().map(|p| p.y).collect());
        assert!(
            (var_x - oracle[0]).abs() / oracle[0] < 1e-5,
            "first component variance {var_x} vs oracle {}",
            oracle[0]
        );
        assert!(
            (var_y - oracle[1]).abs() / oracle[1] < 1e-5,
            "second component variance {var_y} vs oracle {}",
            oracle[1]
        );

        // Reconstruction error from two components matches the oracle's
        // leftover spectrum mass.
        let total_var: f64 = (0..d).map(|a| cov[a * d + a]).sum();
        let mut residual = 0.0f64;
        for (i, p) in proj.points.iter().enumerate() {
            let norm_sq: f64 = (0..d)
                .map(|j| {
                    let c = data.get(i, j) as f64 - mean[j];
                    c * c
                })
                .sum();
            residual += norm_sq - p.x * p.x - p.y * p.y;
        }
        residual /= (n - 1) as f64;
        let expected = total_var - oracle[0] - oracle[1];
        assert!(
            (residual - expected).abs() / expected < 1e-5,
            "reconstruction error {residual} vs oracle {expected}"
        );
    }

    #[test]
    fn projection_input_checks() {
        let two = Matrix::zeros(2, 3);
        match pca_project(&two, &labels(&[("g", 2)])) {
            Err(Error::InsufficientSamples { needed: 3, .. }) => {}
            other => panic!("expected insufficient samples, got {other:?}"),
        }
        let four = Matrix::zeros(4, 3);
        match pca_project(&four, &labels(&[("g", 3)])) {
            Err(Error::LengthMismatch { .. }) => {}
            other => panic!("expected length mismatch, got {other:?}"),
        }
        let mut bad = Matrix::zeros(4, 3);
        bad.set(1, 2, f32::NAN);
        match pca_project(&bad, &labels(&[("g", 4)])) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    fn two_blobs(n_per: usize, d: usize, gap: f32, seed: u64) -> (Matrix, Vec<String>) {
        let mut rng = Rng::new(seed);
        let dir: Vec<f32> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
        let mut data = Matrix::zeros(2 * n_per, d);
        for i in 0..2 * n_per {
            let sign = if i < n_per { 1.0 } else { -1.0 };
            for j in 0..d {
                let center = sign * gap / 2.0 * dir[j] / norm;
                data.set(i, j, center + rng.normal(0.0, 0.3));
            }
        }
        (data, labels(&[("pos", n_per), ("neg", n_per)]))
    }

    #[test]
    fn tsne_separates_gaussian_clusters() {
        let (data, groups) = two_blobs(30, 8, 8.0, 44);
        let proj = tsne_project(&data, &groups, 10.0, 250, 3).unwrap();
        assert_eq!(proj.points.len(), 60);
        let s = silhouette(&proj);
        assert!(s > 0.5, "silhouette {s}");
    }

    #[test]
    fn tsne_kl_trace_is_monotone_after_exaggeration() {
        let (data, groups) = two_blobs(20, 6, 6.0, 45);
        let iters = 180;
        let proj = tsne_project(&data, &groups, 8.0, iters, 7).unwrap();
        assert_eq!(proj.kl_per_iter.len(), iters);
        assert!(proj.kl_per_iter.iter().all(|k| k.is_finite()));
        let tail = &proj.kl_per_iter[exaggeration_end(iters)..];
        for pair in tail.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-6,
                "divergence rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
        let first = tail.first().unwrap();
        let last = tail.last().unwrap();
        assert!(last < first, "no progress: started {first}, ended {last}");
    }

    #[test]
    fn tsne_gradient_matches_central_differences() {
        let mut rng = Rng::new(46);
        let data = Matrix::from_fn(12, 5, |_, _| rng.normal(0.0, 1.0));
        let p = joint_affinities(&data, 4.0).unwrap();

        for scale in [1e-4f64, 1.0] {
            let y: Vec<f64> = (0..24).map(|_| rng.normal(0.0, 1.0) as f64 * scale).collect();
            let (_, grad) = kl_and_gradient(&p, &y).unwrap();
            let h = 1e-6;
            let mut fd = vec![0.0f64; y.len()];
            for k in 0..y.len() {
                let mut plus = y.clone();
                plus[k] += h;
                let mut minus = y.clone();
                minus[k] -= h;
                fd[k] = (kl_and_gradient(&p, &plus).unwrap().0
                    - kl_and_gradient(&p, &minus).unwrap().0)
                    / (2.0 * h);
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&fd);
            assert!(rel < 1e-4, "scale {scale}: relative gradient error {rel}");
        }
    }

    #[test]
    fn tsne_is_permutation_equivariant() {
        for seed in [47u64, 48, 49] {
            let mut rng = Rng::new(seed);
            let n = 24;
            let data = Matrix::from_fn(n, 4, |_, _| rng.normal(0.0, 1.0));
            let groups: Vec<String> = (0..n).map(|i| format!("g{}", i % 3)).collect();
            let base = tsne_project(&data, &groups, 6.0, 60, 11).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let shuffled = Matrix::from_fn(n, 4, |i, j| data.get(perm[i], j));
            let shuffled_groups: Vec<String> =
                perm.iter().map(|&i| groups[i].clone()).collect();
            let out = tsne_project(&shuffled, &shuffled_groups, 6.0, 60, 11).unwrap();

            for (k, &orig) in perm.iter().enumerate() {
                assert_eq!(
                    out.points[k], base.points[orig],
                    "seed {seed}: point {k} diverged under permutation"
                );
            }
            assert_eq!(out.kl_per_iter, base.kl_per_iter);
        }
    }

    #[test]
    fn tsne_rejects_infeasible_parameters() {
        let data = Matrix::zeros(8, 3);
        let groups = labels(&[("g", 8)]);
        for perplexity in [8.0, 9.0, 0.5, f64::NAN] {
            match tsne_project(&data, &groups, perplexity, 10, 0) {
                Err(Error::InvalidConfig { field, .. }) => {
                    assert_eq!(field, "tsne.perplexity");
                }
                other => panic!("perplexity {perplexity}: expected config error, got {other:?}"),
            }
        }
        let huge = Matrix::zeros(MAX_TSNE_POINTS + 1, 1);
        let huge_groups = labels(&[("g", MAX_TSNE_POINTS + 1)]);
        match tsne_project(&huge, &huge_groups, 30.0, 10, 0) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "tsne input size"),
            other => panic!("expected size cap error, got {other:?}"),
        }
    }

    #[test]
    fn emit_plot_data_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");

        let empty = Projection2D {
            points: vec![],
            method: ProjectionMethod::Pca,
            kl_per_iter: vec![],
        };
        emit_plot_data(&empty, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "x,y,group\n");

        let proj = Projection2D {
            points: vec![
                ProjectedPoint {
                    x: 0.1 + 0.2,
                    y: -1.5e-7,
                    group: "alpha".into(),
                },
                ProjectedPoint {
                    x: f64::MIN_POSITIVE,
                    y: 2.0,
                    group: "beta, quoted".into(),
                },
                ProjectedPoint {
                    x: -3.25,
                    y: 7.0 / 3.0,
                    group: "alpha".into(),
                },
            ],
            method: ProjectionMethod::Tsne {
                perplexity: 5.0,
                iters: 10,
                seed: 1,
            },
            kl_per_iter: vec![0.5; 10],
        };
        emit_plot_data(&proj, &path).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,group"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        for (row, point) in rows.iter().zip(&proj.points) {
            let (x_text, rest) = row.split_once(',').unwrap();
            let (y_text, group_text) = rest.split_once(',').unwrap();
            assert_eq!(x_text.parse::<f64>().unwrap().to_bits(), point.x.to_bits());
            assert_eq!(y_text.parse::<f64>().unwrap().to_bits(), point.y.to_bits());
            assert_eq!(group_text, csv_field(&point.group));
        }
        assert!(rows[1].ends_with("\"beta, quoted\""));

        let svg = fs::read_to_string(dir.path().join("scatter.svg")).unwrap();
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("fill-opacity").count(), 3);

        let bad = dir.path().join("missing").join("scatter.csv");
        match emit_plot_data(&proj, &bad) {
            Err(Error::Io { .. }) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
