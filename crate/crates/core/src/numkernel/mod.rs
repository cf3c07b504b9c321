//! Dense numeric kernels shared by every other module.
//!
//! Storage is `f32` everywhere; every reduction (dot products, softmax sums,
//! layer-norm moments) accumulates in `f64` and rounds once at the end. That
//! policy keeps matmul associative to ~1e-4 at the sizes this crate uses and
//! makes oracle comparisons against pure-`f64` reference loops meaningful.
//!
//! # Example
//!
//! ```
//! use actrev::numkernel::{softmax, Matrix, Rng};
//!
//! let mut rng = Rng::new(7);
//! let a = Matrix::from_fn(2, 3, |_, _| rng.normal(0.0, 1.0));
//! let b = Matrix::from_fn(3, 2, |_, _| rng.normal(0.0, 1.0));
//! let c = a.matmul(&b).unwrap();
//! assert_eq!((c.rows(), c.cols()), (2, 2));
//!
//! let mut logits = vec![0.0_f32, 3.0_f32.ln()];
//! softmax(&mut logits);
//! assert!((logits[0] - 0.25).abs() < 1e-6);
//! ```

mod adam;
mod matrix;
mod rng;

pub use adam::Adam;
pub use matrix::Matrix;
pub use rng::{derive_seed, Rng};

/// Dot product with `f64` accumulation over four independent lanes.
///
/// The lane split is a fixed reassociation, so results are identical from run
/// to run while still letting the compiler vectorize.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    dot64(a, b) as f32
}

/// Dot product returning the raw `f64` accumulator.
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch {} vs {}", a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        lanes[0] += f64::from(a[base]) * f64::from(b[base]);
        lanes[1] += f64::from(a[base + 1]) * f64::from(b[base + 1]);
        lanes[2] += f64::from(a[base + 2]) * f64::from(b[base + 2]);
        lanes[3] += f64::from(a[base + 3]) * f64::from(b[base + 3]);
    }
    let mut tail = 0.0f64;
    for i in chunks * 4..a.len() {
        tail += f64::from(a[i]) * f64::from(b[i]);
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `dst += scale * src`, elementwise.
pub fn add_scaled(dst: &mut [f32], src: &[f32], scale: f32) {
    assert_eq!(dst.len(), src.len(), "add_scaled: length mismatch");
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// In-place softmax with max subtraction.
///
/// The subtraction keeps `exp` arguments non-positive, so arbitrarily large
/// logits cannot overflow; the normalizer is at least 1 (the max element maps
/// to exactly 1), so the division cannot blow up either. The sum accumulates
/// in `f64`.
pub fn softmax(xs: &mut [f32]) {
    assert!(!xs.is_empty(), "softmax of empty slice");
    let mut max = xs[0];
    for &x in xs.iter() {
        debug_assert!(x.is_finite(), "softmax input must be finite");
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f64;
    for x in xs.iter_mut() {
        let e = f64::from(*x - max).exp();
        sum += e;
        *x = e as f32;
    }
    let inv = (1.0 / sum) as f32;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

/// Layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`.
///
/// Two-pass mean and population variance, both accumulated in `f64`. A
/// constant input vector normalizes to all zeros before gain and bias.
pub fn layer_norm(xs: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Vec<f32> {
    let mut out = vec![0.0; xs.len()];
    layer_norm_into(xs, gain, bias, eps, &mut out);
    out
}

/// [`layer_norm`] writing into a caller-provided buffer, for hot loops.
pub fn layer_norm_into(xs: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    let n = xs.len();
    assert!(n > 0, "layer_norm of empty slice");
    assert_eq!(gain.len(), n, "layer_norm: gain length mismatch");
    assert_eq!(bias.len(), n, "layer_norm: bias length mismatch");
    assert_eq!(out.len(), n, "layer_norm: output length mismatch");
    let mut sum = 0.0f64;
    for &x in xs {
        sum += f64::from(x);
    }
    let mean = sum / n as f64;
    let mut var = 0.0f64;
    for &x in xs {
        let d = f64::from(x) - mean;
        var += d * d;
    }
    var /= n as f64;
    let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
    for i in 0..n {
        let normed = (f64::from(xs[i]) - mean) * inv_std;
        out[i] = (normed as f32) * gain[i] + bias[i];
    }
}

#[cfg(test)]
mod tests {
    use super::{dot64, layer_norm, softmax, Matrix};
    use crate::numkernel::Rng;
    use proptest::prelude::*;

    /// Independent oracle: plain nested-loop matmul entirely in f64.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0f64; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f64;
                for k in 0..a.cols() {
                    acc += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
                out[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(11);
        for trial in 0..20 {
            let (m, k, n) = (
                1 + rng.usize_below(8),
                1 + rng.usize_below(8),
                1 + rng.usize_below(8),
            );
            let a = Matrix::from_fn(m, k, |_, _| rng.range_f32(-1.0, 1.0));
            let b = Matrix::from_fn(k, n, |_, _| rng.range_f32(-1.0, 1.0));
            let c = a.matmul(&b).unwrap();
            let oracle = matmul_oracle(&a, &b);
            for i in 0..m {
                for j in 0..n {
                    let got = f64::from(c.get(i, j));
                    let want = oracle[i * n + j];
                    assert!(
                        (got - want).abs() < 1e-6,
                        "trial {trial}: C[{i}][{j}] = {got}, oracle {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_tb_matches_matmul_with_transpose() {
        let mut rng = Rng::new(12);
        let a = Matrix::from_fn(5, 7, |_, _| rng.normal(0.0, 1.0));
        let b = Matrix::from_fn(3, 7, |_, _| rng.normal(0.0, 1.0));
        let direct = a.matmul_tb(&b).unwrap();
        let via_transpose = a.matmul(&b.transpose()).unwrap();
        for i in 0..direct.rows() {
            for j in 0..direct.cols() {
                assert_eq!(direct.get(i, j), via_transpose.get(i, j));
            }
        }
    }

    #[test]
    fn matmul_dim_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn softmax_closed_form_pair() {
        // exp(0) : exp(ln 3) = 1 : 3.
        let mut xs = vec![0.0, 3.0f32.ln()];
        softmax(&mut xs);
        assert!((xs[0] - 0.25).abs() < 1e-6, "{xs:?}");
        assert!((xs[1] - 0.75).abs() < 1e-6, "{xs:?}");
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut xs = vec![1000.0, 1000.0, 999.0];
        softmax(&mut xs);
        assert!(xs.iter().all(|x| x.is_finite()));
        let sum: f32 = xs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    /// Independent oracle: textbook two-pass layer norm in f64.
    fn layer_norm_oracle(xs: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Vec<f64> {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        let var = xs
            .iter()
            .map(|&x| (f64::from(x) - mean).powi(2))
            .sum::<f64>()
            / n;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                (f64::from(x) - mean) / (var + f64::from(eps)).sqrt() * f64::from(gain[i])
                    + f64::from(bias[i])
            })
            .collect()
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..10 {
            let n = 2 + rng.usize_below(16);
            let xs: Vec<f32> = (0..n).map(|_| rng.range_f32(-3.0, 3.0)).collect();
            let gain: Vec<f32> = (0..n).map(|_| rng.range_f32(0.5, 1.5)).collect();
            let bias: Vec<f32> = (0..n).map(|_| rng.range_f32(-0.5, 0.5)).collect();
            let got = layer_norm(&xs, &gain, &bias, 1e-5);
            let want = layer_norm_oracle(&xs, &gain, &bias, 1e-5);
            for i in 0..n {
                assert!(
                    (f64::from(got[i]) - want[i]).abs() < 1e-5,
                    "index {i}: {} vs {}",
                    got[i],
                    want[i]
                );
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let xs = vec![4.2; 8];
        let gain = vec![1.0; 8];
        let bias = vec![0.0; 8];
        let out = layer_norm(&xs, &gain, &bias, 1e-5);
        for v in out {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn dot_matches_f64_reference() {
        let mut rng = Rng::new(31);
        for _ in 0..10 {
            let n = 1 + rng.usize_below(40);
            let a: Vec<f32> = (0..n).map(|_| rng.range_f32(-2.0, 2.0)).collect();
            let b: Vec<f32> = (0..n).map(|_| rng.range_f32(-2.0, 2.0)).collect();
            let want: f64 = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            assert!((dot64(&a, &b) - want).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn matmul_associative_within_tolerance(
            seed in 0u64..1000,
            m in 1usize..6,
            k in 1usize..6,
            n in 1usize..6,
            p in 1usize..6,
        ) {
            let mut rng = Rng::new(seed);
            let a = Matrix::from_fn(m, k, |_, _| rng.range_f32(-1.0, 1.0));
            let b = Matrix::from_fn(k, n, |_, _| rng.range_f32(-1.0, 1.0));
            let c = Matrix::from_fn(n, p, |_, _| rng.range_f32(-1.0, 1.0));
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for i in 0..m {
                for j in 0..p {
                    prop_assert!(
                        (left.get(i, j) - right.get(i, j)).abs() < 1e-4,
                        "({i},{j}): {} vs {}", left.get(i, j), right.get(i, j)
                    );
                }
            }
        }

        #[test]
        fn softmax_sums_to_one(xs in prop::collection::vec(-30.0f32..30.0, 1..24)) {
            let mut ys = xs;
            softmax(&mut ys);
            let sum: f64 = ys.iter().map(|&y| f64::from(y)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
            prop_assert!(ys.iter().all(|&y| (0.0..=1.0).contains(&y)));
        }

        #[test]
        fn softmax_translation_invariant(
            xs in prop::collection::vec(-10.0f32..10.0, 1..16),
            shift in -50.0f32..50.0,
        ) {
            let mut base = xs.clone();
            softmax(&mut base);
            let mut shifted: Vec<f32> = xs.iter().map(|&x| x + shift).collect();
            softmax(&mut shifted);
            for (a, b) in base.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }
}
