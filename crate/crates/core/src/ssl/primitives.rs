//! Building blocks shared by the holistic methods: sharpening, MixUp,
//! distribution rectification and confidence masks. All operate on plain
//! tensors; none of them carries gradients.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor substituted for an exactly-zero unlabeled class expectation.
pub const RECTIFY_EPS: f64 = 1e-8;

fn check_prob_rows(op: &'static str, p: &Tensor) -> Result<()> {
    if p.rank() != 2 {
        return Err(Error::shape(op, p.shape(), &[]));
    }
    for (i, row) in p.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            if s == 0.0 {
                return Err(Error::invalid(op, format!("row {i} is all zeros")));
            }
            return Err(Error::invalid(
                op,
                format!("row {i} is not a probability vector (sum {s})"),
            ));
        }
    }
    Ok(())
}

/// `p_i^{1/T} / Σ_j p_j^{1/T}` per row, evaluated in the log domain.
pub fn sharpen(p: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(
            "sharpen",
            format!("temperature {temperature} must be > 0"),
        ));
    }
    check_prob_rows("sharpen", p)?;
    let mut out = p.clone();
    let k = p.last_dim();
    for row in out.data_mut().chunks_mut(k) {
        if temperature == 1.0 {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            continue;
        }
        let logs: Vec<f64> = row.iter().map(|v| v.ln() / temperature).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (v, l) in row.iter_mut().zip(&logs) {
            *v = (l - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Convex combination with `λ' = max(λ, 1 − λ)`, so the result stays closer
/// to `(x1, y1)`. Returns `(x̃, ỹ, λ')`.
pub fn mixup_with_lambda(
    x1: &Tensor,
    y1: &Tensor,
    x2: &Tensor,
    y2: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor, f64)> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape("mixup", x1.shape(), x2.shape()));
    }
    if y1.shape() != y2.shape() {
        return Err(Error::shape("mixup", y1.shape(), y2.shape()));
    }
    let lp = lambda.max(1.0 - lambda);
    let mix = |a: &Tensor, b: &Tensor| {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| lp * u + (1.0 - lp) * v)
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    Ok((mix(x1, x2)?, mix(y1, y2)?, lp))
}

/// Draws `λ ~ Beta(α, α)` and mixes as in [`mixup_with_lambda`].
pub fn mixup_pair<R: Rng + ?Sized>(
    x1: &Tensor,
    y1: &Tensor,
    x2: &Tensor,
    y2: &Tensor,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(
            "mixup",
            format!("alpha {alpha} must be > 0"),
        ));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid("mixup", e.to_string()))?;
    let lambda = beta.sample(rng);
    mixup_with_lambda(x1, y1, x2, y2, lambda)
}

/// Column means of a `(B, k)` matrix.
pub(crate) fn column_means(p: &Tensor) -> Vec<f64> {
    let k = p.last_dim();
    let mut m = vec![0.0; k];
    let n = p.shape()[0].max(1) as f64;
    for row in p.rows() {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Rectifies unlabeled predictions by the ratio of labeled to unlabeled
/// expected class distributions (batch means), then L1-normalizes each row.
pub fn adamatch_rectify(q_u: &Tensor, q_l: &Tensor) -> Result<Tensor> {
    check_prob_rows("adamatch_rectify", q_u)?;
    check_prob_rows("adamatch_rectify", q_l)?;
    if q_u.last_dim() != q_l.last_dim() {
        return Err(Error::shape("adamatch_rectify", q_u.shape(), q_l.shape()));
    }
    rectify_with(q_u, &column_means(q_l), &column_means(q_u))
}

/// Rectification with explicit expectations. An exactly-zero entry of
/// `e_unlabeled` is replaced by [`RECTIFY_EPS`]; a row whose rectified mass
/// vanishes is left as it was.
pub fn rectify_with(q_u: &Tensor, e_labeled: &[f64], e_unlabeled: &[f64]) -> Result<Tensor> {
    let k = q_u.last_dim();
    if e_labeled.len() != k || e_unlabeled.len() != k {
        return Err(Error::shape(
            "adamatch_rectify",
            &[k],
            &[e_labeled.len(), e_unlabeled.len()],
        ));
    }
    let ratio: Vec<f64> = e_labeled
        .iter()
        .zip(e_unlabeled)
        .map(|(l, u)| l / if *u == 0.0 { RECTIFY_EPS } else { *u })
        .collect();
    let mut out = q_u.clone();
    for row in out.data_mut().chunks_mut(k) {
        let scaled: Vec<f64> = row.iter().zip(&ratio).map(|(q, r)| q * r).collect();
        let s: f64 = scaled.iter().sum();
        if s > 0.0 && s.is_finite() {
            for (v, sc) in row.iter_mut().zip(&scaled) {
                *v = sc / s;
            }
        }
    }
    Ok(out)
}

/// `τ · mean_b max_j q_l[b, j]`.
pub fn relative_threshold(q_l: &Tensor, tau: f64) -> f64 {
    let n = q_l.shape()[0].max(1) as f64;
    let mean_max: f64 = q_l
        .rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n;
    tau * mean_max
}

/// `1` where the row's top probability reaches `threshold`, else `0`.
pub fn confidence_mask(q: &Tensor, threshold: f64) -> Vec<f64> {
    q.rows()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sharpen_identity_at_unit_temperature() {
        let p = rows(&[&[0.2, 0.3, 0.5]]);
        let s = sharpen(&p, 1.0).unwrap();
        for (a, b) in s.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sharpen_half_temperature() {
        let s = sharpen(&rows(&[&[0.6, 0.4]]), 0.5).unwrap();
        assert!((s.data()[0] - 0.36 / 0.52).abs() < 1e-12);
        assert!((s.data()[1] - 0.16 / 0.52).abs() < 1e-12);
        assert!((s.data()[0] - 0.692308).abs() < 1e-6);
    }

    #[test]
    fn sharpen_low_temperature_is_nearly_one_hot() {
        let s = sharpen(&rows(&[&[0.6, 0.4]]), 0.01).unwrap();
        assert!(s.data()[0] > 1.0 - 1e-6);
    }

    #[test]
    fn sharpen_errors() {
        assert!(sharpen(&rows(&[&[0.5, 0.5]]), 0.0).is_err());
        let err = sharpen(&rows(&[&[0.0, 0.0]]), 1.0).unwrap_err().to_string();
        assert!(err.contains("all zeros"), "{err}");
    }

    #[test]
    fn mixup_forced_lambda() {
        let x1 = Tensor::from_vec(vec![1.0, 0.0]);
        let x2 = Tensor::from_vec(vec![0.0, 1.0]);
        let (x, y, lp) = mixup_with_lambda(&x1, &x1, &x2, &x2, 0.3).unwrap();
        assert_eq!(lp, 0.7);
        assert!((x.data()[0] - 0.7).abs() < 1e-15 && (x.data()[1] - 0.3).abs() < 1e-15);
        assert_eq!(x, y);
        let (mid, _, lp) = mixup_with_lambda(&x1, &x1, &x2, &x2, 0.5).unwrap();
        assert_eq!(lp, 0.5);
        assert_eq!(mid.data(), &[0.5, 0.5]);
    }

    #[test]
    fn mixup_of_identical_pairs_is_identity() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let y = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
        let (mx, my, _) = mixup_pair(&x, &y, &x, &y, 0.75, &mut stream(0, Stream::Mixup)).unwrap();
        for (a, b) in mx.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in my.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(mixup_pair(&x, &y, &x, &y, 0.0, &mut stream(0, Stream::Mixup)).is_err());
    }

    #[test]
    fn rectify_worked_example() {
        let q_u = rows(&[&[0.8, 0.2]]);
        let out = rectify_with(&q_u, &[0.4, 0.6], &[0.8, 0.2]).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-12);
        assert!((out.data()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn rectify_equal_expectations_is_identity() {
        let q = rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.6, 0.3]]);
        let out = adamatch_rectify(&q, &q).unwrap();
        for (a, b) in out.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rectify_zero_expectation_uses_floor() {
        let q_u = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let q_l = rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let out = adamatch_rectify(&q_u, &q_l).unwrap();
        assert!(out.is_finite());
        assert_eq!(out.data(), q_u.data());
    }

    #[test]
    fn thresholds_and_masks() {
        let q_l = rows(&[&[0.9, 0.1], &[0.1, 0.9]]);
        assert!((relative_threshold(&q_l, 0.6) - 0.54).abs() < 1e-12);
        let uniform = rows(&[&[1.0 / 3.0; 3], &[1.0 / 3.0; 3]]);
        assert!((relative_threshold(&uniform, 0.9) - 0.3).abs() < 1e-12);
        let q = rows(&[&[0.95, 0.05], &[0.6, 0.4]]);
        assert_eq!(confidence_mask(&q, 0.9), vec![1.0, 0.0]);
    }
}
