//! Cross-entropy and the teacher-student distillation objective.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Numerically stable softmax of `z / t`.
pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let exps: Vec<f64> = z.iter().map(|&v| (v / t - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(z / t)`.
pub fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let lse = z.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v / t - lse).collect()
}

fn check_labels(logits: &Matrix<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} label(s) for {} logit row(s)",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= logits.cols()) {
        return Err(Error::InvalidValue {
            index: i,
            reason: format!("label {y} out of range for {} classes", logits.cols()),
        });
    }
    if logits.rows() == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Matrix<f64>, labels: &[usize]) -> Result<(f64, Matrix<f64>)> {
    distill_loss(logits, None, labels, 1.0, 0.0, 1.0)
}

/// Distillation objective, averaged over the batch:
///
/// `L = alpha * CE(y, softmax(z_s)) + beta * CE(softmax(z_t / T), softmax(z_s / T))`
///
/// Returns the loss and `dL/dz_s`. The teacher logits are constants. With no
/// teacher (or `beta == 0`) the soft term vanishes.
pub fn distill_loss(
    student: &Matrix<f64>,
    teacher: Option<&Matrix<f64>>,
    labels: &[usize],
    alpha: f64,
    beta: f64,
    temperature: f64,
) -> Result<(f64, Matrix<f64>)> {
    check_labels(student, labels)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if let Some(t) = teacher {
        if (t.rows(), t.cols()) != (student.rows(), student.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "teacher logits {}x{} vs student {}x{}",
                t.rows(),
                t.cols(),
                student.rows(),
                student.cols()
            )));
        }
    }
    let (rows, cols) = (student.rows(), student.cols());
    let inv_b = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let zs = student.row(i);
        let ls = log_softmax(zs, 1.0);
        let p = softmax(zs, 1.0);
        loss += -alpha * ls[labels[i]];
        let mut g: Vec<f64> = p.iter().map(|&v| alpha * v).collect();
        g[labels[i]] -= alpha;

        if let (Some(t), true) = (teacher, beta != 0.0) {
            let pt = softmax(t.row(i), temperature);
            let lst = log_softmax(zs, temperature);
            let pst = softmax(zs, temperature);
            loss += -beta * pt.iter().zip(&lst).map(|(a, b)| a * b).sum::<f64>();
            for j in 0..cols {
                g[j] += beta * (pst[j] - pt[j]) / temperature;
            }
        }
        grad.extend(g.into_iter().map(|v| v * inv_b));
    }
    Ok((loss * inv_b, Matrix::from_vec(rows, cols, grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_example() {
        let zs = row(&[0.0, 0.0]);
        let zt = row(&[3f64.ln(), 0.0]);
        let (l, _) = distill_loss(&zs, Some(&zt), &[0], 1.0, 1.0, 1.0).unwrap();
        let ln2 = 2f64.ln();
        assert!((l - 2.0 * ln2).abs() < 1e-12, "{l}");
        let (hard, _) = distill_loss(&zs, Some(&zt), &[0], 1.0, 0.0, 1.0).unwrap();
        assert!((hard - ln2).abs() < 1e-12);
        let (soft, _) = distill_loss(&zs, Some(&zt), &[0], 0.0, 1.0, 1.0).unwrap();
        // CE([0.75, 0.25], [0.5, 0.5]) = ln 2
        assert!((soft - ln2).abs() < 1e-12);
    }

    #[test]
    fn matched_logits_give_entropy_and_no_soft_gradient() {
        let z = row(&[1.0, -0.5, 2.0]);
        let (soft, g) = distill_loss(&z, Some(&z), &[0], 0.0, 1.0, 1.0).unwrap();
        let p = softmax(z.row(0), 1.0);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((soft - entropy).abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn zero_beta_is_plain_cross_entropy() {
        let zs = Matrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let zt = Matrix::from_vec(2, 3, vec![5.0, 0.0, 0.0, 0.0, 0.0, 9.0]).unwrap();
        let a = distill_loss(&zs, Some(&zt), &[2, 1], 1.0, 0.0, 2.0).unwrap();
        let b = cross_entropy(&zs, &[2, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &t in &[1.0, 2.0, 4.0] {
            let zs = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let zt = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let labels = [1, 3, 0];
            let (_, g) = distill_loss(&zs, Some(&zt), &labels, 0.7, 0.5, t).unwrap();
            let h = 1e-6;
            for idx in 0..12 {
                let mut plus = zs.data().to_vec();
                let mut minus = zs.data().to_vec();
                plus[idx] += h;
                minus[idx] -= h;
                let lp = distill_loss(&Matrix::from_vec(3, 4, plus).unwrap(), Some(&zt), &labels, 0.7, 0.5, t).unwrap().0;
                let lm = distill_loss(&Matrix::from_vec(3, 4, minus).unwrap(), Some(&zt), &labels, 0.7, 0.5, t).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g.data()[idx]).abs() < 1e-5, "T={t} idx={idx}: {fd} vs {}", g.data()[idx]);
            }
        }
    }

    #[test]
    fn errors() {
        let z = row(&[0.0, 1.0]);
        assert!(matches!(
            distill_loss(&z, Some(&row(&[0.0, 1.0, 2.0])), &[0], 1.0, 1.0, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            distill_loss(&z, Some(&z), &[0], 1.0, 1.0, 0.0),
            Err(Error::InvalidSpec(_))
        ));
        assert!(cross_entropy(&z, &[2]).is_err());
        assert!(cross_entropy(&z, &[0, 1]).is_err());
    }
}
