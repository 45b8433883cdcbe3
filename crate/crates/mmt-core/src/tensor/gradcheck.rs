//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub passed: bool,
    pub tol: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} (idx {}, analytic {:.6e}, numeric {:.6e}, tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst_index,
            self.analytic_at_worst,
            self.numeric_at_worst,
            self.tol
        )
    }
}

/// Compare the analytic gradient of a scalar-valued `f` at `x` against
/// central differences with step `eps`.
///
/// `f` is called several times and must be deterministic; a value
/// mismatch between two evaluations is reported as a contract error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    let y = f(&leaf)?;
    if y.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check: f must be scalar-valued, got shape {:?}",
            y.shape()
        )));
    }
    let y2 = f(&leaf)?;
    if y.item().to_bits() != y2.item().to_bits() {
        return Err(Error::contract(format!(
            "grad_check: f is not deterministic ({} vs {})",
            y.item(),
            y2.item()
        )));
    }
    y.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; leaf.len()]);

    let base = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        passed: true,
        tol,
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(x.shape(), plus)?)?.item();
        let fm = f(&Tensor::from_vec(x.shape(), minus)?)?.item();
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-4);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_exact() {
        // At x = 0 the central difference (eps - (-eps)) / 2eps is exact
        // in binary floating point, so the error is exactly zero.
        let x = Tensor::zeros(&[4]);
        let r = grad_check(|t| t.sum(), &x, 1e-5, 1e-12).unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.max_rel_err, 0.0);

        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let r = grad_check(|t| t.sum(), &x, 1e-5, 1e-9).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn softmax_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let r = grad_check(
            |t| {
                let s = t.softmax(0)?;
                s.mul(&s)?.sum()
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn wrong_backward_fails() {
        // Fixture op: forward x^2 summed, backward claims gradient 3x.
        let broken = |t: &Tensor| -> Result<Tensor> {
            let data: Vec<f64> = t.data().iter().map(|v| v * v).collect();
            let p = t.clone();
            let saved = t.to_vec();
            let sq = Tensor::from_op(
                t.shape().to_vec(),
                data,
                vec![t.clone()],
                Box::new(move |g| {
                    let ga: Vec<f64> =
                        g.iter().zip(saved.iter()).map(|(g, x)| g * 3.0 * x).collect();
                    p.accum_grad(&ga);
                }),
            );
            sq.sum()
        };
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, -1.5]).unwrap();
        let r = grad_check(broken, &x, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn matmul_gradient_matches_oracle() {
        // gradient of sum(A.B) w.r.t. A, B fixed
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let a0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let r = grad_check(|a| a.matmul(&b)?.sum(), &a0, 1e-5, 1e-5).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn nondeterministic_f_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let f = |t: &Tensor| -> Result<Tensor> {
            calls.set(calls.get() + 1.0);
            Ok(t.sum()?.scale(1.0 + calls.get()))
        };
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(f, &x, 1e-5, 1e-4),
            Err(Error::Contract(_))
        ));
    }
}
