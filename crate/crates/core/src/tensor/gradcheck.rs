//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Result, Tape, Tensor, Var};

/// Settings for a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter (sampled), or all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probe crossed a ReLU/max-pool/clamp kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    fn failed(tol: f64, err: impl ToString) -> Self {
        Self {
            params: Vec::new(),
            tol,
            passed: false,
            error: Some(err.to_string()),
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `f` with central differences at default settings.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let named: Vec<(String, Tensor)> = params
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("p{i}"), t.clone()))
        .collect();
    GradCheck {
        eps,
        tol,
        ..GradCheck::default()
    }
    .run(&named, f)
}

impl GradCheck {
    pub fn run<F>(&self, params: &[(String, Tensor)], f: F) -> GradCheckReport
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = values.iter().map(|t| tape.param(t)).collect();
            let out = f(&tape, &vars)?;
            let value = out
                .item()
                .ok_or_else(|| super::TensorError::NonScalarLoss(out.shape()))?;
            Ok((value, tape.kink_signature()))
        };

        let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let (analytic, base_sig) = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = values.iter().map(|t| tape.param(t)).collect();
            let out = match f(&tape, &vars) {
                Ok(v) => v,
                Err(e) => return GradCheckReport::failed(self.tol, e),
            };
            let grads = match tape.backward(out) {
                Ok(g) => g,
                Err(e) => return GradCheckReport::failed(self.tol, e),
            };
            let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
            (analytic, tape.kink_signature())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = Vec::with_capacity(params.len());
        for (p, (name, _)) in params.iter().enumerate() {
            let n = values[p].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < n => {
                    let mut c = sample(&mut rng, n, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            let mut check = ParamCheck {
                name: name.clone(),
                max_rel_err: 0.0,
                checked: 0,
                skipped: 0,
                passed: true,
            };
            for c in coords {
                let orig = values[p].data()[c];
                values[p].data_mut()[c] = orig + self.eps;
                let plus = eval(&values);
                values[p].data_mut()[c] = orig - self.eps;
                let minus = eval(&values);
                values[p].data_mut()[c] = orig;
                let ((fp, sp), (fm, sm)) = match (plus, minus) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(self.tol, e),
                };
                if sp != base_sig || sm != base_sig {
                    check.skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.eps);
                let err = relative_error(analytic[p][c], numeric);
                check.max_rel_err = check.max_rel_err.max(err);
                check.checked += 1;
            }
            check.passed = check.max_rel_err < self.tol;
            report.push(check);
        }
        GradCheckReport {
            passed: report.iter().all(|c| c.passed),
            params: report,
            tol: self.tol,
            error: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_passes() {
        let x = Tensor::new([4], vec![0.3, -1.2, 1.9, 0.7]).unwrap();
        let r = grad_check(|_, p| p[0].square()?.sum(), &[x], 1e-3, 1e-4);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let x = Tensor::new([3], vec![0.3, -1.2, 1.9]).unwrap();
        let r = grad_check(
            |_, p| p[0].square()?.grad_scale(2.0)?.sum(),
            &[x],
            1e-3,
            1e-4,
        );
        assert!(!r.passed);
        // analytic is exactly twice the numeric derivative: |2n - n| / 3|n| = 1/3
        assert!((r.max_rel_err() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn kink_crossing_coordinates_are_skipped() {
        let x = Tensor::new([2], vec![1e-4, 1.0]).unwrap();
        let r = grad_check(|_, p| p[0].relu()?.sum(), &[x], 1e-3, 1e-4);
        assert!(r.passed);
        assert_eq!(r.params[0].skipped, 1);
        assert_eq!(r.params[0].checked, 1);
    }

    #[test]
    fn evaluation_errors_are_reported_not_thrown() {
        let x = Tensor::new([1], vec![-1.0]).unwrap();
        let r = grad_check(|_, p| p[0].log()?.sum(), &[x], 1e-3, 1e-4);
        assert!(!r.passed);
        assert!(r.error.unwrap().contains("log"));
    }
}
