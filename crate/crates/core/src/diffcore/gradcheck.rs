//! Finite-difference verification of analytic gradients.

use super::graph::{Graph, Value};
use super::tensor::Tensor;
use super::DiffError;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst relative discrepancy over all checked coordinates.
    pub max_err: f64,
    /// `(input index, flat coordinate)` where the worst discrepancy occurred.
    pub worst: Option<(usize, usize)>,
    /// Coordinates checked in total.
    pub checked: usize,
}

impl GradCheck {
    pub fn within(&self, tol: f64) -> bool {
        self.max_err <= tol
    }
}

/// Compares the analytic gradient of `build`'s scalar output against central
/// finite differences with step `h`, for every coordinate of every input
/// marked `requires_grad`.
///
/// The discrepancy at a coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// `build` must construct the computation from scratch on the graph it is
/// given — it runs once per perturbed coordinate.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheck, DiffError>
where
    F: Fn(&Graph, &[Value]) -> Result<Value, DiffError>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64, DiffError> {
        let g = Graph::new();
        let vals = tensors.iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>, _>>()?;
        build(&g, &vals)?.item()
    };

    // Analytic pass.
    let g = Graph::new();
    let vals = inputs.iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>, _>>()?;
    let out = build(&g, &vals)?;
    if out.numel() != 1 {
        return Err(DiffError::NotScalar { shape: out.shape() });
    }
    out.backward()?;
    let analytic: Vec<Option<Vec<f64>>> =
        vals.iter().map(|v| v.grad().map(|t| t.data)).collect();

    let mut report = GradCheck { max_err: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let grads = analytic[i].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grads[j];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradient() {
        // f(x) = sum(sigmoid(x) * x)
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]).with_grad();
        let r = grad_check(
            |_, vals| vals[0].sigmoid()?.mul(&vals[0])?.sum(),
            &[x],
            1e-6,
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.within(1e-7), "max_err = {}", r.max_err);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        // Forward computes sum(x^2) but we sabotage it by detaching one
        // factor, which halves the gradient.
        let x = Tensor::from_vec(vec![1.5]).with_grad();
        let r = grad_check(
            |_, vals| {
                let detached = vals[0].detach()?;
                vals[0].mul(&detached)?.sum()
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(r.max_err > 0.3);
    }

    #[test]
    fn skips_inputs_without_grad() {
        let x = Tensor::from_vec(vec![1.0]).with_grad();
        let c = Tensor::from_vec(vec![2.0]);
        let r = grad_check(|_, vals| vals[0].mul(&vals[1])?.sum(), &[x, c], 1e-6).unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.within(1e-9));
    }
}
