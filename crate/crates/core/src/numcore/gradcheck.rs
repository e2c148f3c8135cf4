//! Central finite-difference verification of analytic gradients.

use super::{Graph, NumError, Tensor, Var};

/// Denominator floor for the relative error so that coordinates whose true
/// gradient is ~0 are judged on absolute error instead of roundoff noise.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of `f` at `params` with central differences.
///
/// `f` receives a fresh graph and one leaf per parameter tensor and must return
/// a scalar node.
pub fn grad_check<F>(params: &[Tensor], f: F, step: f64, tolerance: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return Err(NumError::InvalidArgument(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0, tolerance };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let a = analytic[p].data()[i];
            if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
                return Err(NumError::NonFinite { param: p, coordinate: i });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((p, i));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[8], 1.0, &mut rng);
        let c = Tensor::randn(&[8], 1.0, &mut rng);
        let report = grad_check(
            &[x],
            |g, v| {
                let s = g.softmax(v[0])?;
                let cv = g.constant(c.clone());
                let p = g.mul(s, cv)?;
                Ok(g.sum(p))
            },
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let report = grad_check(&[Tensor::vector(vec![1.0, -2.0])], |g, _| Ok(g.scalar(4.0)), 1e-6, 1e-12).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn step_out_of_range_rejected() {
        assert!(grad_check(&[Tensor::scalar(1.0)], |g, v| Ok(g.sum(v[0])), 1e-2, 1e-4).is_err());
    }

    #[test]
    fn non_finite_reported_with_coordinate() {
        let err = grad_check(
            &[Tensor::vector(vec![1.0, 0.0])],
            |g, v| {
                let c = g.constant(Tensor::vector(vec![0.0, f64::INFINITY]));
                let p = g.mul(v[0], c)?;
                Ok(g.sum(p))
            },
            1e-6,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, NumError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn dpo_margin_derivative_at_zero() {
        // d/dΔ of -log σ(βΔ) at Δ = 0 with β = 0.1 is -β/2.
        let beta = 0.1;
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.scale(v[0], beta);
            let ls = g.log_sigmoid(s);
            Ok::<Var, NumError>(g.neg(ls))
        };
        let mut g = Graph::new();
        let d = g.leaf(Tensor::scalar(0.0));
        let loss = f(&mut g, &[d]).unwrap();
        let analytic = g.backward(loss).unwrap().get(d).item();
        let h = 1e-6;
        let lm = |x: f64| -super::super::tensor::log_sigmoid(beta * x);
        let numeric = (lm(h) - lm(-h)) / (2.0 * h);
        assert!((analytic + 0.05).abs() < 1e-15);
        assert!((numeric + 0.05).abs() < 1e-9);
    }
}
