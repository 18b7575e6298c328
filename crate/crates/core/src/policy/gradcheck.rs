//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use super::model::Model;
use super::train::{loss_and_grad, Decisions, LossOptions};
use super::PolicyError;
use crate::edit_calculus::RollInExample;

/// A scalar function of a flat `f64` parameter vector with an analytic gradient.
pub trait Differentiable {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn loss(&self) -> Result<f64, PolicyError>;
    fn gradient(&self) -> Result<Vec<f64>, PolicyError>;

    /// The loss plus a tag that is equal on any two points between which the
    /// function is smooth (for piecewise-smooth functions such as ReLU nets).
    fn loss_and_region(&self) -> Result<(f64, Option<u64>), PolicyError> {
        Ok((self.loss()?, None))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates whose `±eps` step crossed a non-differentiable point and
    /// were re-measured with a smaller step.
    pub refined: usize,
}

/// Denominator floor of [`relative_error`]. Central differences of an O(1)
/// loss in 64-bit carry roughly 1e-11 of rounding noise at `eps = 1e-4`.
pub const REL_FLOOR: f64 = 1e-7;

/// Relative error with a floor on the denominator so that parameters with a
/// vanishing gradient compare absolutely.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Draw `count` distinct parameter indices (sorted).
pub fn sample_indices<R: Rng + ?Sized>(n_params: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut v = index::sample(rng, n_params, count.min(n_params)).into_vec();
    v.sort_unstable();
    v
}

fn central_difference<D: Differentiable>(f: &mut D, i: usize, eps: f64) -> Result<(f64, bool), PolicyError> {
    let orig = f.params()[i];
    f.params_mut()[i] = orig + eps;
    let up = f.loss_and_region();
    f.params_mut()[i] = orig - eps;
    let down = f.loss_and_region();
    f.params_mut()[i] = orig;
    let ((up, ru), (down, rd)) = (up?, down?);
    Ok(((up - down) / (2.0 * eps), ru == rd))
}

/// Compare the analytic gradient with `(f(p + eps) - f(p - eps)) / 2 eps` at
/// `indices`. When the two probes land in different smooth regions the step
/// is shrunk tenfold, at most three times.
pub fn grad_check<D: Differentiable>(f: &mut D, indices: &[usize], eps: f64) -> Result<GradCheckReport, PolicyError> {
    if indices.is_empty() {
        return Err(PolicyError::NoParameters);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= f.params().len()) {
        return Err(PolicyError::Config(format!("parameter index {bad} out of range")));
    }
    let grad = f.gradient()?;
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_rel_error: 0.0,
        worst_index: indices[0],
        analytic: grad[indices[0]],
        numeric: f64::NAN,
        refined: 0,
    };
    for &i in indices {
        let (mut numeric, mut smooth) = central_difference(f, i, eps)?;
        let mut step = eps;
        if !smooth {
            report.refined += 1;
        }
        for _ in 0..3 {
            if smooth {
                break;
            }
            step /= 10.0;
            (numeric, smooth) = central_difference(f, i, step)?;
        }
        let err = relative_error(grad[i], numeric);
        if err > report.max_rel_error || report.numeric.is_nan() {
            report = GradCheckReport {
                max_rel_error: err.max(report.max_rel_error),
                worst_index: i,
                analytic: grad[i],
                numeric,
                ..report
            };
        }
    }
    Ok(report)
}

/// The full training loss of a batch with argmax decisions frozen at the
/// starting parameters.
pub struct ModelObjective<'a> {
    pub model: Model<f64>,
    pub batch: &'a [RollInExample],
    pub opts: LossOptions,
    pub decisions: Decisions,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: Model<f64>, batch: &'a [RollInExample], opts: LossOptions) -> Result<Self, PolicyError> {
        let decisions = loss_and_grad(&model, batch, &opts, None)?.decisions;
        Ok(Self {
            model,
            batch,
            opts,
            decisions,
        })
    }
}

impl Differentiable for ModelObjective<'_> {
    fn params(&self) -> &[f64] {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.model.params
    }

    fn loss(&self) -> Result<f64, PolicyError> {
        Ok(loss_and_grad(&self.model, self.batch, &self.opts, Some(&self.decisions))?.total)
    }

    fn gradient(&self) -> Result<Vec<f64>, PolicyError> {
        Ok(loss_and_grad(&self.model, self.batch, &self.opts, Some(&self.decisions))?.grads)
    }

    fn loss_and_region(&self) -> Result<(f64, Option<u64>), PolicyError> {
        let out = loss_and_grad(&self.model, self.batch, &self.opts, Some(&self.decisions))?;
        Ok((out.total, Some(out.activation_signature)))
    }
}

/// `0.5 * sum_i (x_i . w - y_i)^2`.
#[derive(Debug, Clone)]
pub struct LinearQuadratic {
    pub w: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl LinearQuadratic {
    fn residuals(&self) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.y)
            .map(|(xi, yi)| xi.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() - yi)
            .collect()
    }
}

impl Differentiable for LinearQuadratic {
    fn params(&self) -> &[f64] {
        &self.w
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    fn loss(&self) -> Result<f64, PolicyError> {
        Ok(0.5 * self.residuals().iter().map(|r| r * r).sum::<f64>())
    }

    fn gradient(&self) -> Result<Vec<f64>, PolicyError> {
        let mut g = vec![0.0; self.w.len()];
        for (xi, r) in self.x.iter().zip(self.residuals()) {
            for (gj, xj) in g.iter_mut().zip(xi) {
                *gj += r * xj;
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = LinearQuadratic {
            w: (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            x: (0..6).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            y: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let idx: Vec<usize> = (0..10).collect();
        let r = grad_check(&mut f, &idx, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn empty_request_is_an_error() {
        let mut f = LinearQuadratic {
            w: vec![1.0],
            x: vec![vec![1.0]],
            y: vec![0.0],
        };
        assert!(matches!(grad_check(&mut f, &[], 1e-4), Err(PolicyError::NoParameters)));
        assert!(grad_check(&mut f, &[3], 1e-4).is_err());
    }
}
