//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GradError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per input tensor (all of them when the tensor is
    /// smaller).
    pub samples_per_input: usize,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_input: 24,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub excluded: usize,
}

/// Relative error used by [`gradient_check`].
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(GradError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok((v.data()[0], g.kink_signature()))
}

/// Compares backward gradients of `f` w.r.t. every tensor in `inputs`
/// against central differences on randomly sampled coordinates.
///
/// A coordinate is excluded when `f(x+eps)` or `f(x-eps)` takes a different
/// branch than `f(x)` at any non-smooth operator (ReLU, |x|, sort, mask).
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(GradError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    let base_sig = g.kink_signature();
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let n = inputs[ti].numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_input {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let analytic = grads.get(*var).map_or(0.0, |t| t.data()[c]);
            let orig = inputs[ti].data()[c];
            work[ti].data_mut()[c] = orig + cfg.eps;
            let (fp, sp) = eval(&f, &work)?;
            work[ti].data_mut()[c] = orig - cfg.eps;
            let (fm, sm) = eval(&f, &work)?;
            work[ti].data_mut()[c] = orig;
            if sp != base_sig || sm != base_sig {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let err = relative_error(analytic, numeric, cfg.abs_floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
