//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates, sampled uniformly without
    /// replacement. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Relative error used throughout: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares precomputed analytic gradients against central differences of
/// `f` and returns the maximum relative error over the checked coordinates.
pub fn compare_gradients(
    f: &dyn Fn(&[Tensor]) -> f64,
    params: &[Tensor],
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::GradCheck(format!(
            "{} params but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(Error::GradCheck(format!(
                "gradient shape {:?} for param {:?}",
                a.shape(),
                p.shape()
            )));
        }
    }
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(limit) if limit < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), limit).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let base = f(params);
    if !base.is_finite() {
        return Err(Error::GradCheck(format!("loss is not finite: {base}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (t, i) in chosen {
        let original = work[t].data()[i];
        work[t].data_mut()[i] = original + opts.epsilon;
        let plus = f(&work);
        work[t].data_mut()[i] = original - opts.epsilon;
        let minus = f(&work);
        work[t].data_mut()[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::GradCheck(format!(
                "loss not finite around param {t}[{i}]"
            )));
        }
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        worst = worst.max(relative_error(analytic[t].data()[i], numeric));
    }
    Ok(worst)
}

/// Builds `f` on a fresh tape with `params` as trainable leaves, runs the
/// reverse sweep, and checks the result by central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let loss = g.value(root).item();
    if !loss.is_finite() {
        return Err(Error::GradCheck(format!("loss is not finite: {loss}")));
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| p.zeros_like()))
        .collect();
    let eval = |p: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = p.iter().map(|t| g.constant(t.clone())).collect();
        match f(&mut g, &vars) {
            Ok(root) => g.value(root).item(),
            Err(_) => f64::NAN,
        }
    };
    compare_gradients(&eval, params, &analytic, opts)
}
