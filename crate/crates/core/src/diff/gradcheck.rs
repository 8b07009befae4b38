//! Central-difference gradient verification.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::ParameterStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled); `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn eval<F>(store: &ParameterStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Graph(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    let val = v.data()[0];
    if !val.is_finite() {
        return Err(Error::NonFinite(format!("function value {val}")));
    }
    Ok(val)
}

/// Compares backward gradients of `f` with central differences over every
/// trainable parameter of `store`:
/// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParameterStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward_into(out, store)?;
    }
    if let Some((name, i, v)) = store.first_non_finite_grad() {
        return Err(Error::NonFinite(format!("analytic gradient `{name}`[{i}] = {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = (0..store.len())
        .map(super::params::ParamId)
        .filter(|&id| store.get(id).trainable)
        .collect();
    for id in ids {
        let n = store.get(id).values.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let analytic = store.get(id).grad[i];
            let orig = store.get(id).values[i];
            store.get_mut(id).values[i] = orig + opts.eps;
            let plus = eval(store, &f)?;
            store.get_mut(id).values[i] = orig - opts.eps;
            let minus = eval(store, &f)?;
            store.get_mut(id).values[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), i));
                }
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
