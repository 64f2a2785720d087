//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Lower bound on the relative-error denominator, so gradients that are zero
/// analytically are compared in absolute terms against finite-difference
/// round-off.
pub const REL_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval_scalar<F, E>(f: &F, point: &Tensor<f64>, mk: &impl Fn() -> Graph<f64>) -> Result<f64, E>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    let g = mk();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    let v = y.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()).into());
    }
    Ok(v)
}

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, returning the largest elementwise
/// relative error (denominator `max(|a|, |b|, REL_FLOOR)`).
pub fn grad_check<F, E>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64, E>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    check_on(f, point, h, Graph::new)
}

/// [`grad_check`] on training-mode graphs seeded with `seed`, so stochastic
/// primitives such as dropout draw the same mask on every evaluation.
pub fn grad_check_train<F, E>(f: F, point: &Tensor<f64>, h: f64, seed: u64) -> Result<f64, E>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    let empty = ParamStore::new(0);
    check_on(f, point, h, || Graph::with_params(&empty, true, seed))
}

fn check_on<F, E>(f: F, point: &Tensor<f64>, h: f64, mk: impl Fn() -> Graph<f64>) -> Result<f64, E>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    let g = mk();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    if !y.item().is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()).into());
    }
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval_scalar(&f, &plus, &mk)? - eval_scalar(&f, &minus, &mk)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over the parameters of a store. `f` builds the loss on a
/// graph bound to the (possibly perturbed) store. At most `max_per_param`
/// randomly chosen coordinates of each tensor are probed when given.
pub fn grad_check_params<F, E>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<f64, E>
where
    F: for<'g> Fn(&'g Graph<f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let g = Graph::with_params(s, false, 0);
        let v = f(&g)?.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective".into()).into());
        }
        Ok(v)
    };
    let g = Graph::with_params(store, false, 0);
    let loss = f(&g)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (id, _, t) in store.iter() {
        let analytic = grads.param(id);
        let coords: Vec<usize> = match max_per_param {
            Some(k) if k < t.len() => sample(&mut rng, t.len(), k).into_vec(),
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += h;
            let up = eval(&s)?;
            s.get_mut(id).data_mut()[i] -= 2.0 * h;
            let down = eval(&s)?;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
