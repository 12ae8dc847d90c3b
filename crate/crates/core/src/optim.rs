//! Adam optimizer, pretraining weight clamp, and the finite-difference
//! gradient checker used to validate every tape operation.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// First/second-moment state for one fixed list of parameter tensors.
/// `step` counts completed updates; bias correction uses `step` after the
/// increment, so the first call corrects with exponent 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh zero-moment state shaped after `params`.
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_tensors(&self) -> usize {
        self.m.len()
    }

    /// Raw state access for serialization: (first moments, second moments).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds a state from serialized moments.
    pub fn from_parts(
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step: u64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::contract("adam moment lists disagree in shape"));
        }
        Ok(AdamState {
            m,
            v,
            step,
            beta1,
            beta2,
            eps,
        })
    }
}

/// One bias-corrected Adam update applied in place.
///
/// `grads` must align one-to-one with `params` (same count, same lengths) and
/// with the state the params were registered under. A zero gradient leaves a
/// fresh parameter unchanged while still advancing `step`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "params/grads count mismatch");
    assert_eq!(params.len(), state.m.len(), "state built for different params");
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        assert_eq!(p.len(), g.len(), "gradient {i} has wrong length");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let vals = p.values_mut();
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            vals[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}

/// Clamps every entry of the selected tensors into `[-bound, bound]`.
/// Used after each pretraining step to keep mixing weights below one in
/// magnitude; thresholds are deliberately left out of `selected`.
pub fn clamp_params(params: &mut [&mut Tensor], selected: &[bool], bound: f64) {
    assert_eq!(params.len(), selected.len());
    assert!(bound > 0.0, "clamp bound must be positive");
    for (p, &sel) in params.iter_mut().zip(selected) {
        if !sel {
            continue;
        }
        for v in p.values_mut() {
            *v = v.clamp(-bound, bound);
        }
    }
}

/// Compares tape gradients of a scalar-valued function against central finite
/// differences at `point`, returning the worst relative error
/// `|a - n| / max(|a| + |n|, 1e-8)` over every coordinate of every tensor.
///
/// The function is re-evaluated twice per coordinate, so keep `point` small.
pub fn grad_check<F>(f: &F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = point.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// Like [`grad_check`], but numerically probes at most `per_tensor` randomly
/// chosen coordinates of each tensor. The analytic gradient is still computed
/// in full; only the finite-difference side is subsampled, which makes large
/// parameter tensors (convolution kernels) checkable in reasonable time.
pub fn grad_check_sampled<F>(
    f: &F,
    point: &[Tensor],
    h: f64,
    per_tensor: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if per_tensor == 0 {
        return Err(Error::contract("per-tensor coordinate budget must be positive"));
    }
    let coords: Vec<Vec<usize>> = point
        .iter()
        .map(|t| {
            if t.len() <= per_tensor {
                (0..t.len()).collect()
            } else {
                let mut idx = rand::seq::index::sample(rng, t.len(), per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    grad_check_coords(f, point, h, &coords)
}

fn grad_check_coords<F>(f: &F, point: &[Tensor], h: f64, coords: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::contract("grad_check target must be scalar"));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(point)
        .map(|(v, t)| grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    // Numeric evaluation helper: no gradients needed, constants suffice.
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut worst: f64 = 0.0;
    let mut nudged: Vec<Tensor> = point.to_vec();
    for ti in 0..point.len() {
        for &j in &coords[ti] {
            let orig = point[ti].values()[j];
            nudged[ti].values_mut()[j] = orig + h;
            let fp = eval(&nudged)?;
            nudged[ti].values_mut()[j] = orig - h;
            let fm = eval(&nudged)?;
            nudged[ti].values_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
