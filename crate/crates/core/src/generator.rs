//! The unfolded generator network.
//!
//! `K` unrolled sparse-coding iterations followed by a learned synthesis
//! dictionary. Each layer refines a code map `A` (shape `[M, H, W]`) given
//! the stacked network input `X` (upsampled spectral cube + RGB guide):
//!
//! ```text
//! A_{k+1} = act(A_k - W_k A_k + S_k X - lambda_k)
//! xhat    = act_out(D A_K - lambda_out),   D = d_raw ⊙ d_raw
//! ```
//!
//! with per-pixel (1x1) channel mixing throughout. The activation is the
//! logistic sigmoid in the trained network; a ReLU mode exists because with
//! `W = D^T D / L`, `S = D^T / L`, `lambda = lambda_ista / L` a single ReLU
//! layer reproduces one exact iterative-shrinkage step on non-negative codes,
//! which pins the unfolding to its classical ancestor in tests. Squaring
//! `d_raw` keeps the synthesis dictionary non-negative by construction.
//! The first channels of `xhat` are the spectral reconstruction, the rest
//! the RGB reconstruction.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-layer activation choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

fn activate(tape: &mut Tape, v: Var, act: Activation) -> Var {
    match act {
        Activation::Sigmoid => tape.sigmoid(v),
        Activation::Relu => tape.relu(v),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLayer {
    /// Code self-mixing, `[M, M]`.
    pub w: Tensor,
    /// Input injection, `[M, B + rgb]`.
    pub s: Tensor,
    /// Per-code threshold, `[M]`.
    pub lambda: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub layers: Vec<GeneratorLayer>,
    /// Pre-squaring synthesis dictionary, `[B + rgb, M]`.
    pub d_raw: Tensor,
    /// Output threshold, `[B + rgb]`.
    pub lambda_out: Tensor,
    spectral_channels: usize,
    rgb_channels: usize,
    code_atoms: usize,
}

/// Tape handles for one staging of the parameters.
pub struct GeneratorVars {
    pub layers: Vec<(Var, Var, Var)>,
    pub d_raw: Var,
    pub lambda_out: Var,
}

/// Outputs of a staged forward pass.
pub struct ForwardVars {
    /// Full reconstruction, `[B + rgb, H, W]`.
    pub xhat: Var,
    /// Spectral slice, `[B, H, W]`.
    pub yhat: Var,
    /// RGB slice, `[rgb, H, W]`.
    pub zhat: Var,
}

impl GeneratorParams {
    /// Deterministic initialization. Mixing weights are uniform on
    /// `[-r, r]` with `r = 1 / sqrt(M)`, the raw dictionary uniform on
    /// `[0, r)`, thresholds zero. Draw order is fixed: for each layer W then
    /// S (row-major), then `d_raw` — changing it would silently change every
    /// seeded experiment.
    pub fn init(
        spectral_channels: usize,
        rgb_channels: usize,
        code_atoms: usize,
        num_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if spectral_channels == 0 || rgb_channels == 0 || code_atoms == 0 {
            return Err(Error::config(format!(
                "generator needs positive channel/atom counts, got B={spectral_channels} rgb={rgb_channels} M={code_atoms}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (code_atoms as f64).sqrt();
        let input_channels = spectral_channels + rgb_channels;
        let layers = (0..num_layers)
            .map(|_| GeneratorLayer {
                w: Tensor::uniform(vec![code_atoms, code_atoms], -r, r, &mut rng),
                s: Tensor::uniform(vec![code_atoms, input_channels], -r, r, &mut rng),
                lambda: Tensor::zeros(vec![code_atoms]),
            })
            .collect();
        Ok(GeneratorParams {
            layers,
            d_raw: Tensor::uniform(vec![input_channels, code_atoms], 0.0, r, &mut rng),
            lambda_out: Tensor::zeros(vec![input_channels]),
            spectral_channels,
            rgb_channels,
            code_atoms,
        })
    }

    pub fn spectral_channels(&self) -> usize {
        self.spectral_channels
    }

    pub fn rgb_channels(&self) -> usize {
        self.rgb_channels
    }

    pub fn input_channels(&self) -> usize {
        self.spectral_channels + self.rgb_channels
    }

    pub fn code_atoms(&self) -> usize {
        self.code_atoms
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Rebuilds params from tensors in the canonical order (used by
    /// checkpoint loading). Dimensions are cross-checked.
    pub fn from_tensors(
        spectral_channels: usize,
        rgb_channels: usize,
        code_atoms: usize,
        num_layers: usize,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        if tensors.len() != 3 * num_layers + 2 {
            return Err(Error::contract(format!(
                "expected {} generator tensors, got {}",
                3 * num_layers + 2,
                tensors.len()
            )));
        }
        let input_channels = spectral_channels + rgb_channels;
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let w = it.next().expect("counted");
            let s = it.next().expect("counted");
            let lambda = it.next().expect("counted");
            if w.shape() != [code_atoms, code_atoms]
                || s.shape() != [code_atoms, input_channels]
                || lambda.shape() != [code_atoms]
            {
                return Err(Error::dimension("generator layer tensor shapes disagree"));
            }
            layers.push(GeneratorLayer { w, s, lambda });
        }
        let d_raw = it.next().expect("counted");
        let lambda_out = it.next().expect("counted");
        if d_raw.shape() != [input_channels, code_atoms] || lambda_out.shape() != [input_channels]
        {
            return Err(Error::dimension("generator output tensor shapes disagree"));
        }
        Ok(GeneratorParams {
            layers,
            d_raw,
            lambda_out,
            spectral_channels,
            rgb_channels,
            code_atoms,
        })
    }

    /// Parameter tensors in canonical order: per layer (W, S, lambda), then
    /// `d_raw`, then `lambda_out`. The optimizer, clamping mask, and
    /// checkpoint layout all index into this order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.s);
            out.push(&l.lambda);
        }
        out.push(&self.d_raw);
        out.push(&self.lambda_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.s);
            out.push(&mut l.lambda);
        }
        out.push(&mut self.d_raw);
        out.push(&mut self.lambda_out);
        out
    }

    /// Which canonical tensors count as mixing weights for the pretraining
    /// clamp (W, S, d_raw — thresholds are exempt).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(3 * self.layers.len() + 2);
        for _ in &self.layers {
            mask.extend_from_slice(&[true, true, false]);
        }
        mask.push(true); // d_raw
        mask.push(false); // lambda_out
        mask
    }

    /// The non-negative synthesis dictionary actually applied to codes:
    /// every entry of `d_raw`, squared.
    pub fn effective_dictionary(&self) -> Tensor {
        let vals = self.d_raw.values().iter().map(|&x| x * x).collect();
        Tensor::new(self.d_raw.shape().to_vec(), vals).expect("same shape")
    }

    /// Puts every parameter on a tape.
    pub fn stage(&self, tape: &mut Tape, requires_grad: bool) -> GeneratorVars {
        GeneratorVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(&l.w, requires_grad),
                        tape.leaf(&l.s, requires_grad),
                        tape.leaf(&l.lambda, requires_grad),
                    )
                })
                .collect(),
            d_raw: tape.leaf(&self.d_raw, requires_grad),
            lambda_out: tape.leaf(&self.lambda_out, requires_grad),
        }
    }

    /// Convenience forward pass on a private tape; returns
    /// (full reconstruction, spectral slice, RGB slice) as tensors.
    pub fn forward(&self, x: &Tensor, final_sigmoid: bool) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = self.stage(&mut tape, false);
        let out = forward_on_tape(
            &mut tape,
            &vars,
            xv,
            self.spectral_channels,
            self.rgb_channels,
            self.code_atoms,
            final_sigmoid,
            Activation::Sigmoid,
        )?;
        Ok((
            tape.tensor(out.xhat),
            tape.tensor(out.yhat),
            tape.tensor(out.zhat),
        ))
    }
}

/// One unfolded layer: `act(a - W a + S x - lambda)`.
pub fn layer_update(
    tape: &mut Tape,
    a: Var,
    x: Var,
    w: Var,
    s: Var,
    lambda: Var,
    act: Activation,
) -> Result<Var> {
    let wa = tape.channel_mix(a, w)?;
    let keep = tape.sub(a, wa)?;
    let inject = tape.channel_mix(x, s)?;
    let mixed = tape.add(keep, inject)?;
    let shifted = tape.channel_bias(mixed, lambda, -1.0)?;
    Ok(activate(tape, shifted, act))
}

/// Full staged forward pass. `x` must be `[B + rgb, H, W]`; the code starts
/// at zero. With `final_sigmoid` disabled the raw affine output is returned
/// (used during pretraining).
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &GeneratorVars,
    x: Var,
    spectral_channels: usize,
    rgb_channels: usize,
    code_atoms: usize,
    final_sigmoid: bool,
    act: Activation,
) -> Result<ForwardVars> {
    let xshape = tape.shape(x).to_vec();
    if xshape.len() != 3 || xshape[0] != spectral_channels + rgb_channels {
        return Err(Error::dimension(format!(
            "network input must be [{}, H, W], got {xshape:?}",
            spectral_channels + rgb_channels
        )));
    }
    let (h, w) = (xshape[1], xshape[2]);
    let mut a = tape.zeros(vec![code_atoms, h, w]);
    for &(wv, sv, lv) in &vars.layers {
        a = layer_update(tape, a, x, wv, sv, lv, act)?;
    }
    let d = tape.square(vars.d_raw);
    let synth = tape.channel_mix(a, d)?;
    let raw = tape.channel_bias(synth, vars.lambda_out, -1.0)?;
    let xhat = if final_sigmoid {
        activate(tape, raw, act)
    } else {
        raw
    };
    let yhat = tape.slice_channels(xhat, 0, spectral_channels)?;
    let zhat = tape.slice_channels(xhat, spectral_channels, rgb_channels)?;
    Ok(ForwardVars { xhat, yhat, zhat })
}

// ── classical iterative-shrinkage reference ─────────────────────────────────

/// One non-negative iterative shrinkage step, written as straight-line code
/// over plain slices (no tape involvement):
/// `A' = relu(A - D^T (D A - X) / L - lambda / (2 L))`.
///
/// This is the proximal-gradient update for `ista_objective` with step size
/// `1/(2L)`: the residual term's gradient is `2 D^T (D A - X)`, so the move
/// is `D^T (D A - X) / L` and the shrinkage weight is `lambda / (2 L)`.  Any
/// `L` at or above the top eigenvalue of `D^T D` guarantees the objective
/// never increases.
///
/// Shapes: `a` is `[M, N]`, `d` is `[C, M]`, `x` is `[C, N]`.
pub fn ista_step(a: &Tensor, d: &Tensor, x: &Tensor, lambda: f64, lip: f64) -> Result<Tensor> {
    let (m, n) = match a.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::dimension(format!("codes must be rank-2, got {s:?}"))),
    };
    let (c, dm) = match d.shape() {
        [c, dm] => (*c, *dm),
        s => {
            return Err(Error::dimension(format!(
                "dictionary must be rank-2, got {s:?}"
            )))
        }
    };
    if dm != m || x.shape() != [c, n] {
        return Err(Error::dimension(format!(
            "incompatible shapes: codes {:?}, dictionary {:?}, data {:?}",
            a.shape(),
            d.shape(),
            x.shape()
        )));
    }
    if lip <= 0.0 {
        return Err(Error::contract("step constant must be positive"));
    }
    let av = a.values();
    let dv = d.values();
    let xv = x.values();

    // residual R = D A - X, shape [C, N]
    let mut resid = vec![0.0; c * n];
    for ci in 0..c {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..m {
                acc += dv[ci * m + k] * av[k * n + j];
            }
            resid[ci * n + j] = acc - xv[ci * n + j];
        }
    }
    // A' = relu(A - D^T R / L - lambda / (2 L))
    let shrink = lambda / (2.0 * lip);
    let mut out = vec![0.0; m * n];
    for k in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += dv[ci * m + k] * resid[ci * n + j];
            }
            out[k * n + j] = (av[k * n + j] - acc / lip - shrink).max(0.0);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Objective minimized by `ista_step`:
/// `|D A - X|_F^2 + lambda * sum |A|`.
pub fn ista_objective(a: &Tensor, d: &Tensor, x: &Tensor, lambda: f64) -> Result<f64> {
    let (m, n) = match a.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::dimension(format!("codes must be rank-2, got {s:?}"))),
    };
    let c = d.shape()[0];
    if d.shape() != [c, m] || x.shape() != [c, n] {
        return Err(Error::dimension("objective operand shapes disagree"));
    }
    let av = a.values();
    let dv = d.values();
    let xv = x.values();
    let mut fit = 0.0;
    for ci in 0..c {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..m {
                acc += dv[ci * m + k] * av[k * n + j];
            }
            let r = acc - xv[ci * n + j];
            fit += r * r;
        }
    }
    let l1: f64 = av.iter().map(|v| v.abs()).sum();
    Ok(fit + lambda * l1)
}

/// Upper bound on the largest eigenvalue of `D^T D` via power iteration
/// (deterministic all-ones start), inflated by 5% because the Rayleigh
/// quotient approaches the eigenvalue from below.
pub fn lipschitz_upper(d: &Tensor, iters: usize) -> Result<f64> {
    let (c, m) = match d.shape() {
        [c, m] => (*c, *m),
        s => {
            return Err(Error::dimension(format!(
                "dictionary must be rank-2, got {s:?}"
            )))
        }
    };
    let dv = d.values();
    let mut v = vec![1.0 / (m as f64).sqrt(); m];
    let mut rayleigh = 0.0;
    for _ in 0..iters.max(1) {
        // u = D v; w = D^T u
        let mut u = vec![0.0; c];
        for ci in 0..c {
            u[ci] = (0..m).map(|k| dv[ci * m + k] * v[k]).sum();
        }
        let mut w = vec![0.0; m];
        for k in 0..m {
            w[k] = (0..c).map(|ci| dv[ci * m + k] * u[ci]).sum();
        }
        rayleigh = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(1e-12); // zero dictionary: any positive constant works
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    Ok(rayleigh * 1.05)
}
