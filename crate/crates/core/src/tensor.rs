//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records every operation as a node; `backward` walks the tape in
//! reverse and accumulates gradients for every leaf created with
//! `requires_grad = true`. The op set is exactly what the unfolded generator,
//! the patch discriminator, and the training losses need — nothing more.
//! Channel mixing and convolution route their inner products through
//! `matrixmultiply::dgemm` (single-threaded, deterministic for fixed shapes);
//! all other arithmetic is plain loops in fixed order, so a given graph
//! produces bit-identical values and gradients on every run.

use crate::error::{Error, Result};

// ── dense tensor ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || values.len() != n {
            return Err(Error::dimension(format!(
                "shape {shape:?} requires {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty(), "tensor shape must be non-empty");
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    /// I.i.d. uniform samples on `[lo, hi)`, drawn row-major.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

// ── tape plumbing ───────────────────────────────────────────────────────────

/// Handle to a node on a `Tape`. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// out[j, p] = sum_i w[j, i] * in[i, p] over every pixel p.
    ChannelMix { input: usize, weights: usize },
    Conv2d {
        input: usize,
        kernels: usize,
        stride: usize,
        pad: usize,
    },
    Sigmoid { p: usize },
    Relu { p: usize },
    LeakyRelu { p: usize, slope: f64 },
    Square { p: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    Scale { p: usize, c: f64 },
    /// Constant offset: identity for gradients, so the offset isn't kept.
    AddConst { p: usize },
    /// Adds `sign * bias[c]` to every sample of channel `c`.
    ChannelBias { p: usize, bias: usize, sign: f64 },
    Mean { p: usize },
    Mse { a: usize, b: usize },
    /// Mean of the selected entries of a rank-1 parent.
    MeanSubset { p: usize, indices: Vec<usize> },
    BlockMeanDown { p: usize, s: usize },
    ReplicateUp { p: usize, s: usize },
    SliceChannels { p: usize, start: usize },
    ExtractPatch {
        p: usize,
        channel: usize,
        row: usize,
        col: usize,
    },
    FlipRows { p: usize },
    FlipCols { p: usize },
    GlobalMeanPool { p: usize },
    /// out[n] = sum_c w[c] * in[n, c] + b.
    AffineRows { p: usize, w: usize, b: usize },
    Stack { parents: Vec<usize> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-leaf gradients produced by `Tape::backward`. Entries are `None` for
/// nodes the loss does not depend on (or that never required gradients).
pub struct Gradients {
    entries: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.entries.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.entries.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Splits a shape into (batch, channels, plane) for channel-indexed ops:
/// rank-3 `[C, H, W]` has batch 1; rank-4 `[N, C, H, W]` has batch N.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1] * shape[2])),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::dimension(format!(
            "expected rank-3 or rank-4 tensor, got shape {shape:?}"
        ))),
    }
}

/// Row-major dgemm: C(m x n) = alpha * A(m x k) * B(k x n) + beta * C.
/// Strides are in elements; transposition is expressed through them.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Lowers conv2d input windows into a `[cin*k*k, batch*hout*wout]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<f64> {
    let total = batch * hout * wout;
    let mut cols = vec![0.0; cin * k * k * total];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * total..(row + 1) * total];
                for n in 0..batch {
                    let src_plane = &input[(n * cin + ci) * h * w..(n * cin + ci + 1) * h * w];
                    for oy in 0..hout {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let base = (n * hout + oy) * wout;
                        if iy < 0 || iy >= h as isize {
                            continue; // zero padding already in place
                        }
                        let src_row = &src_plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wout {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    grad_input: &mut [f64],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) {
    let total = batch * hout * wout;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * total..(row + 1) * total];
                for n in 0..batch {
                    let plane =
                        &mut grad_input[(n * cin + ci) * h * w..(n * cin + ci + 1) * h * w];
                    for oy in 0..hout {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (n * hout + oy) * wout;
                        for ox in 0..wout {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.values.len(), 1, "node is not scalar: shape {:?}", n.shape);
        n.values[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Gradient-tracked leaf (a trainable parameter).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        self.push(Op::Leaf, shape, vec![0.0; n], false)
    }

    // ── linear maps ─────────────────────────────────────────────────────

    /// Per-pixel linear recombination of channels: input `[Cin, H, W]` with
    /// weights `[Cout, Cin]` yields `[Cout, H, W]`.
    pub fn channel_mix(&mut self, input: Var, weights: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weights).to_vec();
        if ishape.len() != 3 {
            return Err(Error::dimension(format!(
                "channel_mix input must be rank-3, got {ishape:?}"
            )));
        }
        if wshape.len() != 2 || wshape[1] != ishape[0] {
            return Err(Error::dimension(format!(
                "channel_mix weights {wshape:?} incompatible with input {ishape:?}"
            )));
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let cout = wshape[0];
        let plane = h * w;
        let mut values = vec![0.0; cout * plane];
        gemm(
            cout,
            cin,
            plane,
            1.0,
            &self.nodes[weights.0].values,
            cin as isize,
            1,
            &self.nodes[input.0].values,
            plane as isize,
            1,
            0.0,
            &mut values,
            plane as isize,
            1,
        );
        let rg = self.needs(input.0) || self.needs(weights.0);
        Ok(self.push(
            Op::ChannelMix {
                input: input.0,
                weights: weights.0,
            },
            vec![cout, h, w],
            values,
            rg,
        ))
    }

    /// 2-D convolution with square kernels `[Cout, Cin, k, k]`, zero padding
    /// `pad` and the usual floor output extents. Input may be `[Cin, H, W]`
    /// or a batch `[N, Cin, H, W]`; the output rank matches.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernels).to_vec();
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1".to_string()));
        }
        let (batched, batch, cin, h, w) = match ishape.len() {
            3 => (false, 1, ishape[0], ishape[1], ishape[2]),
            4 => (true, ishape[0], ishape[1], ishape[2], ishape[3]),
            _ => {
                return Err(Error::dimension(format!(
                    "conv2d input must be rank-3 or rank-4, got {ishape:?}"
                )))
            }
        };
        if kshape.len() != 4 || kshape[2] != kshape[3] {
            return Err(Error::dimension(format!(
                "conv2d kernels must be [Cout, Cin, k, k], got {kshape:?}"
            )));
        }
        let (cout, kcin, k) = (kshape[0], kshape[1], kshape[2]);
        if kcin != cin {
            return Err(Error::dimension(format!(
                "conv2d kernels expect {kcin} input channels, input has {cin}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dimension(format!(
                "conv2d kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (w + 2 * pad - k) / stride + 1;
        let total = batch * hout * wout;
        let rows = cin * k * k;

        let cols = im2col(
            &self.nodes[input.0].values,
            batch,
            cin,
            h,
            w,
            k,
            stride,
            pad,
            hout,
            wout,
        );
        // One fat GEMM into [cout, batch*hout*wout], then permute to
        // [batch, cout, hout, wout].
        let mut flat = vec![0.0; cout * total];
        gemm(
            cout,
            rows,
            total,
            1.0,
            &self.nodes[kernels.0].values,
            rows as isize,
            1,
            &cols,
            total as isize,
            1,
            0.0,
            &mut flat,
            total as isize,
            1,
        );
        let hw = hout * wout;
        let mut values = vec![0.0; cout * total];
        for co in 0..cout {
            for n in 0..batch {
                let src = &flat[co * total + n * hw..co * total + (n + 1) * hw];
                values[(n * cout + co) * hw..(n * cout + co + 1) * hw].copy_from_slice(src);
            }
        }
        let shape = if batched {
            vec![batch, cout, hout, wout]
        } else {
            vec![cout, hout, wout]
        };
        let rg = self.needs(input.0) || self.needs(kernels.0);
        Ok(self.push(
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                stride,
                pad,
            },
            shape,
            values,
            rg,
        ))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, p: Var) -> Var {
        let values: Vec<f64> = self.nodes[p.0]
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[p.0].shape.clone();
        let rg = self.needs(p.0);
        self.push(Op::Sigmoid { p: p.0 }, shape, values, rg)
    }

    pub fn relu(&mut self, p: Var) -> Var {
        let values: Vec<f64> = self.nodes[p.0].values.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[p.0].shape.clone();
        let rg = self.needs(p.0);
        self.push(Op::Relu { p: p.0 }, shape, values, rg)
    }

    pub fn leaky_relu(&mut self, p: Var, slope: f64) -> Var {
        let values: Vec<f64> = self.nodes[p.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.nodes[p.0].shape.clone();
        let rg = self.needs(p.0);
        self.push(Op::LeakyRelu { p: p.0, slope }, shape, values, rg)
    }

    pub fn square(&mut self, p: Var) -> Var {
        let values: Vec<f64> = self.nodes[p.0].values.iter().map(|&x| x * x).collect();
        let shape = self.nodes[p.0].shape.clone();
        let rg = self.needs(p.0);
        self.push(Op::Square { p: p.0 }, shape, values, rg)
    }

    pub fn scale(&mut self, p: Var, c: f64) -> Var {
        let values: Vec<f64> = self.nodes[p.0].values.iter().map(|&x| c * x).collect();
        let shape = self.nodes[p.0].shape.clone();
        let rg = self.needs(p.0);
        self.push(Op::Scale { p: p.0, c }, shape, values, rg)
    }

    pub fn add_const(&mut self, p: Var, c: f64) -> Var {
        let values: Vec<f64> = self.nodes[p.0].values.iter().map(|&x| x + c).collect();
        let shape = self.nodes[p.0].shape.clone();
        let rg = self.needs(p.0);
        self.push(Op::AddConst { p: p.0 }, shape, values, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa != sb {
            return Err(Error::dimension(format!(
                "{name} operands differ: {sa:?} vs {sb:?}"
            )));
        }
        Ok((sa.clone(), self.needs(a.0) || self.needs(b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "add")?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, shape, values, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "sub")?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, shape, values, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "hadamard")?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Hadamard { a: a.0, b: b.0 }, shape, values, rg))
    }

    /// Adds (`sign = 1.0`) or subtracts (`sign = -1.0`) a per-channel bias.
    pub fn channel_bias(&mut self, p: Var, bias: Var, sign: f64) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        let (batch, channels, plane) = channel_layout(&shape)?;
        let bshape = self.shape(bias).to_vec();
        if bshape.len() != 1 || bshape[0] != channels {
            return Err(Error::dimension(format!(
                "bias shape {bshape:?} does not match {channels} channels"
            )));
        }
        let mut values = self.nodes[p.0].values.clone();
        for n in 0..batch {
            for c in 0..channels {
                let off = sign * self.nodes[bias.0].values[c];
                let base = (n * channels + c) * plane;
                for v in &mut values[base..base + plane] {
                    *v += off;
                }
            }
        }
        let rg = self.needs(p.0) || self.needs(bias.0);
        Ok(self.push(
            Op::ChannelBias {
                p: p.0,
                bias: bias.0,
                sign,
            },
            shape,
            values,
            rg,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn mean(&mut self, p: Var) -> Var {
        let vals = &self.nodes[p.0].values;
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.needs(p.0);
        self.push(Op::Mean { p: p.0 }, vec![1], vec![m], rg)
    }

    /// Mean squared difference over all entries; operands must match shapes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, rg) = self.binary(a, b, "mse")?;
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;
        let mut acc = 0.0;
        for (x, y) in va.iter().zip(vb) {
            let d = x - y;
            acc += d * d;
        }
        let m = acc / va.len() as f64;
        Ok(self.push(Op::Mse { a: a.0, b: b.0 }, vec![1], vec![m], rg))
    }

    /// Mean over a chosen subset of a rank-1 node. Indices must be in range
    /// and non-empty (an empty selection has no defined mean).
    pub fn mean_subset(&mut self, p: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 1 {
            return Err(Error::dimension(format!(
                "mean_subset expects a rank-1 node, got {shape:?}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::contract("mean_subset over empty index set"));
        }
        let n = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "mean_subset index {bad} out of range 0..{n}"
            )));
        }
        let vals = &self.nodes[p.0].values;
        let m = indices.iter().map(|&i| vals[i]).sum::<f64>() / indices.len() as f64;
        let rg = self.needs(p.0);
        Ok(self.push(
            Op::MeanSubset {
                p: p.0,
                indices: indices.to_vec(),
            },
            vec![1],
            vec![m],
            rg,
        ))
    }

    // ── resampling ──────────────────────────────────────────────────────

    /// Averages disjoint `s x s` blocks of a `[C, H, W]` node; `H` and `W`
    /// must be divisible by `s`.
    pub fn block_mean_downsample(&mut self, p: Var, s: usize) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "block_mean_downsample expects rank-3 input, got {shape:?}"
            )));
        }
        if s == 0 {
            return Err(Error::contract("downsample factor must be >= 1"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h % s != 0 || w % s != 0 {
            return Err(Error::dimension(format!(
                "extents {h}x{w} not divisible by factor {s}"
            )));
        }
        let (hl, wl) = (h / s, w / s);
        let inv = 1.0 / (s * s) as f64;
        let src = &self.nodes[p.0].values;
        let mut values = vec![0.0; c * hl * wl];
        for ci in 0..c {
            for yl in 0..hl {
                for xl in 0..wl {
                    let mut acc = 0.0;
                    for dy in 0..s {
                        let row = (ci * h + yl * s + dy) * w + xl * s;
                        for dx in 0..s {
                            acc += src[row + dx];
                        }
                    }
                    values[(ci * hl + yl) * wl + xl] = acc * inv;
                }
            }
        }
        let rg = self.needs(p.0);
        Ok(self.push(Op::BlockMeanDown { p: p.0, s }, vec![c, hl, wl], values, rg))
    }

    /// Nearest-neighbour upsampling: each sample becomes an `s x s` block.
    pub fn replicate_upsample(&mut self, p: Var, s: usize) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "replicate_upsample expects rank-3 input, got {shape:?}"
            )));
        }
        if s == 0 {
            return Err(Error::contract("upsample factor must be >= 1"));
        }
        let (c, hl, wl) = (shape[0], shape[1], shape[2]);
        let (h, w) = (hl * s, wl * s);
        let src = &self.nodes[p.0].values;
        let mut values = vec![0.0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                let src_row = (ci * hl + y / s) * wl;
                let dst_row = (ci * h + y) * w;
                for x in 0..w {
                    values[dst_row + x] = src[src_row + x / s];
                }
            }
        }
        let rg = self.needs(p.0);
        Ok(self.push(Op::ReplicateUp { p: p.0, s }, vec![c, h, w], values, rg))
    }

    // ── shape surgery ───────────────────────────────────────────────────

    /// Contiguous channel range `[start, start + len)` of a rank-3 node.
    pub fn slice_channels(&mut self, p: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "slice_channels expects rank-3 input, got {shape:?}"
            )));
        }
        if len == 0 || start + len > shape[0] {
            return Err(Error::contract(format!(
                "channel slice {start}..{} out of {} channels",
                start + len,
                shape[0]
            )));
        }
        let plane = shape[1] * shape[2];
        let values = self.nodes[p.0].values[start * plane..(start + len) * plane].to_vec();
        let rg = self.needs(p.0);
        Ok(self.push(
            Op::SliceChannels { p: p.0, start },
            vec![len, shape[1], shape[2]],
            values,
            rg,
        ))
    }

    /// Square window of one channel of a rank-3 node, as `[1, size, size]`.
    pub fn extract_patch(
        &mut self,
        p: Var,
        channel: usize,
        row: usize,
        col: usize,
        size: usize,
    ) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "extract_patch expects rank-3 input, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if channel >= c || size == 0 || row + size > h || col + size > w {
            return Err(Error::contract(format!(
                "patch channel {channel} window {row},{col} size {size} exceeds {c}x{h}x{w}"
            )));
        }
        let src = &self.nodes[p.0].values;
        let mut values = vec![0.0; size * size];
        for dy in 0..size {
            let base = (channel * h + row + dy) * w + col;
            values[dy * size..(dy + 1) * size].copy_from_slice(&src[base..base + size]);
        }
        let rg = self.needs(p.0);
        Ok(self.push(
            Op::ExtractPatch {
                p: p.0,
                channel,
                row,
                col,
            },
            vec![1, size, size],
            values,
            rg,
        ))
    }

    fn flip(&mut self, p: Var, rows: bool) -> Var {
        let shape = self.nodes[p.0].shape.clone();
        let rank = shape.len();
        assert!(rank >= 2, "flip needs at least 2 dimensions");
        let h = shape[rank - 2];
        let w = shape[rank - 1];
        let lead: usize = shape[..rank - 2].iter().product();
        let src = &self.nodes[p.0].values;
        let mut values = vec![0.0; src.len()];
        for l in 0..lead {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = if rows { (h - 1 - y, x) } else { (y, w - 1 - x) };
                    values[(l * h + y) * w + x] = src[(l * h + sy) * w + sx];
                }
            }
        }
        let rg = self.needs(p.0);
        let op = if rows {
            Op::FlipRows { p: p.0 }
        } else {
            Op::FlipCols { p: p.0 }
        };
        self.push(op, shape, values, rg)
    }

    /// Reverses row order (vertical flip) of the trailing two dimensions.
    pub fn flip_rows(&mut self, p: Var) -> Var {
        self.flip(p, true)
    }

    /// Reverses column order (horizontal mirror) of the trailing two dims.
    pub fn flip_cols(&mut self, p: Var) -> Var {
        self.flip(p, false)
    }

    /// Stacks equally shaped nodes into a new leading dimension.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("stack of zero nodes"));
        }
        let first = self.shape(parts[0]).to_vec();
        for &v in parts {
            if self.shape(v) != first.as_slice() {
                return Err(Error::dimension(format!(
                    "stack operand shape {:?} differs from {first:?}",
                    self.shape(v)
                )));
            }
        }
        let each: usize = first.iter().product();
        let mut values = Vec::with_capacity(each * parts.len());
        let mut rg = false;
        for &v in parts {
            values.extend_from_slice(&self.nodes[v.0].values);
            rg |= self.needs(v.0);
        }
        let mut shape = Vec::with_capacity(first.len() + 1);
        shape.push(parts.len());
        shape.extend_from_slice(&first);
        Ok(self.push(
            Op::Stack {
                parents: parts.iter().map(|v| v.0).collect(),
            },
            shape,
            values,
            rg,
        ))
    }

    // ── discriminator heads ─────────────────────────────────────────────

    /// Spatial mean per (batch, channel): `[N, C, H, W] -> [N, C]`.
    pub fn global_mean_pool(&mut self, p: Var) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 4 {
            return Err(Error::dimension(format!(
                "global_mean_pool expects rank-4 input, got {shape:?}"
            )));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let src = &self.nodes[p.0].values;
        let inv = 1.0 / plane as f64;
        let mut values = vec![0.0; n * c];
        for i in 0..n * c {
            values[i] = src[i * plane..(i + 1) * plane].iter().sum::<f64>() * inv;
        }
        let rg = self.needs(p.0);
        Ok(self.push(Op::GlobalMeanPool { p: p.0 }, vec![n, c], values, rg))
    }

    /// Shared affine map applied to each row: `[N, C] x [C] + [1] -> [N]`.
    pub fn affine_rows(&mut self, p: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 2 {
            return Err(Error::dimension(format!(
                "affine_rows expects rank-2 input, got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(w) != [c] {
            return Err(Error::dimension(format!(
                "affine_rows weights {:?} do not match {c} columns",
                self.shape(w)
            )));
        }
        if self.shape(b) != [1] {
            return Err(Error::dimension(format!(
                "affine_rows bias must be shape [1], got {:?}",
                self.shape(b)
            )));
        }
        let src = &self.nodes[p.0].values;
        let wv = &self.nodes[w.0].values;
        let bias = self.nodes[b.0].values[0];
        let mut values = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            values[i] = row.iter().zip(wv).map(|(x, y)| x * y).sum::<f64>() + bias;
        }
        let rg = self.needs(p.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            Op::AffineRows {
                p: p.0,
                w: w.0,
                b: b.0,
            },
            vec![n],
            values,
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Consumes the tape; gradients for
    /// every gradient-tracked leaf the loss depends on are returned.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("backward target not on this tape"));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.backprop_node(id, &g, &mut grads);
            // Leaves keep their accumulated gradient for the caller.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { entries: grads })
    }

    fn accumulate<'a>(
        nodes: &[Node],
        grads: &'a mut Vec<Option<Vec<f64>>>,
        id: usize,
    ) -> Option<&'a mut [f64]> {
        if !nodes[id].requires_grad {
            return None;
        }
        let len = nodes[id].values.len();
        Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::ChannelMix { input, weights } => {
                let ishape = &nodes[*input].shape;
                let (cin, plane) = (ishape[0], ishape[1] * ishape[2]);
                let cout = nodes[*weights].shape[0];
                if let Some(dw) = Self::accumulate(nodes, grads, *weights) {
                    // dW (cout x cin) += g (cout x plane) * in^T (plane x cin)
                    gemm(
                        cout,
                        plane,
                        cin,
                        1.0,
                        g,
                        plane as isize,
                        1,
                        &nodes[*input].values,
                        1,
                        plane as isize,
                        1.0,
                        dw,
                        cin as isize,
                        1,
                    );
                }
                if let Some(di) = Self::accumulate(nodes, grads, *input) {
                    // dIn (cin x plane) += W^T (cin x cout) * g (cout x plane)
                    gemm(
                        cin,
                        cout,
                        plane,
                        1.0,
                        &nodes[*weights].values,
                        1,
                        cin as isize,
                        g,
                        plane as isize,
                        1,
                        1.0,
                        di,
                        plane as isize,
                        1,
                    );
                }
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                pad,
            } => {
                let ishape = &nodes[*input].shape;
                let (batch, cin, h, w) = match ishape.len() {
                    3 => (1, ishape[0], ishape[1], ishape[2]),
                    _ => (ishape[0], ishape[1], ishape[2], ishape[3]),
                };
                let kshape = &nodes[*kernels].shape;
                let (cout, k) = (kshape[0], kshape[2]);
                let hout = (h + 2 * pad - k) / *stride + 1;
                let wout = (w + 2 * pad - k) / *stride + 1;
                let total = batch * hout * wout;
                let rows = cin * k * k;
                let hw = hout * wout;
                // Permute upstream gradient to [cout, batch*hout*wout].
                let mut gp = vec![0.0; cout * total];
                for n in 0..batch {
                    for co in 0..cout {
                        let src = &g[(n * cout + co) * hw..(n * cout + co + 1) * hw];
                        gp[co * total + n * hw..co * total + (n + 1) * hw].copy_from_slice(src);
                    }
                }
                let needs_k = nodes[*kernels].requires_grad;
                let needs_i = nodes[*input].requires_grad;
                if needs_k {
                    // Rebuilding the column matrix is cheaper than holding it
                    // on every node for the life of the tape.
                    let cols = im2col(
                        &nodes[*input].values,
                        batch,
                        cin,
                        h,
                        w,
                        k,
                        *stride,
                        *pad,
                        hout,
                        wout,
                    );
                    if let Some(dk) = Self::accumulate(nodes, grads, *kernels) {
                        // dK (cout x rows) += gp (cout x total) * cols^T
                        gemm(
                            cout,
                            total,
                            rows,
                            1.0,
                            &gp,
                            total as isize,
                            1,
                            &cols,
                            1,
                            total as isize,
                            1.0,
                            dk,
                            rows as isize,
                            1,
                        );
                    }
                }
                if needs_i {
                    // dcols (rows x total) = K^T (rows x cout) * gp
                    let mut dcols = vec![0.0; rows * total];
                    gemm(
                        rows,
                        cout,
                        total,
                        1.0,
                        &nodes[*kernels].values,
                        1,
                        rows as isize,
                        &gp,
                        total as isize,
                        1,
                        0.0,
                        &mut dcols,
                        total as isize,
                        1,
                    );
                    if let Some(di) = Self::accumulate(nodes, grads, *input) {
                        col2im_add(&dcols, di, batch, cin, h, w, k, *stride, *pad, hout, wout);
                    }
                }
            }
            Op::Sigmoid { p } => {
                let y = &nodes[id].values;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for i in 0..g.len() {
                        dp[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Relu { p } => {
                let x = &nodes[*p].values;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            dp[i] += g[i];
                        }
                    }
                }
            }
            Op::LeakyRelu { p, slope } => {
                let x = &nodes[*p].values;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for i in 0..g.len() {
                        dp[i] += g[i] * if x[i] > 0.0 { 1.0 } else { *slope };
                    }
                }
            }
            Op::Square { p } => {
                let x = &nodes[*p].values;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for i in 0..g.len() {
                        dp[i] += 2.0 * x[i] * g[i];
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = Self::accumulate(nodes, grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i];
                    }
                }
                if let Some(db) = Self::accumulate(nodes, grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i];
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = Self::accumulate(nodes, grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i];
                    }
                }
                if let Some(db) = Self::accumulate(nodes, grads, *b) {
                    for i in 0..g.len() {
                        db[i] -= g[i];
                    }
                }
            }
            Op::Hadamard { a, b } => {
                let va = &nodes[*a].values;
                let vb = &nodes[*b].values;
                if let Some(da) = Self::accumulate(nodes, grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if let Some(db) = Self::accumulate(nodes, grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale { p, c } => {
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for i in 0..g.len() {
                        dp[i] += c * g[i];
                    }
                }
            }
            Op::AddConst { p } => {
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for i in 0..g.len() {
                        dp[i] += g[i];
                    }
                }
            }
            Op::ChannelBias { p, bias, sign } => {
                let (batch, channels, plane) =
                    channel_layout(&nodes[id].shape).expect("validated at forward");
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for i in 0..g.len() {
                        dp[i] += g[i];
                    }
                }
                if let Some(db) = Self::accumulate(nodes, grads, *bias) {
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * plane;
                            let s: f64 = g[base..base + plane].iter().sum();
                            db[c] += sign * s;
                        }
                    }
                }
            }
            Op::Mean { p } => {
                let inv = 1.0 / nodes[*p].values.len() as f64;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for d in dp.iter_mut() {
                        *d += g[0] * inv;
                    }
                }
            }
            Op::Mse { a, b } => {
                let va = &nodes[*a].values;
                let vb = &nodes[*b].values;
                let scale = 2.0 * g[0] / va.len() as f64;
                if let Some(da) = Self::accumulate(nodes, grads, *a) {
                    for i in 0..va.len() {
                        da[i] += scale * (va[i] - vb[i]);
                    }
                }
                if let Some(db) = Self::accumulate(nodes, grads, *b) {
                    for i in 0..va.len() {
                        db[i] -= scale * (va[i] - vb[i]);
                    }
                }
            }
            Op::MeanSubset { p, indices } => {
                let share = g[0] / indices.len() as f64;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for &i in indices {
                        dp[i] += share;
                    }
                }
            }
            Op::BlockMeanDown { p, s } => {
                let shape = &nodes[*p].shape;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (hl, wl) = (h / s, w / s);
                let inv = 1.0 / (s * s) as f64;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                dp[(ci * h + y) * w + x] +=
                                    g[(ci * hl + y / s) * wl + x / s] * inv;
                            }
                        }
                    }
                }
            }
            Op::ReplicateUp { p, s } => {
                let shape = &nodes[*p].shape;
                let (c, hl, wl) = (shape[0], shape[1], shape[2]);
                let (h, w) = (hl * s, wl * s);
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                dp[(ci * hl + y / s) * wl + x / s] += g[(ci * h + y) * w + x];
                            }
                        }
                    }
                }
            }
            Op::SliceChannels { p, start } => {
                let plane = nodes[*p].shape[1] * nodes[*p].shape[2];
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for (i, &gv) in g.iter().enumerate() {
                        dp[start * plane + i] += gv;
                    }
                }
            }
            Op::ExtractPatch {
                p,
                channel,
                row,
                col,
            } => {
                let shape = &nodes[*p].shape;
                let (h, w) = (shape[1], shape[2]);
                let size = nodes[id].shape[1];
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for dy in 0..size {
                        let base = (channel * h + row + dy) * w + col;
                        for dx in 0..size {
                            dp[base + dx] += g[dy * size + dx];
                        }
                    }
                }
            }
            Op::FlipRows { p } | Op::FlipCols { p } => {
                let rows = matches!(nodes[id].op, Op::FlipRows { .. });
                let shape = &nodes[id].shape;
                let rank = shape.len();
                let h = shape[rank - 2];
                let w = shape[rank - 1];
                let lead: usize = shape[..rank - 2].iter().product();
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for l in 0..lead {
                        for y in 0..h {
                            for x in 0..w {
                                let (sy, sx) =
                                    if rows { (h - 1 - y, x) } else { (y, w - 1 - x) };
                                dp[(l * h + sy) * w + sx] += g[(l * h + y) * w + x];
                            }
                        }
                    }
                }
            }
            Op::GlobalMeanPool { p } => {
                let shape = &nodes[*p].shape;
                let plane = shape[2] * shape[3];
                let inv = 1.0 / plane as f64;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for (i, &gv) in g.iter().enumerate() {
                        let base = i * plane;
                        for d in &mut dp[base..base + plane] {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::AffineRows { p, w, b } => {
                let c = nodes[*p].shape[1];
                let src = &nodes[*p].values;
                let wv = &nodes[*w].values;
                if let Some(dp) = Self::accumulate(nodes, grads, *p) {
                    for (i, &gv) in g.iter().enumerate() {
                        for j in 0..c {
                            dp[i * c + j] += gv * wv[j];
                        }
                    }
                }
                if let Some(dw) = Self::accumulate(nodes, grads, *w) {
                    for (i, &gv) in g.iter().enumerate() {
                        for j in 0..c {
                            dw[j] += gv * src[i * c + j];
                        }
                    }
                }
                if let Some(db) = Self::accumulate(nodes, grads, *b) {
                    db[0] += g.iter().sum::<f64>();
                }
            }
            Op::Stack { parents } => {
                let each = nodes[parents[0]].values.len();
                for (slot, &pid) in parents.iter().enumerate() {
                    if let Some(dp) = Self::accumulate(nodes, grads, pid) {
                        for i in 0..each {
                            dp[i] += g[slot * each + i];
                        }
                    }
                }
            }
        }
    }
}
