//! Resampling, data-consistency projection, patch extraction, and channel
//! correlation on spectral cubes.
//!
//! These run on plain `SpectralCube`s with no autodiff involvement; the tape
//! in `tensor` carries its own copies of the resampling ops for use inside
//! training graphs, and the two are cross-checked in tests.

use crate::cube::SpectralCube;
use crate::error::{Error, Result};

/// Averages disjoint `s x s` blocks per channel. Extents must be divisible
/// by `s`; `s = 1` is the identity.
pub fn block_mean_downsample(cube: &SpectralCube, s: usize) -> Result<SpectralCube> {
    if s == 0 {
        return Err(Error::contract("downsample factor must be >= 1"));
    }
    let (c, h, w) = (cube.channels(), cube.height(), cube.width());
    if h % s != 0 || w % s != 0 {
        return Err(Error::dimension(format!(
            "extents {h}x{w} not divisible by factor {s}"
        )));
    }
    let (hl, wl) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = SpectralCube::zeros(c, hl, wl);
    for ci in 0..c {
        let src = cube.plane(ci);
        let dst = out.plane_mut(ci);
        for yl in 0..hl {
            for xl in 0..wl {
                let mut acc = 0.0;
                for dy in 0..s {
                    let row = (yl * s + dy) * w + xl * s;
                    for dx in 0..s {
                        acc += src[row + dx];
                    }
                }
                dst[yl * wl + xl] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling: every sample becomes an `s x s` block.
pub fn replicate_upsample(cube: &SpectralCube, s: usize) -> Result<SpectralCube> {
    if s == 0 {
        return Err(Error::contract("upsample factor must be >= 1"));
    }
    let (c, hl, wl) = (cube.channels(), cube.height(), cube.width());
    let (h, w) = (hl * s, wl * s);
    let mut out = SpectralCube::zeros(c, h, w);
    for ci in 0..c {
        let src = cube.plane(ci);
        let dst = out.plane_mut(ci);
        for y in 0..h {
            let src_row = (y / s) * wl;
            for x in 0..w {
                dst[y * w + x] = src[src_row + x / s];
            }
        }
    }
    Ok(out)
}

/// Separable bilinear upsampling with half-pixel-aligned sample centers:
/// output sample `i` reads source position `(i + 0.5) / s - 0.5`, clamped to
/// the edges. Results are clipped into `[0, 1]`.
pub fn bilinear_upsample(cube: &SpectralCube, s: usize) -> Result<SpectralCube> {
    if s == 0 {
        return Err(Error::contract("upsample factor must be >= 1"));
    }
    let (c, hl, wl) = (cube.channels(), cube.height(), cube.width());
    let (h, w) = (hl * s, wl * s);

    // Precompute per-axis source indices and interpolation weights.
    let axis = |out_len: usize, src_len: usize| -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut t = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let pos = (i as f64 + 0.5) / s as f64 - 0.5;
            let clamped = pos.clamp(0.0, (src_len - 1) as f64);
            let base = clamped.floor();
            let frac = clamped - base;
            let b = base as usize;
            lo.push(b);
            hi.push((b + 1).min(src_len - 1));
            t.push(frac);
        }
        (lo, hi, t)
    };
    let (ylo, yhi, ty) = axis(h, hl);
    let (xlo, xhi, tx) = axis(w, wl);

    let mut out = SpectralCube::zeros(c, h, w);
    for ci in 0..c {
        let src = cube.plane(ci);
        let dst = out.plane_mut(ci);
        for y in 0..h {
            let (r0, r1, fy) = (ylo[y] * wl, yhi[y] * wl, ty[y]);
            for x in 0..w {
                let (c0, c1, fx) = (xlo[x], xhi[x], tx[x]);
                let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
                let bot = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
                dst[y * w + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// The block-mean downsampling map for fixed high-resolution extents,
/// together with its adjoint. `apply` followed by `adjoint` scales by
/// `1/s^2` per block; `replicate_upsample` equals `s^2 *` adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownsampleOp {
    factor: usize,
    hr_height: usize,
    hr_width: usize,
}

impl DownsampleOp {
    pub fn new(factor: usize, hr_height: usize, hr_width: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::contract("downsample factor must be >= 1"));
        }
        if hr_height == 0 || hr_width == 0 || hr_height % factor != 0 || hr_width % factor != 0 {
            return Err(Error::dimension(format!(
                "extents {hr_height}x{hr_width} not divisible by factor {factor}"
            )));
        }
        Ok(DownsampleOp {
            factor,
            hr_height,
            hr_width,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn lr_extents(&self) -> (usize, usize) {
        (self.hr_height / self.factor, self.hr_width / self.factor)
    }

    pub fn apply(&self, hr: &SpectralCube) -> Result<SpectralCube> {
        if hr.height() != self.hr_height || hr.width() != self.hr_width {
            return Err(Error::dimension(format!(
                "operator built for {}x{}, got {}x{}",
                self.hr_height,
                self.hr_width,
                hr.height(),
                hr.width()
            )));
        }
        block_mean_downsample(hr, self.factor)
    }

    /// Adjoint of `apply` in the Frobenius inner product: spreads each
    /// low-resolution sample uniformly over its block, scaled by `1/s^2`.
    pub fn adjoint(&self, lr: &SpectralCube) -> Result<SpectralCube> {
        let (hl, wl) = self.lr_extents();
        if lr.height() != hl || lr.width() != wl {
            return Err(Error::dimension(format!(
                "adjoint expects {hl}x{wl} input, got {}x{}",
                lr.height(),
                lr.width()
            )));
        }
        let mut up = replicate_upsample(lr, self.factor)?;
        let inv = 1.0 / (self.factor * self.factor) as f64;
        for v in up.data_mut() {
            *v *= inv;
        }
        Ok(up)
    }
}

/// Orthogonal projection onto the affine set of cubes whose block means
/// equal `y_lr`: subtracts the replicated residual of the block means.
/// Idempotent and exactly consistent after one application.
pub fn project_consistent(
    hr: &SpectralCube,
    y_lr: &SpectralCube,
    s: usize,
) -> Result<SpectralCube> {
    if hr.channels() != y_lr.channels() {
        return Err(Error::dimension(format!(
            "channel mismatch: {} vs {}",
            hr.channels(),
            y_lr.channels()
        )));
    }
    let down = block_mean_downsample(hr, s)?;
    if down.height() != y_lr.height() || down.width() != y_lr.width() {
        return Err(Error::dimension(format!(
            "low-resolution extents {}x{} do not match {}x{} / {s}",
            y_lr.height(),
            y_lr.width(),
            hr.height(),
            hr.width()
        )));
    }
    let mut residual = down;
    for (r, t) in residual.data_mut().iter_mut().zip(y_lr.data()) {
        *r -= t;
    }
    let spread = replicate_upsample(&residual, s)?;
    let mut out = hr.clone();
    for (o, r) in out.data_mut().iter_mut().zip(spread.data()) {
        *o -= r;
    }
    Ok(out)
}

// ── patches ─────────────────────────────────────────────────────────────────

/// Square single-channel window cut from a cube, remembering where it came
/// from. `values` is row-major `size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f64>,
    pub size: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right (reverses columns).
    Horizontal,
    /// Mirror top-bottom (reverses rows).
    Vertical,
}

/// Copies the `size x size` window of one channel with top-left corner
/// `(row, col)`.
pub fn extract_patch(
    cube: &SpectralCube,
    channel: usize,
    row: usize,
    col: usize,
    size: usize,
) -> Result<Patch> {
    if channel >= cube.channels()
        || size == 0
        || row + size > cube.height()
        || col + size > cube.width()
    {
        return Err(Error::contract(format!(
            "patch channel {channel} window ({row},{col}) size {size} exceeds cube {}x{}x{}",
            cube.channels(),
            cube.height(),
            cube.width()
        )));
    }
    let plane = cube.plane(channel);
    let w = cube.width();
    let mut values = Vec::with_capacity(size * size);
    for dy in 0..size {
        let base = (row + dy) * w + col;
        values.extend_from_slice(&plane[base..base + size]);
    }
    Ok(Patch {
        values,
        size,
        channel,
        row,
        col,
    })
}

/// Mirrored copy of a patch; applying the same flip twice returns the
/// original.
pub fn flip_patch(patch: &Patch, axis: FlipAxis) -> Patch {
    let n = patch.size;
    let mut values = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match axis {
                FlipAxis::Horizontal => (y, n - 1 - x),
                FlipAxis::Vertical => (n - 1 - y, x),
            };
            values[y * n + x] = patch.values[sy * n + sx];
        }
    }
    Patch {
        values,
        ..patch.clone()
    }
}

// ── channel correlation ─────────────────────────────────────────────────────

/// Pearson correlation of two equally sized planes. Either plane being
/// constant makes the coefficient undefined; 0.0 is returned in that case.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "planes differ in size");
    assert!(!a.is_empty(), "planes must be non-empty");
    let constant = |v: &[f64]| {
        let first = v[0];
        v.iter().all(|&x| x == first)
    };
    if constant(a) || constant(b) {
        return 0.0;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Index of the RGB channel whose plane correlates most with `plane`
/// (largest Pearson coefficient; earliest channel wins ties).
pub fn best_correlated_rgb_channel(plane: &[f64], rgb: &SpectralCube) -> usize {
    assert_eq!(rgb.channels(), 3, "guide image must have 3 channels");
    assert_eq!(
        plane.len(),
        rgb.height() * rgb.width(),
        "plane extents must match the guide image"
    );
    let mut best = 0;
    let mut best_corr = f64::NEG_INFINITY;
    for c in 0..3 {
        let corr = pearson_corr(plane, rgb.plane(c));
        if corr > best_corr {
            best_corr = corr;
            best = c;
        }
    }
    best
}
