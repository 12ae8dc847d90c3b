//! Synthetic coupled-dictionary scenes with known ground truth.
//!
//! A phantom is built from one latent piecewise-constant code field shared
//! between two modalities, plus per-modality private codes:
//!
//! ```text
//! Y = D_spectral_common * A_common + D_spectral_unique * A_spectral
//! Z = D_rgb_common      * A_common + D_rgb_unique      * A_rgb
//! ```
//!
//! Codes are constant inside Voronoi regions, non-negative, and sparse
//! (at most `sparsity` active atoms per block per region); dictionaries are
//! non-negative. Both cubes are rescaled into `[0, 1]` by their own maxima,
//! and everything that went into the construction is returned so tests can
//! re-derive the cubes independently.

use crate::cube::SpectralCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhantomSpec {
    /// Number of spectral channels (the RGB side always has 3).
    pub spectral_channels: usize,
    /// Atoms shared by both modalities.
    pub common_atoms: usize,
    /// Atoms visible only in the spectral cube.
    pub unique_spectral_atoms: usize,
    /// Atoms visible only in the RGB image.
    pub unique_rgb_atoms: usize,
    pub height: usize,
    pub width: usize,
    /// Number of Voronoi regions the scene is partitioned into.
    pub regions: usize,
    /// Maximum active atoms per code block per region.
    pub sparsity: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            spectral_channels: 8,
            common_atoms: 6,
            unique_spectral_atoms: 2,
            unique_rgb_atoms: 2,
            height: 64,
            width: 64,
            regions: 48,
            sparsity: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledDictionaries {
    /// `[B, common_atoms]`
    pub spectral_common: Tensor,
    /// `[B, unique_spectral_atoms]`
    pub spectral_unique: Tensor,
    /// `[3, common_atoms]`
    pub rgb_common: Tensor,
    /// `[3, unique_rgb_atoms]`
    pub rgb_unique: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeMaps {
    /// `[common_atoms, H, W]`
    pub common: Tensor,
    /// `[unique_spectral_atoms, H, W]`
    pub spectral: Tensor,
    /// `[unique_rgb_atoms, H, W]`
    pub rgb: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Ground-truth spectral cube, rescaled into `[0, 1]`.
    pub spectral: SpectralCube,
    /// Co-registered RGB image, rescaled into `[0, 1]`.
    pub rgb: SpectralCube,
    pub dictionaries: CoupledDictionaries,
    pub codes: CodeMaps,
    /// Divisor applied to the raw spectral cube (its pre-scaling maximum).
    pub spectral_scale: f64,
    /// Divisor applied to the raw RGB image.
    pub rgb_scale: f64,
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.spectral_channels == 0 {
            return Err(Error::config("phantom needs at least one spectral channel"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("phantom extents must be positive"));
        }
        if self.regions == 0 {
            return Err(Error::config("phantom needs at least one region"));
        }
        if self.sparsity == 0 {
            return Err(Error::config("sparsity must be at least one"));
        }
        if self.common_atoms + self.unique_spectral_atoms == 0 {
            return Err(Error::config("spectral cube would have zero atoms"));
        }
        if self.common_atoms + self.unique_rgb_atoms == 0 {
            return Err(Error::config("rgb image would have zero atoms"));
        }
        Ok(())
    }
}

/// Synthesizes a phantom scene. Deterministic in `spec.seed`; the draw order
/// is: the four dictionaries (entries row-major, uniform `[0,1)`), the region
/// seed positions, then per region the active-atom sets and values for the
/// common, spectral-unique, and rgb-unique blocks, in that order.
pub fn synth_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (b, h, w) = (spec.spectral_channels, spec.height, spec.width);
    let (mc, mu_s, mu_r) = (
        spec.common_atoms,
        spec.unique_spectral_atoms,
        spec.unique_rgb_atoms,
    );

    let dicts = CoupledDictionaries {
        spectral_common: Tensor::uniform(vec![b, mc], 0.0, 1.0, &mut rng),
        spectral_unique: Tensor::uniform(vec![b, mu_s], 0.0, 1.0, &mut rng),
        rgb_common: Tensor::uniform(vec![3, mc], 0.0, 1.0, &mut rng),
        rgb_unique: Tensor::uniform(vec![3, mu_r], 0.0, 1.0, &mut rng),
    };

    let seeds: Vec<(usize, usize)> = (0..spec.regions)
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
        .collect();

    // Per region, a sparse non-negative coefficient vector for each block.
    let draw_block = |rng: &mut ChaCha8Rng, atoms: usize| -> Vec<f64> {
        let mut coeff = vec![0.0; atoms];
        if atoms > 0 {
            let k = spec.sparsity.min(atoms);
            let chosen = rand::seq::index::sample(rng, atoms, k);
            for idx in chosen.iter() {
                coeff[idx] = rng.random_range(0.0..1.0);
            }
        }
        coeff
    };
    let mut region_codes = Vec::with_capacity(spec.regions);
    for _ in 0..spec.regions {
        let common = draw_block(&mut rng, mc);
        let spectral = draw_block(&mut rng, mu_s);
        let rgb = draw_block(&mut rng, mu_r);
        region_codes.push((common, spectral, rgb));
    }

    // Nearest-seed assignment; ties resolve to the lowest region index.
    let mut assignment = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            let mut best_d = usize::MAX;
            for (r, &(sy, sx)) in seeds.iter().enumerate() {
                let dy = sy.abs_diff(y);
                let dx = sx.abs_diff(x);
                let d = dy * dy + dx * dx;
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            assignment[y * w + x] = best;
        }
    }

    // Spread region codes into dense code maps.
    let plane = h * w;
    let spread = |atoms: usize, select: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        let mut vals = vec![0.0; atoms * plane];
        for (p, &r) in assignment.iter().enumerate() {
            let coeff = select(&region_codes[r]);
            for k in 0..atoms {
                vals[k * plane + p] = coeff[k];
            }
        }
        Tensor::new(vec![atoms, h, w], vals).expect("sized above")
    };
    let codes = CodeMaps {
        common: spread(mc, |r| &r.0),
        spectral: spread(mu_s, |r| &r.1),
        rgb: spread(mu_r, |r| &r.2),
    };

    let (y_data, y_scale) = synthesize(&dicts.spectral_common, &codes.common, &dicts.spectral_unique, &codes.spectral, b, plane);
    let (z_data, z_scale) = synthesize(&dicts.rgb_common, &codes.common, &dicts.rgb_unique, &codes.rgb, 3, plane);

    Ok(Phantom {
        spectral: SpectralCube::from_values(b, h, w, y_data)?,
        rgb: SpectralCube::from_values(3, h, w, z_data)?,
        dictionaries: dicts,
        codes,
        spectral_scale: y_scale,
        rgb_scale: z_scale,
    })
}

/// `D_common * A_common + D_unique * A_unique`, then rescaled by the maximum
/// (an all-zero image keeps scale 1 rather than dividing by zero).
fn synthesize(
    d_common: &Tensor,
    a_common: &Tensor,
    d_unique: &Tensor,
    a_unique: &Tensor,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, f64) {
    let mc = d_common.shape()[1];
    let mu = d_unique.shape()[1];
    let (dc, du) = (d_common.values(), d_unique.values());
    let (ac, au) = (a_common.values(), a_unique.values());
    let mut raw = vec![0.0; channels * plane];
    for c in 0..channels {
        for p in 0..plane {
            let mut acc = 0.0;
            for k in 0..mc {
                acc += dc[c * mc + k] * ac[k * plane + p];
            }
            for k in 0..mu {
                acc += du[c * mu + k] * au[k * plane + p];
            }
            raw[c * plane + p] = acc;
        }
    }
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    for v in &mut raw {
        *v /= scale;
    }
    (raw, scale)
}
