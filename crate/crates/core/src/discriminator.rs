//! Patch discriminator: a small fixed convnet scoring single-channel square
//! patches with one real number.
//!
//! Architecture (feature counts and strides are part of the training
//! contract, not tunable):
//!
//! ```text
//! conv 3x3 stride 2 pad 1 ->  32, LeakyReLU(0.2)
//! conv 3x3 stride 2 pad 1 ->  64, LeakyReLU(0.2)
//! conv 3x3 stride 2 pad 1 -> 128, LeakyReLU(0.2)
//! conv 3x3 stride 1 pad 1 -> 128, LeakyReLU(0.2)
//! global mean pool -> affine -> scalar
//! ```
//!
//! No normalization layers anywhere: a patch's score depends on that patch
//! alone, deterministically, which the adversarial filtering relies on.

use crate::error::{Error, Result};
use crate::image_ops::Patch;
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FEATURES: [usize; 4] = [32, 64, 128, 128];
pub const STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[Cout, Cin, 3, 3]`
    pub w: Tensor,
    /// `[Cout]`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub convs: Vec<ConvLayer>,
    /// Final affine weights, `[128]`.
    pub fc_w: Tensor,
    /// Final affine bias, `[1]`.
    pub fc_b: Tensor,
    patch_size: usize,
}

pub struct DiscriminatorVars {
    pub convs: Vec<(Var, Var)>,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl DiscriminatorParams {
    /// Deterministic initialization: each weight tensor uniform on
    /// `[-r, r)` with `r = 1 / sqrt(fan_in)` (convs: `Cin * 9`; head: 128),
    /// biases zero. Draws happen layer by layer, head last.
    pub fn init(patch_size: usize, seed: u64) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(4);
        let mut cin = 1;
        for cout in FEATURES {
            let fan_in = (cin * 9) as f64;
            let r = 1.0 / fan_in.sqrt();
            convs.push(ConvLayer {
                w: Tensor::uniform(vec![cout, cin, 3, 3], -r, r, &mut rng),
                b: Tensor::zeros(vec![cout]),
            });
            cin = cout;
        }
        let r = 1.0 / (FEATURES[3] as f64).sqrt();
        Ok(DiscriminatorParams {
            convs,
            fc_w: Tensor::uniform(vec![FEATURES[3]], -r, r, &mut rng),
            fc_b: Tensor::zeros(vec![1]),
            patch_size,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Canonical tensor order: per conv (w, b), then head weights, then head
    /// bias. Optimizer state and checkpoints index into this order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &self.convs {
            out.push(&c.w);
            out.push(&c.b);
        }
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &mut self.convs {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    /// Rebuilds params from tensors in canonical order.
    pub fn from_tensors(patch_size: usize, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 2 * FEATURES.len() + 2 {
            return Err(Error::contract(format!(
                "expected {} discriminator tensors, got {}",
                2 * FEATURES.len() + 2,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut convs = Vec::with_capacity(4);
        let mut cin = 1;
        for cout in FEATURES {
            let w = it.next().expect("counted");
            let b = it.next().expect("counted");
            if w.shape() != [cout, cin, 3, 3] || b.shape() != [cout] {
                return Err(Error::dimension(format!(
                    "conv tensor shapes disagree: {:?} / {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
            convs.push(ConvLayer { w, b });
            cin = cout;
        }
        let fc_w = it.next().expect("counted");
        let fc_b = it.next().expect("counted");
        if fc_w.shape() != [FEATURES[3]] || fc_b.shape() != [1] {
            return Err(Error::dimension("head tensor shapes disagree".to_string()));
        }
        Ok(DiscriminatorParams {
            convs,
            fc_w,
            fc_b,
            patch_size,
        })
    }

    pub fn stage(&self, tape: &mut Tape, requires_grad: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            convs: self
                .convs
                .iter()
                .map(|c| (tape.leaf(&c.w, requires_grad), tape.leaf(&c.b, requires_grad)))
                .collect(),
            fc_w: tape.leaf(&self.fc_w, requires_grad),
            fc_b: tape.leaf(&self.fc_b, requires_grad),
        }
    }

    /// Scores one patch (its size must match the size the params were built
    /// for).
    pub fn score_patch(&self, patch: &Patch) -> Result<f64> {
        Ok(self.score_patches(std::slice::from_ref(patch))?[0])
    }

    /// Scores a batch of patches without gradient tracking. Batched scoring
    /// and one-at-a-time scoring agree to rounding because the network has
    /// no cross-patch interaction.
    pub fn score_patches(&self, patches: &[Patch]) -> Result<Vec<f64>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.stage(&mut tape, false);
        let stacked = stage_patches(&mut tape, patches, self.patch_size)?;
        let scores = score_on_tape(&mut tape, &vars, stacked)?;
        Ok(tape.value(scores).to_vec())
    }
}

/// Puts a batch of equally sized patches on a tape as one `[N, 1, p, p]`
/// constant.
pub fn stage_patches(tape: &mut Tape, patches: &[Patch], expected_size: usize) -> Result<Var> {
    if patches.is_empty() {
        return Err(Error::contract("cannot stage an empty patch batch"));
    }
    let p = expected_size;
    let mut values = Vec::with_capacity(patches.len() * p * p);
    for patch in patches {
        if patch.size != p {
            return Err(Error::dimension(format!(
                "patch size {} does not match discriminator input {p}",
                patch.size
            )));
        }
        values.extend_from_slice(&patch.values);
    }
    let t = Tensor::new(vec![patches.len(), 1, p, p], values)?;
    Ok(tape.constant(&t))
}

/// Runs the scoring network over a staged `[N, 1, p, p]` batch, returning
/// the `[N]` score vector.
pub fn score_on_tape(tape: &mut Tape, vars: &DiscriminatorVars, patches: Var) -> Result<Var> {
    let shape = tape.shape(patches).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] {
        return Err(Error::dimension(format!(
            "discriminator input must be [N, 1, p, p], got {shape:?}"
        )));
    }
    let mut x = patches;
    for (i, &(w, b)) in vars.convs.iter().enumerate() {
        let c = tape.conv2d(x, w, STRIDES[i], 1)?;
        let cb = tape.channel_bias(c, b, 1.0)?;
        x = tape.leaky_relu(cb, LEAK);
    }
    let pooled = tape.global_mean_pool(x)?;
    tape.affine_rows(pooled, vars.fc_w, vars.fc_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad_check;
    use rand::Rng;

    fn random_patch(size: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch {
            values: (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect(),
            size,
            channel: 0,
            row: 0,
            col: 0,
        }
    }

    #[test]
    fn init_is_deterministic_and_sized_right() {
        let a = DiscriminatorParams::init(32, 5).unwrap();
        let b = DiscriminatorParams::init(32, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, DiscriminatorParams::init(32, 6).unwrap());

        // 320 + 18_496 + 73_856 + 147_584 + 128 + 1
        assert_eq!(a.param_count(), 240_385);
        assert_eq!(a.convs[0].w.shape(), &[32, 1, 3, 3]);
        assert_eq!(a.convs[3].w.shape(), &[128, 128, 3, 3]);
        for c in &a.convs {
            assert!(c.b.values().iter().all(|&v| v == 0.0));
        }
        let r1 = 1.0 / 3.0;
        assert!(a.convs[0].w.values().iter().all(|v| v.abs() <= r1));
        let r4 = 1.0 / (128.0f64 * 9.0).sqrt();
        assert!(a.convs[3].w.values().iter().all(|v| v.abs() <= r4));
    }

    #[test]
    fn zero_weights_score_equals_head_bias() {
        let mut params = DiscriminatorParams::init(16, 1).unwrap();
        for t in params.tensors_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        params.fc_b = Tensor::new(vec![1], vec![0.7]).unwrap();
        let s = params.score_patch(&random_patch(16, 2)).unwrap();
        assert_eq!(s, 0.7);
    }

    #[test]
    fn scoring_is_deterministic() {
        let params = DiscriminatorParams::init(32, 7).unwrap();
        let patch = random_patch(32, 8);
        let a = params.score_patch(&patch).unwrap();
        let b = params.score_patch(&patch).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn batched_scores_match_single_scores() {
        let params = DiscriminatorParams::init(16, 9).unwrap();
        let patches: Vec<Patch> = (0..5).map(|i| random_patch(16, 100 + i)).collect();
        let batch = params.score_patches(&patches).unwrap();
        for (i, p) in patches.iter().enumerate() {
            let single = params.score_patch(p).unwrap();
            assert!(
                (batch[i] - single).abs() < 1e-12,
                "patch {i}: {} vs {single}",
                batch[i]
            );
        }
    }

    #[test]
    fn wrong_patch_size_is_rejected() {
        let params = DiscriminatorParams::init(32, 10).unwrap();
        assert!(params.score_patch(&random_patch(16, 11)).is_err());
    }

    #[test]
    fn head_and_bias_gradients_match_finite_differences() {
        // Full-parameter FD over the conv stacks would need hundreds of
        // thousands of evaluations; the conv op itself is FD-verified in the
        // tensor tests, so here the patch input, biases, and head get checked
        // through the whole network.
        let params = DiscriminatorParams::init(8, 12).unwrap();
        let patch = random_patch(8, 13);
        let patch_t = Tensor::new(vec![1, 1, 8, 8], patch.values.clone()).unwrap();
        let point = vec![
            patch_t,
            params.convs[0].b.clone(),
            params.convs[1].b.clone(),
            params.fc_w.clone(),
            params.fc_b.clone(),
        ];
        let err = grad_check(
            &|tape, vars| {
                let conv_vars: Vec<(Var, Var)> = params
                    .convs
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let w = tape.constant(&c.w);
                        let b = match i {
                            0 => vars[1],
                            1 => vars[2],
                            _ => tape.constant(&c.b),
                        };
                        (w, b)
                    })
                    .collect();
                let dvars = DiscriminatorVars {
                    convs: conv_vars,
                    fc_w: vars[3],
                    fc_b: vars[4],
                };
                let scores = score_on_tape(tape, &dvars, vars[0])?;
                let sq = tape.square(scores);
                Ok(tape.mean(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn canonical_tensor_order_roundtrips() {
        let params = DiscriminatorParams::init(32, 14).unwrap();
        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let rebuilt = DiscriminatorParams::from_tensors(32, tensors).unwrap();
        assert_eq!(params, rebuilt);
        assert!(DiscriminatorParams::from_tensors(32, vec![]).is_err());
    }
}
