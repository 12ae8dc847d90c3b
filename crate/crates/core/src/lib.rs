//! Unsupervised multimodal super-resolution of spectral cubes.
//!
//! Reconstructs a high-resolution spectral cube from a low-resolution scan
//! plus one co-registered high-resolution RGB photograph of the same scene —
//! no training pairs, no external datasets. A small unfolded sparse-coding
//! network is fitted to the one scene at hand with a two-stage schedule:
//! a data-fidelity pretraining stage followed by adversarial refinement
//! against pseudo-real patches blended from the two inputs. Everything runs
//! in f64 on a single thread and is bit-for-bit reproducible from a seed.

pub mod cube;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod image_ops;
pub mod io;
pub mod optim;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use cube::SpectralCube;
pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
