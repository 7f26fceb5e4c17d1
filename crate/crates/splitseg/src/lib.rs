//! Desk-scale simulator of split learning for vertically partitioned
//! multi-modal image segmentation.
//!
//! Four parties each hold one imaging modality of the same subjects; every
//! party encodes its modality locally and shares activation bundles with the
//! label site, which runs the shared decoder and returns per-level gradients.
//! On top of that protocol the crate provides a white-box inversion attack
//! that reconstructs private inputs from intercepted activations, SSIM-based
//! leakage scoring, and dropout / Gaussian-noise defenses applied at the
//! share boundary.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`]: 4-D f32 tensors with reverse-mode autodiff (exactly the ops
//!   the models and the attack need).
//! - [`nn`]: conv blocks, Dice + cross-entropy loss, Adam, cosine schedule,
//!   dropout and Gaussian noise.
//! - [`model`]: the default U-Net and its split form (per-site encoders with
//!   widths divided by K, one shared-width decoder), plus checkpoints.
//! - [`slproto`]: the message-passing protocol, share-boundary defenses, the
//!   training loops and the honest-but-curious intercept tap.
//! - [`attack`]: the activation-inversion attack and level sweeps.
//! - [`metrics`]: SSIM, Dice and leakage report assembly.
//! - [`data`]: synthetic phantoms, 70/10/20 splits, ".ten"/PGM file I/O.
//! - [`cli`]: the `splitseg` experiment runner (gendata / train / attack /
//!   sweep / report).
//!
//! Start with the runnable examples: each major capability has one under
//! `examples/`.

pub mod attack;
pub mod cli;
pub mod data;
pub mod fdcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seeds;
pub mod slproto;
pub mod tensor;
