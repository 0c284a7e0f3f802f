//! Least-squares GAN laboratory: a small reverse-mode autodiff core, MLPs and
//! optimizers, the GAN objective zoo, exact divergence checks on discrete
//! distributions and desk-scale stability benchmarks.

pub mod autodiff;
pub mod digits;
pub mod divergence;
pub mod experiment;
pub mod gmm;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod train;
