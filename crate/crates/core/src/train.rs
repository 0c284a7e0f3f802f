//! The alternating discriminator/generator loop shared by the benchmarks.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::nn::{Activation, Mlp, MlpSpec, NnError, OptimizerKind, Role, INIT_STD};
use crate::objectives::{d_loss, g_loss, gradient_penalty, GradientPenaltyConfig, LossScheme, ObjectiveError};
use crate::rng::{stream, substream, Rng};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseDistribution {
    /// Uniform on `[-1, 1]` per coordinate.
    Uniform,
    /// Standard normal per coordinate.
    Gaussian,
}

impl NoiseDistribution {
    pub fn sample(self, rng: &mut Rng, rows: usize, dim: usize) -> Tensor {
        let data = (0..rows * dim)
            .map(|_| match self {
                NoiseDistribution::Uniform => rng.random_range(-1.0..=1.0),
                NoiseDistribution::Gaussian => StandardNormal.sample(rng),
            })
            .collect();
        Tensor::new(&[rows, dim], data).expect("rows * dim entries")
    }
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseDistribution::Uniform => "uniform",
            NoiseDistribution::Gaussian => "gaussian",
        })
    }
}

impl FromStr for NoiseDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(NoiseDistribution::Uniform),
            "gaussian" => Ok(NoiseDistribution::Gaussian),
            _ => Err(format!("unknown noise distribution `{s}` (expected uniform or gaussian)")),
        }
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub scheme: LossScheme,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub z_dim: usize,
    pub z_distribution: NoiseDistribution,
    pub hidden_width: usize,
    /// Fully-connected layers per network, output layer included.
    pub n_layers: usize,
    /// Hidden-layer activation of both default networks.
    pub hidden_activation: Activation,
    pub total_iters: usize,
    pub checkpoint_every: usize,
    /// Loss rows are recorded at multiples of this and at the last iteration.
    pub log_every: usize,
    /// Generated samples stored at each checkpoint.
    pub checkpoint_samples: usize,
    pub generator_batch_norm: bool,
    pub penalty: Option<GradientPenaltyConfig>,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            scheme: LossScheme::LS_NEG1_1_0,
            optimizer: OptimizerKind::Adam,
            lr: 2e-4,
            batch_size: 64,
            z_dim: 2,
            z_distribution: NoiseDistribution::Uniform,
            hidden_width: 128,
            n_layers: 3,
            hidden_activation: Activation::Relu,
            total_iters: 30_000,
            checkpoint_every: 5_000,
            log_every: 500,
            checkpoint_samples: 2048,
            generator_batch_norm: false,
            penalty: None,
            seed: 0,
        }
    }
}

impl TrialConfig {
    /// Human-readable violations; empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.scheme.validate() {
            v.push(format!("scheme: {e}"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            v.push(format!("lr: must be a finite non-negative number, got {}", self.lr));
        }
        for (name, value) in [
            ("batch_size", self.batch_size),
            ("z_dim", self.z_dim),
            ("hidden_width", self.hidden_width),
            ("n_layers", self.n_layers),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
            ("checkpoint_samples", self.checkpoint_samples),
        ] {
            if value == 0 {
                v.push(format!("{name}: must be at least 1"));
            }
        }
        if self.total_iters < self.checkpoint_every {
            v.push(format!(
                "iters: total iterations {} must be at least checkpoint_every {}",
                self.total_iters, self.checkpoint_every
            ));
        }
        if let Some(p) = &self.penalty {
            if let Err(e) = p.validate() {
                v.push(format!("gp: {e}"));
            }
        }
        v
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        vec![self.hidden_width; self.n_layers.saturating_sub(1)]
    }

    /// Default generator: linear or tanh head.
    pub fn generator_spec(&self, output: usize, tanh_head: bool) -> MlpSpec {
        MlpSpec {
            input: self.z_dim,
            hidden: self.hidden_widths(),
            output,
            hidden_activation: self.hidden_activation,
            output_activation: if tanh_head { Activation::Tanh } else { Activation::None },
            batch_norm: self.generator_batch_norm,
        }
    }

    pub fn discriminator_spec(&self, input: usize) -> MlpSpec {
        MlpSpec {
            input,
            hidden: self.hidden_widths(),
            output: 1,
            hidden_activation: self.hidden_activation,
            output_activation: Activation::None,
            batch_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Completed,
    /// Training hit a non-finite value; the iteration it happened at.
    Failed { iter: usize, reason: String },
}

impl TrialStatus {
    pub fn is_failed(&self) -> bool {
        matches!(self, TrialStatus::Failed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Gradient penalty included in `d_loss`, zero when disabled.
    pub penalty: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub status: TrialStatus,
    pub losses: Vec<LossRow>,
    pub wall_time: Duration,
    pub penalty_warnings: usize,
}

pub struct Networks {
    pub generator: Mlp,
    pub discriminator: Mlp,
}

impl Networks {
    /// Gaussian-initialized pair, each from its own seeded stream.
    pub fn init(gen: &MlpSpec, disc: &MlpSpec, seed: u64) -> Result<Self, NnError> {
        Ok(Networks {
            generator: Mlp::new(gen, Role::Generator, INIT_STD, &mut substream(seed, stream::GEN_INIT))?,
            discriminator: Mlp::new(disc, Role::Discriminator, INIT_STD, &mut substream(seed, stream::DISC_INIT))?,
        })
    }
}

#[derive(Debug)]
enum StepError {
    Tensor(TensorError),
    Objective(ObjectiveError),
    Nn(NnError),
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::Tensor(e) => e.fmt(f),
            StepError::Objective(e) => e.fmt(f),
            StepError::Nn(e) => e.fmt(f),
        }
    }
}

impl From<TensorError> for StepError {
    fn from(e: TensorError) -> Self {
        StepError::Tensor(e)
    }
}

impl From<ObjectiveError> for StepError {
    fn from(e: ObjectiveError) -> Self {
        StepError::Objective(e)
    }
}

impl From<NnError> for StepError {
    fn from(e: NnError) -> Self {
        StepError::Nn(e)
    }
}

struct StepLosses {
    d_loss: f64,
    g_loss: f64,
    penalty: f64,
    degenerate: bool,
}

/// Runs `cfg.total_iters` iterations of one discriminator step followed by
/// one generator step. At every multiple of `cfg.checkpoint_every` the
/// generator maps a fixed noise batch of `cfg.checkpoint_samples` rows and
/// `on_checkpoint` receives the result. A non-finite value ends the run with
/// [`TrialStatus::Failed`].
pub fn adversarial_train(
    nets: &mut Networks,
    cfg: &TrialConfig,
    mut sample_real: impl FnMut(&mut Rng, usize) -> Tensor,
    mut on_checkpoint: impl FnMut(usize, Tensor),
) -> TrainOutcome {
    let start = Instant::now();
    let mut data_rng = substream(cfg.seed, stream::DATA);
    let mut noise_rng = substream(cfg.seed, stream::NOISE);
    let mut penalty_rng = substream(cfg.seed, stream::PENALTY);
    let eval_noise = cfg.z_distribution.sample(
        &mut substream(cfg.seed, stream::EVAL_NOISE),
        cfg.checkpoint_samples,
        cfg.z_dim,
    );
    let mut losses = Vec::new();
    let mut warnings = 0;

    let (mut opt_d, mut opt_g) = match (cfg.optimizer.build(cfg.lr), cfg.optimizer.build(cfg.lr)) {
        (Ok(d), Ok(g)) => (d, g),
        (Err(e), _) | (_, Err(e)) => {
            return TrainOutcome {
                status: TrialStatus::Failed {
                    iter: 0,
                    reason: e.to_string(),
                },
                losses,
                wall_time: start.elapsed(),
                penalty_warnings: 0,
            }
        }
    };

    let mut status = TrialStatus::Completed;
    for iter in 1..=cfg.total_iters {
        let real = sample_real(&mut data_rng, cfg.batch_size);
        let z_d = cfg.z_distribution.sample(&mut noise_rng, cfg.batch_size, cfg.z_dim);
        let z_g = cfg.z_distribution.sample(&mut noise_rng, cfg.batch_size, cfg.z_dim);
        let step = train_step(
            nets,
            cfg,
            &real,
            z_d,
            z_g,
            &mut penalty_rng,
            opt_d.as_mut(),
            opt_g.as_mut(),
        );
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                status = TrialStatus::Failed {
                    iter,
                    reason: e.to_string(),
                };
                break;
            }
        };
        if step.degenerate {
            warnings += 1;
        }
        if iter % cfg.log_every == 0 || iter == cfg.total_iters {
            losses.push(LossRow {
                iter,
                d_loss: step.d_loss,
                g_loss: step.g_loss,
                penalty: step.penalty,
            });
        }
        if iter % cfg.checkpoint_every == 0 {
            match nets.generator.predict(&eval_noise, false) {
                Ok(samples) => on_checkpoint(iter, samples),
                Err(e) => {
                    status = TrialStatus::Failed {
                        iter,
                        reason: e.to_string(),
                    };
                    break;
                }
            }
        }
    }
    TrainOutcome {
        status,
        losses,
        wall_time: start.elapsed(),
        penalty_warnings: warnings,
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    nets: &mut Networks,
    cfg: &TrialConfig,
    real: &Tensor,
    z_d: Tensor,
    z_g: Tensor,
    penalty_rng: &mut Rng,
    opt_d: &mut dyn crate::nn::Optimizer,
    opt_g: &mut dyn crate::nn::Optimizer,
) -> Result<StepLosses, StepError> {
    let Networks {
        generator,
        discriminator,
    } = nets;

    let (d_value, penalty, degenerate) = {
        let tape = Tape::new();
        let gb = generator.bind(&tape, false);
        let db = discriminator.bind(&tape, true);
        let fake = generator.forward(&gb, tape.constant(z_d), true)?;
        let real_scores = discriminator.forward(&db, tape.constant(real.clone()), true)?;
        let fake_scores = discriminator.forward(&db, fake, true)?;
        let mut loss = d_loss(cfg.scheme, real_scores, fake_scores)?;
        let mut penalty = 0.0;
        let mut degenerate = false;
        if let Some(gp) = &cfg.penalty {
            let p = gradient_penalty(discriminator, &db, real, gp, penalty_rng)?;
            penalty = p.value.item();
            degenerate = p.degenerate;
            loss = loss.add(p.value)?;
        }
        let grads = tape.backward(loss)?;
        let grads = discriminator.collect_gradients(&db, &grads);
        discriminator.apply_gradients(opt_d, &grads)?;
        (loss.item(), penalty, degenerate)
    };

    let g_value = {
        let tape = Tape::new();
        let gb = generator.bind(&tape, true);
        let db = discriminator.bind(&tape, false);
        let fake = generator.forward(&gb, tape.constant(z_g), true)?;
        let scores = discriminator.forward(&db, fake, true)?;
        let loss = g_loss(cfg.scheme, scores)?;
        let grads = tape.backward(loss)?;
        let grads = generator.collect_gradients(&gb, &grads);
        generator.apply_gradients(opt_g, &grads)?;
        loss.item()
    };

    Ok(StepLosses {
        d_loss: d_value,
        g_loss: g_value,
        penalty,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(TrialConfig::default().violations().is_empty());
    }

    #[test]
    fn violations_name_fields() {
        let cfg = TrialConfig {
            lr: -1.0,
            total_iters: 10,
            ..Default::default()
        };
        let v = cfg.violations();
        assert!(v.iter().any(|m| m.starts_with("lr:")));
        assert!(v.iter().any(|m| m.starts_with("iters:")));
    }

    #[test]
    fn noise_ranges() {
        let mut rng = crate::rng::seeded(0);
        let u = NoiseDistribution::Uniform.sample(&mut rng, 100, 3);
        assert_eq!(u.shape(), &[100, 3]);
        assert!(u.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
