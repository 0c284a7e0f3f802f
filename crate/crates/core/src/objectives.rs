//! Adversarial objectives: the sigmoid cross-entropy family and the
//! least-squares family with its `(a, b, c)` coding, plus the gradient
//! penalty and the closed-form saturation analysis.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::{sigmoid, softplus, Var};
use crate::nn::{BoundMlp, Mlp};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("least-squares labels must differ, got a = b = {0}")]
    DegenerateLabels(f64),
    #[error("unknown loss scheme `{0}` (expected mm, ns, ls-110, ls-011 or ls:a:b:c)")]
    UnknownScheme(String),
    #[error("gradient penalty needs c >= 0 and lambda >= 0, got c = {c}, lambda = {lambda}")]
    InvalidPenalty { c: f64, lambda: f64 },
    #[error("curve grid needs n >= 2 and x_min < x_max")]
    InvalidGrid,
}

/// Which GAN objective both players optimize. Sigmoid-based schemes read
/// discriminator outputs as logits; least squares uses them raw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossScheme {
    Minimax,
    NonSaturating,
    /// `a`: label for fake data, `b`: label for real data, `c`: the value the
    /// generator wants the discriminator to assign to fakes.
    LeastSquares { a: f64, b: f64, c: f64 },
}

impl LossScheme {
    pub fn least_squares(a: f64, b: f64, c: f64) -> Result<Self, ObjectiveError> {
        let s = LossScheme::LeastSquares { a, b, c };
        s.validate()?;
        Ok(s)
    }

    /// `(a, b, c) = (-1, 1, 0)`: the generator minimizes a Pearson χ²
    /// divergence.
    pub const LS_NEG1_1_0: LossScheme = LossScheme::LeastSquares {
        a: -1.0,
        b: 1.0,
        c: 0.0,
    };

    /// `(a, b, c) = (0, 1, 1)`: 0-1 coding, generator targets the real label.
    pub const LS_0_1_1: LossScheme = LossScheme::LeastSquares {
        a: 0.0,
        b: 1.0,
        c: 1.0,
    };

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match *self {
            LossScheme::LeastSquares { a, b, .. } if a == b => Err(ObjectiveError::DegenerateLabels(a)),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LossScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LossScheme::Minimax => f.write_str("mm"),
            LossScheme::NonSaturating => f.write_str("ns"),
            s if s == LossScheme::LS_NEG1_1_0 => f.write_str("ls-110"),
            s if s == LossScheme::LS_0_1_1 => f.write_str("ls-011"),
            LossScheme::LeastSquares { a, b, c } => write!(f, "ls:{a}:{b}:{c}"),
        }
    }
}

impl FromStr for LossScheme {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || ObjectiveError::UnknownScheme(s.to_string());
        match s {
            "mm" | "minimax" => Ok(LossScheme::Minimax),
            "ns" | "non-saturating" => Ok(LossScheme::NonSaturating),
            "ls-110" => Ok(LossScheme::LS_NEG1_1_0),
            "ls-011" => Ok(LossScheme::LS_0_1_1),
            _ => {
                let rest = s.strip_prefix("ls:").ok_or_else(unknown)?;
                let v: Vec<f64> = rest
                    .split(':')
                    .map(|x| x.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| unknown())?;
                match v.as_slice() {
                    [a, b, c] => LossScheme::least_squares(*a, *b, *c),
                    _ => Err(unknown()),
                }
            }
        }
    }
}

fn non_empty(v: Var<'_>, what: &'static str) -> Result<(), ObjectiveError> {
    if v.value().is_empty() {
        Err(ObjectiveError::EmptyBatch(what))
    } else {
        Ok(())
    }
}

/// Discriminator loss over a batch of real and a batch of fake scores.
pub fn d_loss<'t>(scheme: LossScheme, real: Var<'t>, fake: Var<'t>) -> Result<Var<'t>, ObjectiveError> {
    non_empty(real, "real")?;
    non_empty(fake, "fake")?;
    scheme.validate()?;
    let loss = match scheme {
        // -E[log σ(real)] - E[log(1 - σ(fake))]
        LossScheme::Minimax | LossScheme::NonSaturating => real
            .scale(-1.0)?
            .softplus()?
            .mean()?
            .add(fake.softplus()?.mean()?)?,
        LossScheme::LeastSquares { a, b, .. } => {
            let r = real.add_scalar(-b)?.square()?.mean()?;
            let f = fake.add_scalar(-a)?.square()?.mean()?;
            r.add(f)?.scale(0.5)?
        }
    };
    Ok(loss)
}

/// Generator loss over a batch of fake scores.
pub fn g_loss<'t>(scheme: LossScheme, fake: Var<'t>) -> Result<Var<'t>, ObjectiveError> {
    non_empty(fake, "fake")?;
    scheme.validate()?;
    let loss = match scheme {
        // E[log(1 - σ(fake))]
        LossScheme::Minimax => fake.softplus()?.mean()?.scale(-1.0)?,
        // -E[log σ(fake)]
        LossScheme::NonSaturating => fake.scale(-1.0)?.softplus()?.mean()?,
        LossScheme::LeastSquares { c, .. } => fake.add_scalar(-c)?.square()?.mean()?.scale(0.5)?,
    };
    Ok(loss)
}

/// `|∂ g_loss / ∂ score|` for a single fake sample.
pub fn generator_gradient_magnitude(scheme: LossScheme, score: f64) -> f64 {
    match scheme {
        LossScheme::NonSaturating => 1.0 - sigmoid(score),
        LossScheme::Minimax => sigmoid(score),
        LossScheme::LeastSquares { c, .. } => (score - c).abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub x: f64,
    /// `-log σ(x)`
    pub ns_loss: f64,
    /// `log(1 - σ(x))`
    pub minimax_loss: f64,
    /// `(x - c)²`
    pub ls_loss: f64,
}

fn grid(x_min: f64, x_max: f64, n_points: usize) -> Result<impl Iterator<Item = f64>, ObjectiveError> {
    if n_points < 2 || !(x_min < x_max) {
        return Err(ObjectiveError::InvalidGrid);
    }
    let step = (x_max - x_min) / (n_points - 1) as f64;
    Ok((0..n_points).map(move |i| if i + 1 == n_points { x_max } else { x_min + step * i as f64 }))
}

/// Generator losses sampled on a uniform grid of scores.
pub fn saturation_curves(x_min: f64, x_max: f64, n_points: usize, c: f64) -> Result<Vec<CurveRow>, ObjectiveError> {
    Ok(grid(x_min, x_max, n_points)?
        .map(|x| CurveRow {
            x,
            ns_loss: softplus(-x),
            minimax_loss: -softplus(x),
            ls_loss: (x - c) * (x - c),
        })
        .collect())
}

pub fn write_curves_csv(rows: &[CurveRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "x,ns_loss,minimax_loss,ls_loss")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.x, r.ns_loss, r.minimax_loss, r.ls_loss)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradMagRow {
    pub x: f64,
    pub ns: f64,
    pub minimax: f64,
    pub ls: f64,
}

/// Generator gradient magnitudes of the three families on a score grid.
pub fn gradient_magnitude_table(x_min: f64, x_max: f64, n_points: usize, c: f64) -> Result<Vec<GradMagRow>, ObjectiveError> {
    let ls = LossScheme::LeastSquares { a: c - 1.0, b: c + 1.0, c };
    Ok(grid(x_min, x_max, n_points)?
        .map(|x| GradMagRow {
            x,
            ns: generator_gradient_magnitude(LossScheme::NonSaturating, x),
            minimax: generator_gradient_magnitude(LossScheme::Minimax, x),
            ls: generator_gradient_magnitude(ls, x),
        })
        .collect())
}

pub fn write_gradmag_csv(rows: &[GradMagRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "x,ns_grad,minimax_grad,ls_grad")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.x, r.ns, r.minimax, r.ls)?;
    }
    Ok(())
}

/// Penalty on discriminator input-gradient norms around perturbed real data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientPenaltyConfig {
    /// Target input-gradient norm.
    pub c: f64,
    pub lambda: f64,
    /// Noise amplitude in units of the per-feature batch std.
    pub perturb_scale: f64,
}

impl Default for GradientPenaltyConfig {
    fn default() -> Self {
        GradientPenaltyConfig {
            c: 30.0,
            lambda: 150.0,
            perturb_scale: 0.5,
        }
    }
}

impl GradientPenaltyConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.c >= 0.0 && self.lambda >= 0.0) {
            return Err(ObjectiveError::InvalidPenalty {
                c: self.c,
                lambda: self.lambda,
            });
        }
        Ok(())
    }
}

pub struct Penalty<'t> {
    pub value: Var<'t>,
    /// Every feature of the real batch had zero variance, so no noise was
    /// added.
    pub degenerate: bool,
}

/// `λ · E[(‖∇ₓ D(x̃)‖₂ - c)²]` with `x̃ = x + perturb_scale · std(x) · u`,
/// `u ~ Uniform(-1, 1)` per coordinate. Differentiable with respect to the
/// discriminator parameters.
pub fn gradient_penalty<'t>(
    disc: &mut Mlp,
    bound: &BoundMlp<'t>,
    real: &Tensor,
    cfg: &GradientPenaltyConfig,
    rng: &mut Rng,
) -> Result<Penalty<'t>, ObjectiveError> {
    cfg.validate()?;
    if real.is_empty() || real.rows() == 0 {
        return Err(ObjectiveError::EmptyBatch("real"));
    }
    let tape = bound
        .vars()
        .first()
        .expect("discriminator has parameters")
        .tape();
    let (rows, cols) = real.dims2("gradient_penalty")?;
    let mut std = vec![0.0; cols];
    for (j, s) in std.iter_mut().enumerate() {
        let mean = (0..rows).map(|i| real.data()[i * cols + j]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|i| (real.data()[i * cols + j] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        *s = var.sqrt();
    }
    let degenerate = std.iter().all(|&s| s == 0.0);
    let mut perturbed = real.clone();
    for (k, x) in perturbed.data_mut().iter_mut().enumerate() {
        let u: f64 = rng.random_range(-1.0..1.0);
        *x += cfg.perturb_scale * std[k % cols] * u;
    }
    let x_tilde = tape.constant(perturbed);
    let scores = disc.forward(bound, x_tilde, true)?;
    let input_grad = tape.grad(scores.sum()?, &[x_tilde])?[0];
    // 1e-30 keeps the sqrt derivative finite when a gradient row is exactly zero.
    let norms = input_grad.square()?.sum_cols()?.add_scalar(1e-30)?.sqrt()?;
    let value = norms
        .add_scalar(-cfg.c)?
        .square()?
        .mean()?
        .scale(cfg.lambda)?;
    Ok(Penalty { value, degenerate })
}
