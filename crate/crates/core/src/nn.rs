//! Fully-connected networks, Gaussian initialization, batch normalization
//! and the two optimizers used for training.

use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, Var};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("initializer std must be positive, got {0}")]
    InvalidStd(f64),
    #[error("layer {index}: expected input width {expected}, got {got}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("discriminator output layer must not have an activation, found {0}")]
    DiscriminatorHead(Activation),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("parameter {param}: gradient shape {grad:?} does not match {expected:?}")]
    GradientShape {
        param: String,
        expected: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("learning rate must be non-negative and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(s) => x.leaky_relu(s),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::None => write!(f, "none"),
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "lrelu{s}"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => s
                .strip_prefix("lrelu")
                .and_then(|v| v.parse().ok())
                .map(Activation::LeakyRelu)
                .ok_or_else(|| format!("unknown activation `{s}`")),
        }
    }
}

/// Entries i.i.d. `Normal(mean, std²)` from `rng`.
pub fn init_gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Tensor, NnError> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(NnError::InvalidStd(std));
    }
    let normal = Normal::new(mean, std).map_err(|_| NnError::InvalidStd(std))?;
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::new(shape, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self, NnError> {
        let (_, out) = weight.dims2("dense")?;
        if bias.shape() != [out] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            }
            .into());
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    /// Gaussian weights, zero bias.
    pub fn gaussian(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self, NnError> {
        let weight = init_gaussian(&[inputs, outputs], 0.0, std, rng)?;
        DenseLayer::new(weight, Tensor::zeros(&[outputs]), activation)
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn forward<'t>(
        &mut self,
        gamma: Var<'t>,
        beta: Var<'t>,
        x: Var<'t>,
        train: bool,
    ) -> Result<Var<'t>, TensorError> {
        let tape = x.tape();
        let rows = x.value().rows();
        let (mean, var) = if train && rows >= 2 {
            let inv_n = 1.0 / rows as f64;
            let mean = x.sum_rows()?.scale(inv_n)?;
            let centered = x.sub(mean.broadcast_rows(rows)?)?;
            let var = centered.square()?.sum_rows()?.scale(inv_n)?;
            let m = self.momentum;
            let blend = |run: &Tensor, batch: &Tensor| {
                run.zip_map(batch, "batch_norm", |r, b| (1.0 - m) * r + m * b)
            };
            self.running_mean = blend(&self.running_mean, &mean.value())?;
            self.running_var = blend(&self.running_var, &var.value())?;
            (mean, var)
        } else {
            (
                tape.constant(self.running_mean.clone()),
                tape.constant(self.running_var.clone()),
            )
        };
        let std = var.add_scalar(self.epsilon)?.sqrt()?;
        let normalized = x
            .sub(mean.broadcast_rows(rows)?)?
            .div(std.broadcast_rows(rows)?)?;
        normalized.mul(gamma.broadcast_rows(rows)?)?.add_row(beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNorm1d),
    Activation(Activation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
        })
    }
}

/// Layer widths and activations of a fully-connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Insert batch normalization between each hidden linear map and its
    /// activation.
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    role: Role,
}

/// Parameters of an [`Mlp`] placed on a tape, in [`Mlp::params`] order.
pub struct BoundMlp<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundMlp<'t> {
    /// Binds externally created variables, one per entry of
    /// [`Mlp::params`] and in that order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        BoundMlp { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl Mlp {
    pub fn new(spec: &MlpSpec, role: Role, init_std: f64, rng: &mut Rng) -> Result<Self, NnError> {
        let mut layers = Vec::new();
        let mut width = spec.input;
        for &h in &spec.hidden {
            if spec.batch_norm {
                layers.push(Layer::Dense(DenseLayer::gaussian(
                    width,
                    h,
                    Activation::None,
                    init_std,
                    rng,
                )?));
                layers.push(Layer::BatchNorm(BatchNorm1d::new(h)));
                layers.push(Layer::Activation(spec.hidden_activation));
            } else {
                layers.push(Layer::Dense(DenseLayer::gaussian(
                    width,
                    h,
                    spec.hidden_activation,
                    init_std,
                    rng,
                )?));
            }
            width = h;
        }
        layers.push(Layer::Dense(DenseLayer::gaussian(
            width,
            spec.output,
            spec.output_activation,
            init_std,
            rng,
        )?));
        Mlp::from_layers(layers, role)
    }

    /// Checks that widths chain and that a discriminator ends in a raw score.
    pub fn from_layers(layers: Vec<Layer>, role: Role) -> Result<Self, NnError> {
        let mut width: Option<usize> = None;
        for (index, layer) in layers.iter().enumerate() {
            let (inp, out) = match layer {
                Layer::Dense(d) => (d.inputs(), d.outputs()),
                Layer::BatchNorm(b) => (b.features(), b.features()),
                Layer::Activation(_) => continue,
            };
            if let Some(w) = width {
                if w != inp {
                    return Err(NnError::DimensionMismatch {
                        index,
                        expected: w,
                        got: inp,
                    });
                }
            }
            width = Some(out);
        }
        if role == Role::Discriminator {
            match layers.last() {
                Some(Layer::Dense(d)) if d.activation != Activation::None => {
                    return Err(NnError::DiscriminatorHead(d.activation));
                }
                Some(Layer::Activation(a)) if *a != Activation::None => {
                    return Err(NnError::DiscriminatorHead(*a));
                }
                _ => {}
            }
        }
        Ok(Mlp { layers, role })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.inputs()),
                Layer::BatchNorm(b) => Some(b.features()),
                Layer::Activation(_) => None,
            })
            .unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.outputs()),
                Layer::BatchNorm(b) => Some(b.features()),
                Layer::Activation(_) => None,
            })
            .unwrap_or(0)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
                Layer::BatchNorm(b) => out.extend([&b.gamma, &b.beta]),
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                Layer::BatchNorm(b) => out.extend([&mut b.gamma, &mut b.beta]),
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Dense(_) => {
                    out.push(format!("{}.{i}.weight", self.role));
                    out.push(format!("{}.{i}.bias", self.role));
                }
                Layer::BatchNorm(_) => {
                    out.push(format!("{}.{i}.gamma", self.role));
                    out.push(format!("{}.{i}.beta", self.role));
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Places the parameters on `tape`, as gradient-tracked leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundMlp { vars }
    }

    /// Batch forward pass `[B, in] -> [B, out]`. In training mode batch
    /// normalization uses batch statistics and advances its running averages.
    pub fn forward<'t>(
        &mut self,
        bound: &BoundMlp<'t>,
        x: Var<'t>,
        train: bool,
    ) -> Result<Var<'t>, TensorError> {
        let width = x.value().cols();
        if x.value().shape().len() != 2 || width != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp_forward",
                lhs: x.shape(),
                rhs: vec![self.input_dim()],
            });
        }
        let mut vars = bound.vars.iter().copied();
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(d) => {
                    let (w, b) = (vars.next().unwrap(), vars.next().unwrap());
                    d.activation.apply(h.matmul(w)?.add_row(b)?)?
                }
                Layer::BatchNorm(bn) => {
                    let (g, b) = (vars.next().unwrap(), vars.next().unwrap());
                    bn.forward(g, b, h, train)?
                }
                Layer::Activation(a) => a.apply(h)?,
            };
        }
        Ok(h)
    }

    /// Forward pass outside of any training graph.
    pub fn predict(&mut self, x: &Tensor, train: bool) -> Result<Tensor, TensorError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = self.forward(&bound, tape.constant(x.clone()), train)?;
        let v = out.value();
        Ok((*v).clone())
    }

    /// Gradients of the bound parameters, in [`Mlp::params`] order.
    pub fn collect_gradients(&self, bound: &BoundMlp<'_>, grads: &Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(self.params())
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    }

    pub fn apply_gradients(&mut self, opt: &mut dyn Optimizer, grads: &[Tensor]) -> Result<(), NnError> {
        let names = self.param_names();
        let mut params = self.params_mut();
        opt.step(&mut params, grads).map_err(|e| match e {
            NnError::NonFiniteGradient { param } => NnError::NonFiniteGradient {
                param: name_for(&names, &param),
            },
            NnError::GradientShape {
                param,
                expected,
                grad,
            } => NnError::GradientShape {
                param: name_for(&names, &param),
                expected,
                grad,
            },
            other => other,
        })
    }

    fn header(&self) -> String {
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => format!("dense:{}x{}:{}", d.inputs(), d.outputs(), d.activation),
                Layer::BatchNorm(b) => format!("bn:{}:{}:{}", b.features(), b.epsilon, b.momentum),
                Layer::Activation(a) => format!("act:{a}"),
            })
            .collect();
        format!("mlp v1 {} {}\n", self.role, layers.join(","))
    }

    /// Text header naming every layer shape, then every tensor as
    /// little-endian `f64`s (dense: weight, bias; batch norm: gamma, beta,
    /// running mean, running variance).
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), NnError> {
        w.write_all(self.header().as_bytes())?;
        for l in &self.layers {
            let tensors: Vec<&Tensor> = match l {
                Layer::Dense(d) => vec![&d.weight, &d.bias],
                Layer::BatchNorm(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
                Layer::Activation(_) => vec![],
            };
            for t in tensors {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self, NnError> {
        let mut r = io::BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let bad = |msg: &str| NnError::Checkpoint(format!("{msg}: `{}`", header.trim_end()));
        let mut parts = header.trim_end().splitn(4, ' ');
        if parts.next() != Some("mlp") || parts.next() != Some("v1") {
            return Err(bad("bad magic"));
        }
        let role = match parts.next() {
            Some("generator") => Role::Generator,
            Some("discriminator") => Role::Discriminator,
            _ => return Err(bad("bad role")),
        };
        let spec = parts.next().ok_or_else(|| bad("missing layers"))?;
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor, NnError> {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::new(shape, data)?)
        };
        let mut layers = Vec::new();
        for item in spec.split(',') {
            let fields: Vec<&str> = item.split(':').collect();
            match fields.as_slice() {
                ["dense", dims, act] => {
                    let (i, o) = dims.split_once('x').ok_or_else(|| bad("bad dense dims"))?;
                    let i: usize = i.parse().map_err(|_| bad("bad dense dims"))?;
                    let o: usize = o.parse().map_err(|_| bad("bad dense dims"))?;
                    let act: Activation = act.parse().map_err(|e: String| bad(&e))?;
                    let weight = read_tensor(&[i, o])?;
                    let bias = read_tensor(&[o])?;
                    layers.push(Layer::Dense(DenseLayer::new(weight, bias, act)?));
                }
                ["bn", n, eps, mom] => {
                    let n: usize = n.parse().map_err(|_| bad("bad bn width"))?;
                    let mut bn = BatchNorm1d::new(n);
                    bn.epsilon = eps.parse().map_err(|_| bad("bad bn epsilon"))?;
                    bn.momentum = mom.parse().map_err(|_| bad("bad bn momentum"))?;
                    bn.gamma = read_tensor(&[n])?;
                    bn.beta = read_tensor(&[n])?;
                    bn.running_mean = read_tensor(&[n])?;
                    bn.running_var = read_tensor(&[n])?;
                    layers.push(Layer::BatchNorm(bn));
                }
                ["act", a] => layers.push(Layer::Activation(a.parse().map_err(|e: String| bad(&e))?)),
                _ => return Err(bad("unknown layer")),
            }
        }
        Mlp::from_layers(layers, role)
    }
}

fn name_for(names: &[String], tag: &str) -> String {
    tag.strip_prefix('#')
        .and_then(|i| i.parse::<usize>().ok())
        .and_then(|i| names.get(i).cloned())
        .unwrap_or_else(|| tag.to_string())
}

pub trait Optimizer: Send {
    /// Updates `params` in place from `grads` (same order, same shapes).
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError>;
}

fn check_grads(params: &[&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NnError::GradientShape {
                param: format!("#{i}"),
                expected: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        if g.first_non_finite().is_some() {
            return Err(NnError::NonFiniteGradient {
                param: format!("#{i}"),
            });
        }
    }
    Ok(())
}

fn zeros_like(params: &[&mut Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    /// β₁ = 0.5, β₂ = 0.999, ε = 1e-8.
    pub fn new(lr: f64) -> Result<Self, NnError> {
        Adam::with_betas(lr, 0.5, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self, NnError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NnError::InvalidLearningRate(lr));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            epsilon,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = zeros_like(params);
            self.v = zeros_like(params);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub epsilon: f64,
    v: Vec<Tensor>,
    t: u64,
}

impl RmsProp {
    /// decay 0.9, ε = 1e-8.
    pub fn new(lr: f64) -> Result<Self, NnError> {
        RmsProp::with_decay(lr, 0.9, 1e-8)
    }

    pub fn with_decay(lr: f64, decay: f64, epsilon: f64) -> Result<Self, NnError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NnError::InvalidLearningRate(lr));
        }
        Ok(RmsProp {
            lr,
            decay,
            epsilon,
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        check_grads(params, grads)?;
        if self.v.is_empty() {
            self.v = zeros_like(params);
        }
        self.t += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                v[j] = self.decay * v[j] + (1.0 - self.decay) * g[j] * g[j];
                *x -= self.lr * g[j] / (v[j].sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Result<Box<dyn Optimizer>, NnError> {
        Ok(match self {
            OptimizerKind::Adam => Box::new(Adam::new(lr)?),
            OptimizerKind::RmsProp => Box::new(RmsProp::new(lr)?),
        })
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            _ => Err(format!("unknown optimizer `{s}` (expected adam or rmsprop)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::seeded;

    fn small_spec(batch_norm: bool) -> MlpSpec {
        MlpSpec {
            input: 3,
            hidden: vec![5, 4],
            output: 2,
            hidden_activation: Activation::LeakyRelu(0.2),
            output_activation: Activation::Tanh,
            batch_norm,
        }
    }

    #[test]
    fn gaussian_init_statistics() {
        let t = init_gaussian(&[1000, 1000], 0.0, INIT_STD, &mut seeded(1)).unwrap();
        let mean = t.mean();
        let std = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
        assert!(mean.abs() < 4.0 * INIT_STD / 1000.0, "mean {mean}");
        assert!((0.0195..=0.0205).contains(&std), "std {std}");
        let again = init_gaussian(&[1000, 1000], 0.0, INIT_STD, &mut seeded(1)).unwrap();
        assert_eq!(t, again);
        assert!(matches!(
            init_gaussian(&[2], 0.0, 0.0, &mut seeded(1)),
            Err(NnError::InvalidStd(_))
        ));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::new(Tensor::identity(3), Tensor::zeros(&[3]), Activation::None).unwrap();
        let mut net = Mlp::from_layers(vec![Layer::Dense(layer)], Role::Generator).unwrap();
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -1.0]]).unwrap();
        assert_eq!(net.predict(&x, false).unwrap(), x);
    }

    #[test]
    fn tanh_head_is_bounded() {
        let mut rng = seeded(3);
        let mut net = Mlp::new(&small_spec(false), Role::Generator, 0.5, &mut rng).unwrap();
        let x = init_gaussian(&[16, 3], 0.0, 3.0, &mut rng).unwrap();
        let y = net.predict(&x, true).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn widths_must_chain() {
        let mut rng = seeded(0);
        let a = DenseLayer::gaussian(3, 4, Activation::Relu, 0.1, &mut rng).unwrap();
        let b = DenseLayer::gaussian(5, 1, Activation::None, 0.1, &mut rng).unwrap();
        assert!(matches!(
            Mlp::from_layers(vec![Layer::Dense(a), Layer::Dense(b)], Role::Discriminator),
            Err(NnError::DimensionMismatch { index: 1, expected: 4, got: 5 })
        ));
    }

    #[test]
    fn discriminator_head_must_be_raw() {
        let mut spec = small_spec(false);
        spec.output_activation = Activation::Sigmoid;
        assert!(matches!(
            Mlp::new(&spec, Role::Discriminator, 0.02, &mut seeded(0)),
            Err(NnError::DiscriminatorHead(Activation::Sigmoid))
        ));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut net = Mlp::new(&small_spec(false), Role::Generator, 0.02, &mut seeded(0)).unwrap();
        assert!(net.predict(&Tensor::zeros(&[2, 4]), false).is_err());
    }

    #[test]
    fn output_sum_gradient_matches_finite_differences() {
        for bn in [false, true] {
            let mut rng = seeded(11);
            let net = Mlp::new(&small_spec(bn), Role::Generator, 0.5, &mut rng).unwrap();
            let x = init_gaussian(&[6, 3], 0.0, 1.0, &mut rng).unwrap();
            let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
            let err = grad_check(
                |tape, vars| {
                    let mut net = net.clone();
                    let bound = BoundMlp { vars: vars.to_vec() };
                    net.forward(&bound, tape.constant(x.clone()), true)?.sum()
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "batch_norm={bn}: {err}");
        }
    }

    #[test]
    fn batch_norm_standardizes_in_training_mode() {
        let mut rng = seeded(5);
        let x = init_gaussian(&[32, 4], 3.0, 2.0, &mut rng).unwrap();
        let mut bn = BatchNorm1d::new(4);
        let tape = Tape::new();
        let out = bn
            .forward(
                tape.constant(bn.gamma.clone()),
                tape.constant(bn.beta.clone()),
                tape.constant(x),
                true,
            )
            .unwrap()
            .value();
        for f in 0..4 {
            let col: Vec<f64> = (0..32).map(|r| out.data()[r * 4 + f]).collect();
            let m = col.iter().sum::<f64>() / 32.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
        assert!(bn.running_mean.data().iter().all(|&m| m > 0.0));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut opt = Adam::new(2e-4).unwrap();
        opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let lr = 2e-4;
        for g in [3.0, -0.01, 1e-3] {
            let mut p = Tensor::scalar(0.0);
            let mut opt = Adam::new(lr).unwrap();
            opt.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((p.item() - expected).abs() < 1e-15);
            assert!((p.item().abs() - lr).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let lr = 1e-3;
        let mut p = Tensor::scalar(0.0);
        let mut opt = Adam::new(lr).unwrap();
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.item();
            opt.step(&mut [&mut p], &[Tensor::scalar(0.7)]).unwrap();
            last = p.item() - before;
        }
        assert!((last + lr).abs() < lr * 1e-4, "{last}");
    }

    #[test]
    fn rmsprop_zero_gradient_and_steady_state() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = RmsProp::new(1e-3).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.item(), 1.0);
        let mut last = 0.0;
        for _ in 0..500 {
            let before = p.item();
            opt.step(&mut [&mut p], &[Tensor::scalar(-2.0)]).unwrap();
            last = p.item() - before;
        }
        assert!((last - 1e-3).abs() < 1e-3 * 1e-6, "{last}");
    }

    #[test]
    fn rmsprop_is_deterministic() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.1]);
            let mut opt = RmsProp::new(0.01).unwrap();
            for k in 0..20 {
                let g = Tensor::vector(vec![(k as f64).sin(), (k as f64).cos()]);
                opt.step(&mut [&mut p], &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let mut net = Mlp::new(&small_spec(true), Role::Generator, 0.02, &mut seeded(2)).unwrap();
        let before = net.clone();
        let grads: Vec<Tensor> = net.params().iter().map(|p| p.map(|_| 0.37)).collect();
        let mut adam = Adam::new(0.0).unwrap();
        let mut rms = RmsProp::new(0.0).unwrap();
        net.apply_gradients(&mut adam, &grads).unwrap();
        net.apply_gradients(&mut rms, &grads).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut net = Mlp::new(&small_spec(false), Role::Generator, 0.02, &mut seeded(2)).unwrap();
        let mut grads: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        grads[3].data_mut()[0] = f64::NAN;
        let err = net.apply_gradients(&mut Adam::new(1e-3).unwrap(), &grads).unwrap_err();
        match err {
            NnError::NonFiniteGradient { param } => assert_eq!(param, "generator.1.bias"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut net = Mlp::new(&small_spec(true), Role::Generator, 0.02, &mut seeded(9)).unwrap();
        net.predict(&init_gaussian(&[8, 3], 0.0, 1.0, &mut seeded(1)).unwrap(), true)
            .unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&buf[..header_end]).unwrap(),
            "mlp v1 generator dense:3x5:none,bn:5:0.00001:0.1,act:lrelu0.2,dense:5x4:none,bn:4:0.00001:0.1,act:lrelu0.2,dense:4x2:tanh"
        );
        let back = Mlp::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(again, buf);
    }
}
