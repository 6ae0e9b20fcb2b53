use densim_tensor::{BnMode, BnStats, Elem, Graph, Tensor, Var};
use rand::Rng;

use crate::seed::rng_for;

/// Named tensor owned by a model. Running statistics are stored as params too,
/// they are simply never bound as trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Elem> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value }
    }

    /// Uniform in `[-bound, bound]`, seeded by `(seed, name)`.
    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, bound: f64, seed: u64) -> Self {
        let name = name.into();
        let mut rng = rng_for(seed, &format!("init.{name}"), 0);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
        Self { name, value: Tensor::new(shape, data) }
    }
}

/// Visitor over every parameter of a component.
pub trait Module<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

/// One forward pass: the autodiff graph plus bookkeeping of which parameters
/// were bound as trainable leaves and which batch-norm statistics were seen.
pub struct Ctx<T> {
    pub g: Graph<T>,
    /// Enables gradients and training-mode batch norm for unfrozen parts.
    pub train: bool,
    bound: Vec<(String, Var)>,
    bn_stats: Vec<(String, BnStats<T>)>,
}

impl<T: Elem> Ctx<T> {
    pub fn new(train: bool) -> Self {
        Self { g: Graph::new(), train, bound: Vec::new(), bn_stats: Vec::new() }
    }

    /// Places a parameter in the graph; tracked for gradients only when the
    /// context is training and the owner allows it.
    pub fn bind(&mut self, p: &Param<T>, trainable: bool) -> Var {
        let rg = self.train && trainable;
        let v = self.g.leaf(p.value.clone(), rg);
        if rg {
            self.bound.push((p.name.clone(), v));
        }
        v
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn bn_stats(&self) -> &[(String, BnStats<T>)] {
        &self.bn_stats
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BnStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Convolution (no bias) followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub name: String,
    pub weight: Param<T>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Elem> ConvBn<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, seed: u64) -> Self {
        let fan_in = (cin * k * k) as f64;
        Self {
            name: name.to_string(),
            weight: Param::uniform(format!("{name}.weight"), vec![cout, cin, k, k], 1.0 / fan_in.sqrt(), seed),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(vec![cout], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![cout])),
            running_mean: Param::new(format!("{name}.running_mean"), Tensor::zeros(vec![cout])),
            running_var: Param::new(format!("{name}.running_var"), Tensor::full(vec![cout], T::one())),
            stride,
            pad: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, trainable: bool) -> Var {
        let w = ctx.bind(&self.weight, trainable);
        let gamma = ctx.bind(&self.gamma, trainable);
        let beta = ctx.bind(&self.beta, trainable);
        let y = ctx.g.conv2d(x, w, None, self.stride, self.pad);
        let batch_stats = ctx.train && trainable;
        let (y, stats) = if batch_stats {
            ctx.g.batch_norm(y, gamma, beta, BnMode::Train)
        } else {
            let mode = BnMode::Eval { mean: self.running_mean.value.data(), var: self.running_var.value.data() };
            ctx.g.batch_norm(y, gamma, beta, mode)
        };
        if let Some(s) = stats {
            ctx.bn_stats.push((self.name.clone(), s));
        }
        ctx.g.relu(y)
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, stats: &BnStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.value.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.value.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Elem> Module<T> for ConvBn<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Pointwise convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv1x1<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Elem> Conv1x1<T> {
    pub fn new(name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        Self {
            weight: Param::uniform(format!("{name}.weight"), vec![cout, cin, 1, 1], 1.0 / (cin as f64).sqrt(), seed),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![cout])),
        }
    }

    /// Sets every bias entry to `v`.
    pub fn with_bias(mut self, v: f64) -> Self {
        self.bias.value.data_mut().fill(T::from_f64(v));
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, trainable: bool) -> Var {
        let w = ctx.bind(&self.weight, trainable);
        let b = ctx.bind(&self.bias, trainable);
        ctx.g.conv2d(x, w, Some(b), 1, 0)
    }

    /// Zeroes every weight and bias.
    pub fn zero(&mut self) {
        self.weight.value.data_mut().fill(T::zero());
        self.bias.value.data_mut().fill(T::zero());
    }
}

impl<T: Elem> Module<T> for Conv1x1<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
