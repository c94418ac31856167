//! Convolution, normalization and readout layers, and the two composite
//! spiking blocks built from them.

mod bottleneck;
mod glsc;

pub use bottleneck::{BottleneckPlifBlock, MID_KERNEL};
pub use glsc::{GlscBlock, GlscLayout};

pub use crate::tensor::kernels::{
    batchnorm_eval, batchnorm_train, conv1d_forward, linear_forward, BatchStats, Conv1dGeometry,
};

use rand::Rng;

use crate::energy::SpikeRecord;
use crate::error::{Error, Result};
use crate::neurons::SurrogateSpec;
use crate::params::ParamStore;
use crate::tensor::{ParamId, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Nonlinearity used by a block: spiking neurons, or ReLU for the
/// non-spiking ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Spiking,
    Relu,
}

/// Pending running-statistics update from one train-mode normalization.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

impl BnUpdate {
    pub fn apply<S: Real>(&self, store: &mut ParamStore<S>) {
        let m = self.momentum;
        let mean = store.get_mut(self.running_mean).data_mut();
        for (r, &b) in mean.iter_mut().zip(&self.stats.mean) {
            *r = S::of_f64((1.0 - m) * r.as_f64() + m * b);
        }
        let var = store.get_mut(self.running_var).data_mut();
        for (r, b) in var.iter_mut().zip(self.stats.unbiased_var()) {
            *r = S::of_f64((1.0 - m) * r.as_f64() + m * b);
        }
    }
}

/// Everything a layer needs while recording one forward pass.
pub struct ForwardCtx<'a, S: Real> {
    pub tape: &'a mut Tape<S>,
    pub store: &'a ParamStore<S>,
    pub mode: Mode,
    pub timesteps: usize,
    pub surrogate: SurrogateSpec,
    pub bn_updates: Vec<BnUpdate>,
    pub record: SpikeRecord,
    /// Spiking layer outputs in execution order, `[T·B, C, L]` each.
    pub spike_outputs: Vec<(String, Var)>,
}

impl<'a, S: Real> ForwardCtx<'a, S> {
    pub fn new(
        tape: &'a mut Tape<S>,
        store: &'a ParamStore<S>,
        mode: Mode,
        timesteps: usize,
        surrogate: SurrogateSpec,
    ) -> Self {
        Self {
            tape,
            store,
            mode,
            timesteps,
            surrogate,
            bn_updates: Vec::new(),
            record: SpikeRecord::new(timesteps),
            spike_outputs: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(id, self.store.get(id))
    }

    /// Registers a spiking layer's output for rate accounting.
    pub fn emit_spikes(&mut self, name: &str, spikes: Var) -> Result<()> {
        self.record
            .record_spikes(name, self.tape.value(spikes), self.timesteps)?;
        self.spike_outputs.push((name.to_string(), spikes));
        Ok(())
    }
}

/// Uniform Kaiming initialization for a fan-in of `fan_in`: `U(±√(6/fan_in))`.
pub fn kaiming_uniform<S: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of_f64(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub geom: Conv1dGeometry,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv1d {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        geom: Conv1dGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        geom.validate()?;
        let fan_in = geom.in_channels * geom.kernel;
        let weight = store.add_param(
            format!("{name}.weight"),
            kaiming_uniform(&geom.weight_shape(), fan_in, rng),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[geom.out_channels])));
        Ok(Self { geom, weight, bias })
    }

    pub fn forward<S: Real>(&self, ctx: &mut ForwardCtx<'_, S>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv1d(x, w, b, self.geom)
    }

    pub fn param_count(&self) -> usize {
        let g = &self.geom;
        g.out_channels * g.in_channels * g.kernel + if self.bias.is_some() { g.out_channels } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) || !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!(
                "batchnorm {name}: eps must be > 0 and momentum in (0,1), got {eps}, {momentum}"
            )));
        }
        Ok(Self {
            channels,
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            eps,
            momentum,
        })
    }

    /// Normalizes over every axis but the channel axis (1). In train mode the
    /// running-statistics update is queued on `ctx`.
    pub fn forward<S: Real>(&self, ctx: &mut ForwardCtx<'_, S>, x: Var) -> Result<Var> {
        let channels = ctx.tape.shape(x).get(1).copied();
        if channels != Some(self.channels) {
            return Err(Error::dim("batchnorm", ctx.tape.shape(x), &[self.channels]));
        }
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batchnorm(x, gamma, beta, self.eps)?;
                ctx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let (m, v) = (ctx.store.get(self.running_mean), ctx.store.get(self.running_var));
                ctx.tape.batchnorm_eval(x, gamma, beta, m.data(), v.data(), self.eps)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let n = in_features * out_features;
        let data = (0..n).map(|_| S::of_f64(rng.gen_range(-bound..=bound))).collect();
        Self {
            in_features,
            out_features,
            weight: store.add_param(
                format!("{name}.weight"),
                Tensor::new(&[out_features, in_features], data).expect("sized"),
            ),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward<S: Real>(&self, ctx: &mut ForwardCtx<'_, S>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}
