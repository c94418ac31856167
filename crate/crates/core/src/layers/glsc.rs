use rand::Rng;

use super::{Activation, BatchNorm1d, Conv1d, Conv1dGeometry, ForwardCtx};
use crate::error::{Error, Result};
use crate::neurons::{lif_sequence, LifParams};
use crate::params::ParamStore;
use crate::tensor::{Real, Var};

/// Global-local spiking convolution: a plain and a dilated 1-D convolution,
/// each batch-normalized, summed into one LIF population.
#[derive(Clone, Debug)]
pub struct GlscBlock {
    pub name: String,
    pub local: Option<(Conv1d, BatchNorm1d)>,
    pub global: Option<(Conv1d, BatchNorm1d)>,
    pub neuron: LifParams,
    pub activation: Activation,
}

/// Shape of one block. `None` kernels drop that branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlscLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub local_kernel: Option<usize>,
    pub global_kernel: Option<usize>,
    pub dilation: usize,
}

impl GlscLayout {
    pub fn local_geometry(&self) -> Option<Conv1dGeometry> {
        self.local_kernel.map(|k| Conv1dGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: k,
            stride: self.stride,
            dilation: 1,
            padding: Conv1dGeometry::same_padding(k, 1),
        })
    }

    pub fn global_geometry(&self) -> Option<Conv1dGeometry> {
        self.global_kernel.map(|k| Conv1dGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: k,
            stride: self.stride,
            dilation: self.dilation,
            padding: Conv1dGeometry::same_padding(k, self.dilation),
        })
    }

    /// Rejects layouts whose branches could disagree on output length.
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.local_kernel.is_none() && self.global_kernel.is_none() {
            return Err(Error::Config(format!("{name}: a GLSC block needs at least one branch")));
        }
        for k in [self.local_kernel, self.global_kernel].into_iter().flatten() {
            if k % 2 == 0 {
                return Err(Error::Config(format!(
                    "{name}: kernel {k} is even; branch lengths only agree for odd kernels"
                )));
            }
        }
        if self.global_kernel.is_some() && self.dilation < 2 {
            return Err(Error::Config(format!(
                "{name}: the global branch needs dilation > 1, got {}",
                self.dilation
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config(format!("{name}: stride must be >= 1")));
        }
        Ok(())
    }

    pub fn out_len(&self, in_len: usize) -> Result<usize> {
        let mut len = None;
        for g in [self.local_geometry(), self.global_geometry()].into_iter().flatten() {
            let l = g.out_len(in_len)?;
            if len.is_some_and(|prev| prev != l) {
                return Err(Error::Config("GLSC branches disagree on output length".into()));
            }
            len = Some(l);
        }
        len.ok_or_else(|| Error::Config("GLSC block without branches".into()))
    }
}

impl GlscBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        layout: GlscLayout,
        neuron: LifParams,
        activation: Activation,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        layout.validate(name)?;
        let mut branch = |geom: Option<Conv1dGeometry>, tag: &str| -> Result<Option<(Conv1d, BatchNorm1d)>> {
            geom.map(|g| {
                let conv = Conv1d::new(store, &format!("{name}.{tag}"), g, false, rng)?;
                let bn = BatchNorm1d::new(store, &format!("{name}.bn_{tag}"), g.out_channels, bn_eps, bn_momentum)?;
                Ok((conv, bn))
            })
            .transpose()
        };
        let local = branch(layout.local_geometry(), "local")?;
        let global = branch(layout.global_geometry(), "global")?;
        Ok(Self {
            name: name.to_string(),
            local,
            global,
            neuron,
            activation,
        })
    }

    pub fn spike_layer_name(&self) -> String {
        format!("{}.lif", self.name)
    }

    pub fn branches(&self) -> impl Iterator<Item = &(Conv1d, BatchNorm1d)> {
        self.local.iter().chain(self.global.iter())
    }

    /// Sum of the normalized branch outputs, before the neurons.
    pub fn branch_sum<S: Real>(&self, ctx: &mut ForwardCtx<'_, S>, x: Var) -> Result<Var> {
        let mut sum: Option<Var> = None;
        for (conv, bn) in self.branches() {
            let y = conv.forward(ctx, x)?;
            let y = bn.forward(ctx, y)?;
            sum = Some(match sum {
                Some(s) => ctx.tape.add(s, y)?,
                None => y,
            });
        }
        sum.ok_or_else(|| Error::Config(format!("{}: no branches", self.name)))
    }

    /// `x` is `[T·B, C, L]`, or `[B, C, L]` when `static_input` is set, in
    /// which case the branch sum is repeated across the time steps.
    pub fn forward<S: Real>(&self, ctx: &mut ForwardCtx<'_, S>, x: Var, static_input: bool) -> Result<Var> {
        let mut sum = self.branch_sum(ctx, x)?;
        if static_input && ctx.timesteps > 1 {
            sum = ctx.tape.repeat_outer(sum, ctx.timesteps)?;
        }
        match self.activation {
            Activation::Spiking => {
                let spikes = lif_sequence(ctx.tape, sum, ctx.timesteps, &self.neuron, ctx.surrogate)?;
                ctx.emit_spikes(&self.spike_layer_name(), spikes)?;
                Ok(spikes)
            }
            Activation::Relu => ctx.tape.relu(sum),
        }
    }

    pub fn param_count(&self) -> usize {
        self.branches().map(|(c, b)| c.param_count() + b.param_count()).sum()
    }
}
