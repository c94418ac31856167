use rand::Rng;

use super::{Activation, BatchNorm1d, Conv1d, Conv1dGeometry, ForwardCtx};
use crate::error::{Error, Result};
use crate::neurons::{plif_sequence, PlifParams};
use crate::params::ParamStore;
use crate::tensor::{ParamId, Real, Tensor, Var};

/// Residual bottleneck with PLIF activations:
/// `out = PLIF(bn(expand(PLIF(bn(mid(PLIF(bn(reduce(x)))))))) + bn(skip(x)))`.
///
/// `reduce`, `expand` and `skip` are 1-wide convolutions over channels; `mid`
/// is a 3-wide convolution along the time axis.
#[derive(Clone, Debug)]
pub struct BottleneckPlifBlock {
    pub name: String,
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub reduce: (Conv1d, BatchNorm1d),
    pub mid: (Conv1d, BatchNorm1d),
    pub expand: (Conv1d, BatchNorm1d),
    pub skip: (Conv1d, BatchNorm1d),
    /// Per-layer decay parameters of the three PLIF populations.
    pub decay: Option<[ParamId; 3]>,
    pub v_th: f64,
    pub activation: Activation,
}

pub const MID_KERNEL: usize = 3;

impl BottleneckPlifBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        v_th: f64,
        activation: Activation,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: channel counts must be positive")));
        }
        let pointwise = |i, o| Conv1dGeometry {
            in_channels: i,
            out_channels: o,
            kernel: 1,
            stride: 1,
            dilation: 1,
            padding: 0,
        };
        let mut unit = |tag: &str, g: Conv1dGeometry| -> Result<(Conv1d, BatchNorm1d)> {
            let conv = Conv1d::new(store, &format!("{name}.{tag}"), g, false, rng)?;
            let bn = BatchNorm1d::new(store, &format!("{name}.bn_{tag}"), g.out_channels, bn_eps, bn_momentum)?;
            Ok((conv, bn))
        };
        let reduce = unit("reduce", pointwise(in_channels, hidden))?;
        let mid = unit(
            "mid",
            Conv1dGeometry {
                kernel: MID_KERNEL,
                padding: 1,
                ..pointwise(hidden, hidden)
            },
        )?;
        let expand = unit("expand", pointwise(hidden, out_channels))?;
        let skip = unit("skip", pointwise(in_channels, out_channels))?;
        let decay = (activation == Activation::Spiking).then(|| {
            [1, 2, 3].map(|i| store.add_param(format!("{name}.plif{i}.a"), Tensor::full(&[1], S::of_f64(PlifParams::INIT_A))))
        });
        Ok(Self {
            name: name.to_string(),
            in_channels,
            hidden,
            out_channels,
            reduce,
            mid,
            expand,
            skip,
            decay,
            v_th,
            activation,
        })
    }

    pub fn spike_layer_names(&self) -> [String; 3] {
        [1, 2, 3].map(|i| format!("{}.plif{i}", self.name))
    }

    fn activate<S: Real>(&self, ctx: &mut ForwardCtx<'_, S>, x: Var, which: usize) -> Result<Var> {
        match (self.activation, self.decay) {
            (Activation::Spiking, Some(decay)) => {
                let a = ctx.param(decay[which]);
                let s = plif_sequence(ctx.tape, x, ctx.timesteps, a, self.v_th, ctx.surrogate)?;
                ctx.emit_spikes(&self.spike_layer_names()[which], s)?;
                Ok(s)
            }
            _ => ctx.tape.relu(x),
        }
    }

    fn unit<S: Real>(ctx: &mut ForwardCtx<'_, S>, unit: &(Conv1d, BatchNorm1d), x: Var) -> Result<Var> {
        let y = unit.0.forward(ctx, x)?;
        unit.1.forward(ctx, y)
    }

    pub fn forward<S: Real>(&self, ctx: &mut ForwardCtx<'_, S>, x: Var) -> Result<Var> {
        if ctx.tape.shape(x).get(1) != Some(&self.in_channels) {
            return Err(Error::dim("bottleneck", ctx.tape.shape(x), &[0, self.in_channels, 0]));
        }
        let r = Self::unit(ctx, &self.reduce, x)?;
        let h1 = self.activate(ctx, r, 0)?;
        let m = Self::unit(ctx, &self.mid, h1)?;
        let h2 = self.activate(ctx, m, 1)?;
        let main = Self::unit(ctx, &self.expand, h2)?;
        let skip = Self::unit(ctx, &self.skip, x)?;
        let sum = ctx.tape.add(main, skip)?;
        self.activate(ctx, sum, 2)
    }

    pub fn units(&self) -> [&(Conv1d, BatchNorm1d); 4] {
        [&self.reduce, &self.mid, &self.expand, &self.skip]
    }

    pub fn param_count(&self) -> usize {
        self.units()
            .iter()
            .map(|(c, b)| c.param_count() + b.param_count())
            .sum::<usize>()
            + if self.decay.is_some() { 3 } else { 0 }
    }
}
