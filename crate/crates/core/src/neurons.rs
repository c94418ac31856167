//! Leaky and parametric leaky integrate-and-fire neurons.
//!
//! Both neuron kinds integrate input into a membrane potential, emit a binary
//! spike when it reaches the threshold, and hard-reset fired positions to zero.
//! The step functions here are tape-free; [`lif_sequence`] and
//! [`plif_sequence`] run the same arithmetic on a [`Tape`] over a stacked
//! `[T·B, ..]` sequence so gradients flow back through time.
//!
//! During backward the Heaviside step is replaced by a surrogate
//! pseudo-derivative, and the reset factor `(1 − spike)` is treated as a
//! constant.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
}

impl LifParams {
    pub fn new(tau: f64, v_th: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("LIF leak factor must lie in [0, 1), got {tau}")));
        }
        if !(v_th > 0.0) {
            return Err(Error::Config(format!("firing threshold must be positive, got {v_th}")));
        }
        Ok(Self { tau, v_th })
    }
}

impl Default for LifParams {
    fn default() -> Self {
        Self { tau: 0.5, v_th: 1.0 }
    }
}

/// PLIF decay is `k(a) = sigmoid(a)`, learned per layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlifParams {
    pub a: f64,
    pub v_th: f64,
}

impl PlifParams {
    /// `a = 0` gives a neutral starting decay `k = 0.5`.
    pub const INIT_A: f64 = 0.0;

    pub fn k<S: Real>(&self) -> S {
        sigmoid(S::of_f64(self.a))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    /// Box of height `1/width` on `|u − v_th| < width/2`.
    Rectangular,
    /// `α·σ(αx)·(1 − σ(αx))` with `α = 4/width`, so the peak matches the box.
    SigmoidDerivative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Rectangular,
            width: 1.0,
        }
    }
}

impl SurrogateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::Config(format!(
                "surrogate width must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }

    /// Pseudo-derivative of the spike with respect to `u − v_th`.
    pub fn derivative(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::Rectangular => {
                if x.abs() < self.width / 2.0 {
                    1.0 / self.width
                } else {
                    0.0
                }
            }
            SurrogateKind::SigmoidDerivative => {
                let alpha = 4.0 / self.width;
                let s = 1.0 / (1.0 + (-alpha * x).exp());
                alpha * s * (1.0 - s)
            }
        }
    }
}

/// Membrane potential of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState<S = f32> {
    pub u: Tensor<S>,
}

impl<S: Real> NeuronState<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
        }
    }
}

#[inline]
fn spikes_at<S: Real>(u_pre: S, v_th: f64) -> bool {
    u_pre.as_f64() - v_th >= 0.0
}

pub fn heaviside<S: Real>(u_pre: &Tensor<S>, v_th: f64) -> Tensor<S> {
    u_pre.map(|v| if spikes_at(v, v_th) { S::ONE } else { S::ZERO })
}

fn fire_and_reset<S: Real>(u_pre: Tensor<S>, v_th: f64) -> (Tensor<S>, NeuronState<S>) {
    let spikes = heaviside(&u_pre, v_th);
    let u = u_pre
        .zip_map(&spikes, "reset", |u, s| u * (S::ONE - s))
        .expect("same shape");
    (spikes, NeuronState { u })
}

/// `u_pre = τ·u + x`, then fire and hard reset.
pub fn lif_step<S: Real>(
    state: &NeuronState<S>,
    input: &Tensor<S>,
    p: &LifParams,
) -> Result<(Tensor<S>, NeuronState<S>)> {
    let tau = S::of_f64(p.tau);
    let u_pre = state.u.zip_map(input, "lif_step", |u, x| u * tau + x)?;
    Ok(fire_and_reset(u_pre, p.v_th))
}

/// `u_pre = u − k(a)·(u − x)`, then fire and hard reset.
pub fn plif_step<S: Real>(
    state: &NeuronState<S>,
    input: &Tensor<S>,
    p: &PlifParams,
) -> Result<(Tensor<S>, NeuronState<S>)> {
    let k: S = p.k();
    let u_pre = state.u.zip_map(input, "plif_step", |u, x| u - (u - x) * k)?;
    Ok(fire_and_reset(u_pre, p.v_th))
}

/// Fires `u_pre` and applies the detached reset; returns `(spikes, u')`.
fn fire_and_reset_tape<S: Real>(
    tape: &mut Tape<S>,
    u_pre: Var,
    v_th: f64,
    surrogate: SurrogateSpec,
) -> Result<(Var, Var)> {
    let spikes = tape.fire(u_pre, v_th, surrogate)?;
    let keep = tape.value(spikes).map(|s| S::ONE - s);
    let keep = tape.constant(keep);
    let u_next = tape.mul(u_pre, keep)?;
    Ok((spikes, u_next))
}

pub fn lif_step_tape<S: Real>(
    tape: &mut Tape<S>,
    u: Var,
    x: Var,
    p: &LifParams,
    surrogate: SurrogateSpec,
) -> Result<(Var, Var)> {
    let leaked = tape.scale(u, S::of_f64(p.tau))?;
    let u_pre = tape.add(leaked, x)?;
    if tape.shape(u_pre) != tape.shape(x) {
        return Err(Error::dim("lif_step", tape.shape(u), tape.shape(x)));
    }
    fire_and_reset_tape(tape, u_pre, p.v_th, surrogate)
}

/// `k` is the recorded decay `sigmoid(a)`, a one-element tensor.
pub fn plif_step_tape<S: Real>(
    tape: &mut Tape<S>,
    u: Var,
    x: Var,
    k: Var,
    v_th: f64,
    surrogate: SurrogateSpec,
) -> Result<(Var, Var)> {
    if tape.shape(u) != tape.shape(x) {
        return Err(Error::dim("plif_step", tape.shape(u), tape.shape(x)));
    }
    let diff = tape.sub(u, x)?;
    let scaled = tape.mul(diff, k)?;
    let u_pre = tape.sub(u, scaled)?;
    fire_and_reset_tape(tape, u_pre, v_th, surrogate)
}

/// Runs `step` over the `timesteps` outer blocks of `x: [T·B, ..]` starting
/// from a zero membrane, and stacks the spikes back into `[T·B, ..]`.
fn run_sequence<S: Real>(
    tape: &mut Tape<S>,
    x: Var,
    timesteps: usize,
    mut step: impl FnMut(&mut Tape<S>, Var, Var) -> Result<(Var, Var)>,
) -> Result<Var> {
    let outer = tape.shape(x).first().copied().unwrap_or(0);
    if timesteps == 0 || outer % timesteps != 0 {
        return Err(Error::Contract(format!(
            "outer extent {outer} is not a multiple of {timesteps} time steps"
        )));
    }
    let batch = outer / timesteps;
    let mut shape = tape.shape(x).to_vec();
    shape[0] = batch;
    let mut u = tape.constant(Tensor::zeros(&shape));
    let mut out = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let xt = tape.slice_outer(x, t * batch, batch)?;
        let (s, u_next) = step(tape, u, xt)?;
        out.push(s);
        u = u_next;
    }
    if out.len() == 1 {
        return Ok(out[0]);
    }
    tape.concat_outer(&out)
}

pub fn lif_sequence<S: Real>(
    tape: &mut Tape<S>,
    x: Var,
    timesteps: usize,
    p: &LifParams,
    surrogate: SurrogateSpec,
) -> Result<Var> {
    run_sequence(tape, x, timesteps, |tape, u, xt| lif_step_tape(tape, u, xt, p, surrogate))
}

/// `a` is the per-layer decay parameter (one element).
pub fn plif_sequence<S: Real>(
    tape: &mut Tape<S>,
    x: Var,
    timesteps: usize,
    a: Var,
    v_th: f64,
    surrogate: SurrogateSpec,
) -> Result<Var> {
    let k = tape.sigmoid(a)?;
    run_sequence(tape, x, timesteps, |tape, u, xt| {
        plif_step_tape(tape, u, xt, k, v_th, surrogate)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_lif(u: f32, x: f32, p: &LifParams) -> (f32, f32) {
        let u_pre = lif_step(
            &NeuronState { u: vec![u].into() },
            &vec![x].into(),
            p,
        )
        .unwrap();
        (u_pre.0.data()[0], u_pre.1.u.data()[0])
    }

    #[test]
    fn quiescent_lif() {
        assert_eq!(scalar_lif(0.0, 0.0, &LifParams::new(0.5, 1.0).unwrap()), (0.0, 0.0));
    }

    #[test]
    fn lif_below_threshold() {
        let (s, u) = scalar_lif(0.6, 0.5, &LifParams::new(0.5, 1.0).unwrap());
        assert_eq!(s, 0.0);
        assert!((u - 0.8).abs() < 1e-7);
    }

    #[test]
    fn lif_fires_and_resets() {
        assert_eq!(scalar_lif(1.2, 0.5, &LifParams::new(0.5, 1.0).unwrap()), (1.0, 0.0));
    }

    #[test]
    fn plif_hand_simulation() {
        let p = PlifParams { a: 0.0, v_th: 1.0 };
        let (s, st) = plif_step(&NeuronState { u: vec![0.4f64].into() }, &vec![0.8].into(), &p).unwrap();
        assert_eq!(s.data(), &[0.0]);
        assert!((st.u.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn plif_large_a_is_memoryless() {
        let p = PlifParams { a: 20.0, v_th: 10.0 };
        let (_, st) = plif_step(&NeuronState { u: vec![3.0f64].into() }, &vec![0.7].into(), &p).unwrap();
        assert!((st.u.data()[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn plif_fixed_point_above_threshold() {
        for a in [-3.0, 0.0, 2.5] {
            let p = PlifParams { a, v_th: 1.0 };
            let (s, st) = plif_step(&NeuronState { u: vec![2.0f64].into() }, &vec![2.0].into(), &p).unwrap();
            assert_eq!((s.data()[0], st.u.data()[0]), (1.0, 0.0));
        }
    }

    #[test]
    fn step_shape_mismatch() {
        let st = NeuronState::<f32>::zeros(&[2, 3]);
        let x = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(lif_step(&st, &x, &LifParams::default()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn invalid_params() {
        assert!(LifParams::new(1.0, 1.0).is_err());
        assert!(LifParams::new(0.5, 0.0).is_err());
        assert!(SurrogateSpec { kind: SurrogateKind::Rectangular, width: 0.0 }.validate().is_err());
    }

    #[test]
    fn fire_threshold_edges() {
        let u: Tensor<f64> = vec![1.01, 0.99].into();
        assert_eq!(heaviside(&u, 1.0).data(), &[1.0, 0.0]);
    }

    #[test]
    fn rectangular_window() {
        let s = SurrogateSpec::default();
        assert_eq!(s.derivative(0.0), 1.0);
        assert_eq!(s.derivative(0.6), 0.0);
        assert_eq!(s.derivative(-0.6), 0.0);
        let sig = SurrogateSpec { kind: SurrogateKind::SigmoidDerivative, width: 1.0 };
        assert!((sig.derivative(0.0) - 1.0).abs() < 1e-12);
        assert!((sig.derivative(0.3) - sig.derivative(-0.3)).abs() < 1e-12);
    }

    #[test]
    fn spike_gradient_is_surrogate_mask() {
        let mut tape = Tape::<f64>::new();
        let vals = [0.2, 0.55, 0.9, 1.0, 1.3, 1.49, 1.51, 2.0];
        let u = tape.leaf(Tensor::from_f64(&[8], &vals).unwrap(), true);
        let s = tape.fire(u, 1.0, SurrogateSpec::default()).unwrap();
        let total = tape.sum(s).unwrap();
        tape.backward(total).unwrap();
        let mask: Vec<f64> = vals
            .iter()
            .map(|v| if (v - 1.0f64).abs() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(tape.grad(u).unwrap(), mask.as_slice());
    }

    #[test]
    fn decay_derivative_matches_finite_difference() {
        for a in [-4.0, -0.5, 0.0, 1.3, 6.0] {
            let mut tape = Tape::<f64>::new();
            let av = tape.leaf(Tensor::scalar(a), true);
            let k = tape.sigmoid(av).unwrap();
            let kval = tape.value(k).data()[0];
            assert!(kval > 0.0 && kval < 1.0);
            tape.backward(k).unwrap();
            let eps = 1e-3;
            let fd = (sigmoid(a + eps) - sigmoid(a - eps)) / (2.0 * eps);
            assert!((tape.grad(av).unwrap()[0] - fd).abs() < 1e-6);
            assert!((tape.grad(av).unwrap()[0] - kval * (1.0 - kval)).abs() < 1e-15);
        }
    }

    #[test]
    fn plif_step_closed_form() {
        let k = 0.3f64;
        let a = (k / (1.0 - k)).ln();
        let p = PlifParams { a, v_th: 100.0 };
        let u: Tensor<f64> = vec![0.5, -1.0, 2.0].into();
        let x: Tensor<f64> = vec![1.0, 3.0, -2.0].into();
        let (_, st) = plif_step(&NeuronState { u: u.clone() }, &x, &p).unwrap();
        for i in 0..3 {
            let want = (1.0 - k) * u.data()[i] + k * x.data()[i];
            assert!((st.u.data()[i] - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn reset_and_monotonicity(
            u in prop::collection::vec(-2.0f32..2.0, 8),
            x in prop::collection::vec(-2.0f32..2.0, 8),
            bump in prop::collection::vec(0.0f32..1.0, 8),
            tau in 0.0f64..0.99,
            a in -4.0f64..4.0,
        ) {
            let st = NeuronState { u: u.clone().into() };
            let xt: Tensor<f32> = x.clone().into();
            let xb: Tensor<f32> = x.iter().zip(&bump).map(|(a, b)| a + b).collect::<Vec<_>>().into();
            let lif = LifParams::new(tau, 1.0).unwrap();
            let plif = PlifParams { a, v_th: 1.0 };
            let (s1, st1) = lif_step(&st, &xt, &lif).unwrap();
            let (s2, _) = lif_step(&st, &xb, &lif).unwrap();
            let (p1, pst1) = plif_step(&st, &xt, &plif).unwrap();
            let (p2, _) = plif_step(&st, &xb, &plif).unwrap();
            for i in 0..8 {
                prop_assert_eq!(s1.data()[i] * st1.u.data()[i], 0.0);
                prop_assert_eq!(p1.data()[i] * pst1.u.data()[i], 0.0);
                prop_assert!(s2.data()[i] >= s1.data()[i]);
                prop_assert!(p2.data()[i] >= p1.data()[i]);
            }
        }
    }
}
