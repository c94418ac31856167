//! Finite-difference verification of every differentiable tape operation and
//! of a two-block network, in f64.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::Mode;
use crate::model::{make_variant, BottleneckSpec, GlscSpec, Model, ModelConfig, Variant};
use crate::neurons::{SurrogateKind, SurrogateSpec};
use crate::tensor::kernels::Conv1dGeometry;
use crate::tensor::{OpKind, ParamId, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Corrupts the backward rule of one operation kind.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub method: &'static str,
    pub elements: usize,
    /// Elements whose perturbation crossed a ReLU kink and were not compared.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(
                out,
                "check={} method={} elements={} kinks={} max_rel_err={:.3e} status={}",
                r.name,
                r.method,
                r.elements,
                r.kinks,
                r.max_rel_err,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "checks={} failed={} tolerance={:e}",
            self.results.len(),
            self.failures().count(),
            self.tolerance
        );
        out
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Random values with magnitude in `[0.2, 1)` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

type Forward = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Runner<'a> {
    opts: &'a GradcheckOptions,
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Runner<'_> {
    /// Contracts the output with a fixed random tensor so that every output
    /// element contributes to a scalar loss.
    fn scalar_loss(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
        if tape.shape(out).is_empty() {
            return Ok(out);
        }
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    }

    fn eval(f: &Forward, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = Self::scalar_loss(&mut tape, out, weights)?;
        tape.value(loss).item()
    }

    fn op(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: &Forward) -> Result<()> {
        self.op_with(name, inputs, f, false)
    }

    fn op_with(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: &Forward, allow_kinks: bool) -> Result<()> {
        let mut tape = Tape::new();
        tape.inject_backward_fault(self.opts.fault);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let weights = random(&mut self.rng, tape.shape(out), -1.0, 1.0);
        let loss = Self::scalar_loss(&mut tape, out, &weights)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
            .collect();
        let mut worst = 0f64;
        let mut elements = 0;
        let mut kinks = 0;
        let base = Self::eval(f, &inputs, &weights)?;
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let mut shifted = inputs.clone();
                let x0 = input.data()[j];
                shifted[i].data_mut()[j] = x0 + self.opts.eps;
                let plus = Self::eval(f, &shifted, &weights)?;
                shifted[i].data_mut()[j] = x0 - self.opts.eps;
                let minus = Self::eval(f, &shifted, &weights)?;
                let a = analytic[i][j];
                let (err, kink) = compare(a, plus, minus, base, self.opts, allow_kinks);
                elements += 1;
                if kink {
                    kinks += 1;
                } else {
                    worst = worst.max(err);
                }
            }
        }
        self.push(name, "finite-difference", elements, kinks, worst);
        Ok(())
    }

    fn push(&mut self, name: &str, method: &'static str, elements: usize, kinks: usize, worst: f64) {
        self.results.push(CheckResult {
            name: name.to_string(),
            method,
            elements,
            kinks,
            max_rel_err: worst,
            passed: worst.is_finite() && worst < self.opts.tolerance && kinks * 10 <= elements,
        });
    }

    /// Surrogate backward of `fire` against the pseudo-derivative formula.
    fn fire(&mut self, kind: SurrogateKind) -> Result<()> {
        let spec = SurrogateSpec { kind, width: 1.0 };
        let v_th = 0.5;
        let u = random(&mut self.rng, &[3, 7], -1.0, 2.0);
        let up = random(&mut self.rng, &[3, 7], -1.0, 1.0);
        let mut tape = Tape::new();
        tape.inject_backward_fault(self.opts.fault);
        let uv = tape.leaf(u.clone(), true);
        let s = tape.fire(uv, v_th, spec)?;
        let loss = Self::scalar_loss(&mut tape, s, &up)?;
        tape.backward(loss)?;
        let g = tape.grad(uv).map(|g| g.to_vec()).unwrap_or_default();
        let worst = (0..u.numel())
            .map(|i| rel_err(g.get(i).copied().unwrap_or(0.0), up.data()[i] * spec.derivative(u.data()[i] - v_th)))
            .fold(0.0, f64::max);
        let name = match kind {
            SurrogateKind::Rectangular => "fire/rectangular",
            SurrogateKind::SigmoidDerivative => "fire/sigmoid",
        };
        self.push(name, "surrogate-formula", u.numel(), 0, worst);
        Ok(())
    }

    /// Cross-entropy of a model forward pass against its parameters `ids`.
    fn model(&mut self, name: &str, model: &mut Model<f64>, ids: &[ParamId], allow_kinks: bool) -> Result<()> {
        let b = 2;
        let wave = random(&mut self.rng, &[b, model.config.input_len], -1.0, 1.0);
        let labels: Vec<usize> = (0..b).map(|i| i % model.config.num_classes).collect();
        let loss_of = |m: &Model<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &wave, Mode::Train)?;
            let loss = tape.cross_entropy(out.logits_var, &labels)?;
            tape.value(loss).item()
        };
        let mut tape = Tape::new();
        tape.inject_backward_fault(self.opts.fault);
        let out = model.forward(&mut tape, &wave, Mode::Train)?;
        let loss = tape.cross_entropy(out.logits_var, &labels)?;
        tape.backward(loss)?;
        let grads = tape.param_grads();
        let base = loss_of(model)?;
        let (mut worst, mut elements, mut kinks) = (0f64, 0, 0);
        for &id in ids {
            let g = grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g.data().to_vec());
            for j in 0..model.store.get(id).numel() {
                let x0 = model.store.get(id).data()[j];
                model.store.get_mut(id).data_mut()[j] = x0 + self.opts.eps;
                let plus = loss_of(model)?;
                model.store.get_mut(id).data_mut()[j] = x0 - self.opts.eps;
                let minus = loss_of(model)?;
                model.store.get_mut(id).data_mut()[j] = x0;
                let a = g.as_ref().map_or(0.0, |g| g[j]);
                let (err, kink) = compare(a, plus, minus, base, self.opts, allow_kinks);
                elements += 1;
                if kink {
                    kinks += 1;
                } else {
                    worst = worst.max(err);
                }
            }
        }
        self.push(name, "finite-difference", elements, kinks, worst);
        Ok(())
    }
}

/// Relative error of the analytic derivative `a` against the central
/// difference, and whether the point was classified as a kink: the one-sided
/// differences disagree and `a` matches one of them.
fn compare(a: f64, plus: f64, minus: f64, base: f64, opts: &GradcheckOptions, allow_kinks: bool) -> (f64, bool) {
    let central = (plus - minus) / (2.0 * opts.eps);
    let err = rel_err(a, central);
    if err < opts.tolerance || !allow_kinks {
        return (err, false);
    }
    let right = (plus - base) / opts.eps;
    let left = (base - minus) / opts.eps;
    let side_tol = 1e-2 * a.abs().max(1.0);
    let jump = (right - left).abs() > 10.0 * side_tol;
    let matches_side = (a - right).abs() <= side_tol || (a - left).abs() <= side_tol;
    (err, jump && matches_side)
}

fn micro_config(variant: Variant) -> Result<ModelConfig> {
    let base = ModelConfig {
        num_classes: 3,
        input_len: 24,
        timesteps: 2,
        glsc: vec![GlscSpec { channels: 2, local_kernel: Some(3), global_kernel: Some(3), stride: 2, dilation: 2 }],
        bottlenecks: vec![BottleneckSpec { hidden: 2, channels: 3 }],
        seed: 5,
        ..ModelConfig::default()
    };
    make_variant(&base, variant)
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut r = Runner {
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        results: Vec::new(),
    };
    let rng = &mut r.rng;
    let (a34, b34, b4) = (random(rng, &[3, 4], -1.0, 1.0), random(rng, &[3, 4], -1.0, 1.0), random(rng, &[4], -1.0, 1.0));
    let small = random(rng, &[2, 3, 4], -1.0, 1.0);
    let scalar = random(rng, &[1], -1.0, 1.0);
    let relu_in = away_from_zero(rng, &[3, 5]);
    let (m23, m34) = (random(rng, &[2, 3], -1.0, 1.0), random(rng, &[3, 4], -1.0, 1.0));
    let (lx, lw, lb) = (random(rng, &[3, 4], -1.0, 1.0), random(rng, &[2, 4], -1.0, 1.0), random(rng, &[2], -1.0, 1.0));
    let geom = Conv1dGeometry { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, dilation: 2, padding: 2 };
    let (cx, cw, cb) = (random(rng, &[2, 2, 11], -1.0, 1.0), random(rng, &[3, 2, 3], -1.0, 1.0), random(rng, &[3], -1.0, 1.0));
    let (bx, bg, bb) = (random(rng, &[3, 2, 5], -2.0, 2.0), random(rng, &[2], 0.5, 1.5), random(rng, &[2], -0.5, 0.5));
    let (rm, rv) = (random(rng, &[2], -0.5, 0.5), random(rng, &[2], 0.5, 1.5));
    let seq = random(rng, &[6, 2, 3], -1.0, 1.0);
    let logits = random(rng, &[4, 5], -2.0, 2.0);

    r.op("add", vec![a34.clone(), b34.clone()], &|t, v| t.add(v[0], v[1]))?;
    r.op("add/broadcast", vec![a34.clone(), b4.clone()], &|t, v| t.add(v[0], v[1]))?;
    r.op("sub", vec![a34.clone(), b34.clone()], &|t, v| t.sub(v[0], v[1]))?;
    r.op("sub/broadcast", vec![a34.clone(), scalar.clone()], &|t, v| t.sub(v[0], v[1]))?;
    r.op("mul", vec![a34.clone(), b34.clone()], &|t, v| t.mul(v[0], v[1]))?;
    r.op("mul/broadcast", vec![small.clone(), b4.clone()], &|t, v| t.mul(v[0], v[1]))?;
    r.op("scale", vec![a34.clone()], &|t, v| t.scale(v[0], 0.7))?;
    r.op("sigmoid", vec![a34.clone()], &|t, v| t.sigmoid(v[0]))?;
    r.op("relu", vec![relu_in], &|t, v| t.relu(v[0]))?;
    r.op("matmul", vec![m23, m34], &|t, v| t.matmul(v[0], v[1]))?;
    r.op("linear", vec![lx, lw, lb], &|t, v| t.linear(v[0], v[1], Some(v[2])))?;
    r.op("sum", vec![small.clone()], &|t, v| t.sum(v[0]))?;
    r.op("mean", vec![small.clone()], &|t, v| t.mean(v[0]))?;
    r.op("reshape", vec![small.clone()], &|t, v| t.reshape(v[0], &[6, 4]))?;
    r.op("conv1d", vec![cx, cw, cb], &move |t, v| t.conv1d(v[0], v[1], Some(v[2]), geom))?;
    r.op("batchnorm", vec![bx.clone(), bg.clone(), bb.clone()], &|t, v| Ok(t.batchnorm(v[0], v[1], v[2], 1e-5)?.0))?;
    let (rmd, rvd) = (rm.into_data(), rv.into_data());
    r.op("batchnorm_eval", vec![bx, bg, bb], &move |t, v| t.batchnorm_eval(v[0], v[1], v[2], &rmd, &rvd, 1e-5))?;
    r.op("mean_last_axis", vec![small.clone()], &|t, v| t.mean_last_axis(v[0]))?;
    r.op("slice_outer", vec![seq.clone()], &|t, v| t.slice_outer(v[0], 2, 3))?;
    r.op("concat_outer", vec![small.clone(), small.clone()], &|t, v| t.concat_outer(&[v[0], v[1], v[0]]))?;
    r.op("repeat_outer", vec![small.clone()], &|t, v| t.repeat_outer(v[0], 3))?;
    r.op("mean_groups", vec![seq], &|t, v| t.mean_groups(v[0], 3))?;
    r.op("cross_entropy", vec![logits], &|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]))?;
    r.fire(SurrogateKind::Rectangular)?;
    r.fire(SurrogateKind::SigmoidDerivative)?;

    let mut ann: Model<f64> = Model::build(&micro_config(Variant::GlcAnn)?)?;
    let ids: Vec<ParamId> = ann.store.trainable_ids().collect();
    r.model("model/glc-ann", &mut ann, &ids, true)?;
    let mut snn: Model<f64> = Model::build(&micro_config(Variant::SnnKws)?)?;
    let readout = [snn.readout.weight, snn.readout.bias];
    r.model("model/snn-kws-readout", &mut snn, &readout, false)?;

    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        results: r.results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn corrupted_rule_fails() {
        for kind in [OpKind::Conv1d, OpKind::BatchNorm, OpKind::Fire] {
            let opts = GradcheckOptions { fault: Some(kind), ..GradcheckOptions::default() };
            let report = run_gradcheck(&opts).unwrap();
            assert!(!report.passed(), "{kind:?}");
        }
    }

    #[test]
    fn repeatable() {
        let opts = GradcheckOptions { seed: 9, ..GradcheckOptions::default() };
        assert_eq!(run_gradcheck(&opts).unwrap().render(), run_gradcheck(&opts).unwrap().render());
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
