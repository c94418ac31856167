use std::collections::HashMap;

use super::kernels::{self, Conv1dGeometry};
use super::{sigmoid, Real, Tensor};
use crate::error::{Error, Result};
use crate::neurons::SurrogateSpec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable tensor in a model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Relu,
    MatMul,
    Linear,
    Sum,
    Mean,
    Reshape,
    Conv1d,
    BatchNorm,
    BatchNormEval,
    Fire,
    MeanLastAxis,
    SliceOuter,
    ConcatOuter,
    RepeatOuter,
    MeanGroups,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Conv1d => "conv1d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::BatchNormEval => "batchnorm_eval",
            OpKind::Fire => "fire",
            OpKind::MeanLastAxis => "mean_last_axis",
            OpKind::SliceOuter => "slice_outer",
            OpKind::ConcatOuter => "concat_outer",
            OpKind::RepeatOuter => "repeat_outer",
            OpKind::MeanGroups => "mean_groups",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf, Add, Sub, Mul, Scale, Sigmoid, Relu, MatMul, Linear, Sum, Mean, Reshape, Conv1d,
            BatchNorm, BatchNormEval, Fire, MeanLastAxis, SliceOuter, ConcatOuter, RepeatOuter,
            MeanGroups, CrossEntropy,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sigmoid(Var),
    Relu(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Fire { u: Var, v_th: f64, surrogate: SurrogateSpec },
    MeanLastAxis(Var),
    SliceOuter { x: Var, start: usize },
    ConcatOuter(Vec<Var>),
    RepeatOuter { x: Var, times: usize },
    MeanGroups { x: Var, groups: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::Fire { .. } => OpKind::Fire,
            Op::MeanLastAxis(_) => OpKind::MeanLastAxis,
            Op::SliceOuter { .. } => OpKind::SliceOuter,
            Op::ConcatOuter(_) => OpKind::ConcatOuter,
            Op::RepeatOuter { .. } => OpKind::RepeatOuter,
            Op::MeanGroups { .. } => OpKind::MeanGroups,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    retain: bool,
    grad: Option<Vec<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Linear record of a forward pass, replayed in reverse by [`Tape::backward`].
pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
    state: TapeState,
    params: Vec<(ParamId, Var)>,
    param_index: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output shape of a trailing-dimension broadcast, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let small_numel: usize = small.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    if small_numel == 1 {
        let big_numel: usize = big.iter().product();
        let a_numel: usize = a.iter().product();
        return Some(if a_numel >= big_numel { a.to_vec() } else { b.to_vec() });
    }
    if big.ends_with(small) {
        return Some(big.to_vec());
    }
    None
}

/// Sums `grad` (shaped like the broadcast output) back onto an operand of `numel` elements.
fn reduce_to<S: Real>(grad: &[S], numel: usize) -> Vec<S> {
    if grad.len() == numel {
        return grad.to_vec();
    }
    let mut acc = vec![0f64; numel];
    for (i, g) in grad.iter().enumerate() {
        acc[i % numel] += g.as_f64();
    }
    acc.into_iter().map(S::of_f64).collect()
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            state: TapeState::Recording,
            params: Vec::new(),
            param_index: HashMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can record a new forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.param_index.clear();
        self.state = TapeState::Recording;
    }

    /// Test hook: scales the input gradients produced by every `kind` node by 1.5.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn check_recording(&self) -> Result<()> {
        match self.state {
            TapeState::Recording => Ok(()),
            TapeState::Consumed => Err(Error::State(
                "tape already consumed by backward; clear it before recording".into(),
            )),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable tensor once per forward pass.
    pub fn param(&mut self, id: ParamId, value: &Tensor<S>) -> Var {
        if let Some(&v) = self.param_index.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.push((id, v));
        self.param_index.insert(id, v);
        v
    }

    /// Keeps the gradient of an intermediate node readable after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.nodes[v.0].grad.as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    /// Gradients of every registered parameter, zero-filled when unreachable.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<S>)> {
        self.params
            .iter()
            .map(|&(id, v)| {
                let shape = self.shape(v);
                let g = self
                    .grad_tensor(v)
                    .unwrap_or_else(|| Tensor::zeros(shape));
                (id, g)
            })
            .collect()
    }

    /// Describes the first recorded node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Some(format!("value of node #{i} ({})", n.op.kind().name()));
            }
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Some(format!("gradient of node #{i} ({})", n.op.kind().name()));
                }
            }
        }
        None
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind) -> Result<Var> {
        self.check_recording()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(kind.name(), &sa, &sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let (na, nb) = (va.len(), vb.len());
        let f = match kind {
            OpKind::Add => |x: S, y: S| x + y,
            OpKind::Sub => |x: S, y: S| x - y,
            _ => |x: S, y: S| x * y,
        };
        let data: Vec<S> = if na == nb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(va[i % na], vb[i % nb])).collect()
        };
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.check_recording()?;
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Scale(x, c), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_recording()?;
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sigmoid(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_recording()?;
        let value = self.value(x).map(|v| if v > S::ZERO { v } else { S::ZERO });
        let rg = self.rg(x);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_recording()?;
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x·Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_recording()?;
        let value = kernels::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_recording()?;
        let value = Tensor::scalar(S::of_f64(self.value(x).sum_f64()));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_recording()?;
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(S::of_f64(t.sum_f64() / t.numel() as f64));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_recording()?;
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv1dGeometry) -> Result<Var> {
        self.check_recording()?;
        let value = kernels::conv1d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }, rg))
    }

    /// Train-mode batch normalization over every non-channel axis. Returns the
    /// output together with the batch statistics used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, kernels::BatchStats)> {
        self.check_recording()?;
        let out = kernels::batchnorm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            rg,
        );
        Ok((v, out.stats))
    }

    /// Eval-mode batch normalization with frozen statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<Var> {
        self.check_recording()?;
        let value = kernels::batchnorm_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        )?;
        let mean = running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std = running_var
            .iter()
            .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    /// Heaviside firing `H(u − v_th)` whose backward pass uses the surrogate
    /// pseudo-derivative.
    pub fn fire(&mut self, u: Var, v_th: f64, surrogate: SurrogateSpec) -> Result<Var> {
        self.check_recording()?;
        surrogate.validate()?;
        let value = self
            .value(u)
            .map(|v| if v.as_f64() - v_th >= 0.0 { S::ONE } else { S::ZERO });
        let rg = self.rg(u);
        Ok(self.push(value, Op::Fire { u, v_th, surrogate }, rg))
    }

    /// Average over the last axis: `[.., L] → [..]`.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        self.check_recording()?;
        let t = self.value(x);
        let shape = t.shape();
        let (&l, lead) = shape
            .split_last()
            .ok_or_else(|| Error::Contract("mean_last_axis on a rank-0 tensor".into()))?;
        if l == 0 {
            return Err(Error::Contract("mean_last_axis over an empty axis".into()));
        }
        let data = t
            .data()
            .chunks(l)
            .map(|c| S::of_f64(c.iter().map(|v| v.as_f64()).sum::<f64>() / l as f64))
            .collect();
        let value = Tensor::new(lead, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanLastAxis(x), rg))
    }

    pub fn slice_outer(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_recording()?;
        let value = self.value(x).slice_outer(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceOuter { x, start }, rg))
    }

    pub fn concat_outer(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_recording()?;
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_outer(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatOuter(parts.to_vec()), rg))
    }

    /// Stacks `times` copies along the outer axis.
    pub fn repeat_outer(&mut self, x: Var, times: usize) -> Result<Var> {
        self.check_recording()?;
        if times == 0 {
            return Err(Error::Contract("repeat_outer with zero copies".into()));
        }
        let t = self.value(x);
        let copies: Vec<&Tensor<S>> = std::iter::repeat_n(t, times).collect();
        let value = Tensor::concat_outer(&copies)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RepeatOuter { x, times }, rg))
    }

    /// Averages `groups` consecutive outer blocks: `[G·B, ..] → [B, ..]`.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        self.check_recording()?;
        let t = self.value(x);
        let outer = t.shape().first().copied().unwrap_or(0);
        if groups == 0 || outer % groups != 0 {
            return Err(Error::Contract(format!(
                "mean_groups: outer extent {outer} not divisible into {groups} groups"
            )));
        }
        let block = t.numel() / groups;
        let mut acc = vec![0f64; block];
        for g in 0..groups {
            for (a, v) in acc.iter_mut().zip(&t.data()[g * block..(g + 1) * block]) {
                *a += v.as_f64();
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = outer / groups;
        let value = Tensor::new(&shape, acc.into_iter().map(|a| S::of_f64(a / groups as f64)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanGroups { x, groups }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_recording()?;
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(S::of_f64(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.state == TapeState::Consumed {
            return Err(Error::State(
                "backward already ran on this tape; record a new forward pass first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.state = TapeState::Consumed;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &g);
            let factor = (self.fault == Some(self.nodes[i].op.kind())).then(|| S::of_f64(1.5));
            for (input, mut c) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if let Some(f) = factor {
                    c.iter_mut().for_each(|v| *v *= f);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += *v),
                    slot => *slot = Some(c),
                }
            }
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) || node.retain {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            &Op::Add(a, b) => vec![
                (a, reduce_to(g, val(a).len())),
                (b, reduce_to(g, val(b).len())),
            ],
            &Op::Sub(a, b) => {
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                vec![(a, reduce_to(g, val(a).len())), (b, reduce_to(&neg, val(b).len()))]
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (na, nb) = (va.len(), vb.len());
                let ga: Vec<S> = g.iter().enumerate().map(|(k, &gv)| gv * vb[k % nb]).collect();
                let gb: Vec<S> = g.iter().enumerate().map(|(k, &gv)| gv * va[k % na]).collect();
                vec![(a, reduce_to(&ga, na)), (b, reduce_to(&gb, nb))]
            }
            &Op::Scale(x, c) => vec![(x, g.iter().map(|&v| v * c).collect())],
            &Op::Sigmoid(x) => vec![(
                x,
                g.iter().zip(out).map(|(&gv, &y)| gv * y * (S::ONE - y)).collect(),
            )],
            &Op::Relu(x) => vec![(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&gv, &xv)| if xv > S::ZERO { gv } else { S::ZERO })
                    .collect(),
            )],
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(a), val(b));
                let mut res = Vec::new();
                if rg(a) {
                    let mut ga = vec![S::ZERO; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0f64;
                            for c in 0..n {
                                acc += g[r * n + c].as_f64() * vb[p * n + c].as_f64();
                            }
                            ga[r * k + p] = S::of_f64(acc);
                        }
                    }
                    res.push((a, ga));
                }
                if rg(b) {
                    let mut gb = vec![S::ZERO; k * n];
                    for p in 0..k {
                        for c in 0..n {
                            let mut acc = 0f64;
                            for r in 0..m {
                                acc += va[r * k + p].as_f64() * g[r * n + c].as_f64();
                            }
                            gb[p * n + c] = S::of_f64(acc);
                        }
                    }
                    res.push((b, gb));
                }
                res
            }
            &Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
                let (vx, vw) = (val(x), val(w));
                let mut res = Vec::new();
                if rg(x) {
                    let mut gx = Vec::with_capacity(batch * fin);
                    for r in 0..batch {
                        for f in 0..fin {
                            let mut acc = 0f64;
                            for o in 0..fout {
                                acc += g[r * fout + o].as_f64() * vw[o * fin + f].as_f64();
                            }
                            gx.push(S::of_f64(acc));
                        }
                    }
                    res.push((x, gx));
                }
                if rg(w) {
                    let mut gw = Vec::with_capacity(fout * fin);
                    for o in 0..fout {
                        for f in 0..fin {
                            let mut acc = 0f64;
                            for r in 0..batch {
                                acc += g[r * fout + o].as_f64() * vx[r * fin + f].as_f64();
                            }
                            gw.push(S::of_f64(acc));
                        }
                    }
                    res.push((w, gw));
                }
                if let Some(b) = b {
                    let gb = (0..fout)
                        .map(|o| S::of_f64((0..batch).map(|r| g[r * fout + o].as_f64()).sum()))
                        .collect();
                    res.push((b, gb));
                }
                res
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; val(x).len()])],
            &Op::Mean(x) => {
                let n = val(x).len();
                vec![(x, vec![S::of_f64(g[0].as_f64() / n as f64); n])]
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            &Op::Conv1d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv1d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    &geom,
                    rg(x),
                    rg(w),
                    b.is_some_and(rg),
                );
                let mut res = Vec::new();
                if let Some(gx) = gx {
                    res.push((x, gx));
                }
                if let Some(gw) = gw {
                    res.push((w, gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    res.push((b, gb));
                }
                res
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (gx, gg, gbeta) = kernels::batchnorm_train_backward(
                    self.shape(*x),
                    g,
                    xhat,
                    inv_std,
                    val(*gamma),
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (outer, c, inner) =
                    kernels::channel_layout(self.shape(*x)).expect("validated in forward");
                let (vx, vg) = (val(*x), val(*gamma));
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![0f64; c];
                let mut gb = vec![0f64; c];
                for n in 0..outer {
                    for ch in 0..c {
                        let scale = vg[ch].as_f64() * inv_std[ch];
                        for k in (n * c + ch) * inner..(n * c + ch + 1) * inner {
                            let gv = g[k].as_f64();
                            gx.push(S::of_f64(gv * scale));
                            gg[ch] += gv * (vx[k].as_f64() - mean[ch]) * inv_std[ch];
                            gb[ch] += gv;
                        }
                    }
                }
                let to_s = |v: Vec<f64>| v.into_iter().map(S::of_f64).collect();
                vec![(*x, gx), (*gamma, to_s(gg)), (*beta, to_s(gb))]
            }
            &Op::Fire { u, v_th, surrogate } => vec![(
                u,
                g.iter()
                    .zip(val(u))
                    .map(|(&gv, &uv)| S::of_f64(gv.as_f64() * surrogate.derivative(uv.as_f64() - v_th)))
                    .collect(),
            )],
            &Op::MeanLastAxis(x) => {
                let l = *self.shape(x).last().expect("rank checked in forward");
                let mut gx = Vec::with_capacity(val(x).len());
                for &gv in g {
                    let v = S::of_f64(gv.as_f64() / l as f64);
                    gx.extend(std::iter::repeat_n(v, l));
                }
                vec![(x, gx)]
            }
            &Op::SliceOuter { x, start } => {
                let mut gx = vec![S::ZERO; val(x).len()];
                let inner: usize = self.shape(x)[1..].iter().product();
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                vec![(x, gx)]
            }
            Op::ConcatOuter(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).len();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, piece)
                    })
                    .collect()
            }
            &Op::RepeatOuter { x, times } => {
                let n = val(x).len();
                let mut acc = vec![0f64; n];
                for t in 0..times {
                    for (a, gv) in acc.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *a += gv.as_f64();
                    }
                }
                vec![(x, acc.into_iter().map(S::of_f64).collect())]
            }
            &Op::MeanGroups { x, groups } => {
                let inv = 1.0 / groups as f64;
                let piece: Vec<S> = g.iter().map(|v| S::of_f64(v.as_f64() * inv)).collect();
                let mut gx = Vec::with_capacity(piece.len() * groups);
                for _ in 0..groups {
                    gx.extend_from_slice(&piece);
                }
                vec![(x, gx)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0].as_f64() / batch as f64;
                let mut gl = Vec::with_capacity(probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gl.push(S::of_f64((probs[r * classes + c] - onehot) * scale));
                    }
                }
                vec![(*logits, gl)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        t.leaf(Tensor::from_f64(shape, v).unwrap(), true)
    }

    #[test]
    fn add_values() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[2], &[3.0, 4.0]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut t, &[2], &[0.0; 2]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn mul_by_zero_annihilates() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[3], &[1.0, -2.0, 5.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let y = t.mul(x, z).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1], &[0.0]);
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::<f64>::new();
        let i = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = leaf(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn double_backward_is_a_state_error() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::State(_))));
        assert!(matches!(t.sum(x), Err(Error::State(_))));
        t.clear();
        assert!(t.is_empty());
    }

    #[test]
    fn trailing_broadcast_reduces_gradient() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut t, &[3], &[10.0, 20.0, 30.0]);
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[10.0, 40.0, 90.0, 40.0, 100.0, 180.0]);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[5.0, 7.0, 9.0]);
        assert_eq!(t.grad(a).unwrap(), &[10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn param_registered_once() {
        let mut t = Tape::<f64>::new();
        let w = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let a = t.param(ParamId(0), &w);
        let b = t.param(ParamId(0), &w);
        assert_eq!(a, b);
        let y = t.mul(a, b).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let grads = t.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, 4.0]);
    }

    #[test]
    fn fault_injection_perturbs_gradient() {
        let mut t = Tape::<f64>::new();
        t.inject_backward_fault(Some(OpKind::Scale));
        let x = leaf(&mut t, &[1], &[1.0]);
        let y = t.scale(x, 2.0).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
    }
}
