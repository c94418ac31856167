//! Surrogate-gradient training through time: optimizers, epochs, evaluation
//! and best-checkpoint selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{ParamId, Real, Tape, Tensor, Var};

/// Labelled waveforms addressable by index.
pub trait SampleSource {
    fn num_samples(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn waveform(&self, i: usize) -> Result<Vec<f32>>;
}

impl SampleSource for [(Vec<f32>, usize)] {
    fn num_samples(&self) -> usize {
        self.len()
    }

    fn label(&self, i: usize) -> usize {
        self[i].1
    }

    fn waveform(&self, i: usize) -> Result<Vec<f32>> {
        Ok(self[i].0.clone())
    }
}

/// Mean softmax cross-entropy of `logits: [B, C]`.
pub fn cross_entropy<S: Real>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd-momentum",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Write a periodic checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Stop after this many epochs without validation improvement; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 0,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        macro_rules! field {
            ($key:literal, $field:ident) => {
                if let Some(v) = kv.get_parsed($key)? {
                    self.$field = v;
                }
            };
        }
        field!("epochs", epochs);
        field!("batch_size", batch_size);
        field!("lr", learning_rate);
        field!("optimizer", optimizer);
        field!("beta1", beta1);
        field!("beta2", beta2);
        field!("adam_eps", adam_eps);
        field!("momentum", momentum);
        field!("seed", seed);
        field!("checkpoint_every", checkpoint_every);
        field!("patience", patience);
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.learning_rate);
        kv.set("optimizer", self.optimizer);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("momentum", self.momentum);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("patience", self.patience);
        kv
    }
}

#[derive(Clone, Debug)]
struct Moments {
    id: ParamId,
    shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam or SGD with momentum; state is kept in f64 per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    steps: u64,
    slots: Vec<Moments>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            momentum: cfg.momentum,
            steps: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter in `grads`.
    pub fn step<S: Real>(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)]) -> Result<()> {
        for (id, g) in grads {
            if id.0 >= store.len() || store.get(*id).shape() != g.shape() {
                return Err(Error::State(format!(
                    "gradient for parameter #{} has shape {:?}, parameter does not match",
                    id.0,
                    g.shape()
                )));
            }
            if let Some(slot) = self.slots.iter().find(|s| s.id == *id) {
                if slot.shape != g.shape() {
                    return Err(Error::State(format!(
                        "parameter `{}` changed shape from {:?} to {:?} between steps",
                        store.name(*id),
                        slot.shape,
                        g.shape()
                    )));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let pos = match self.slots.iter().position(|s| s.id == *id) {
                Some(p) => p,
                None => {
                    self.slots.push(Moments {
                        id: *id,
                        shape: g.shape().to_vec(),
                        m: vec![0.0; g.numel()],
                        v: vec![0.0; g.numel()],
                    });
                    self.slots.len() - 1
                }
            };
            let slot = &mut self.slots[pos];
            let p = store.get_mut(*id).data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.beta1, self.beta2);
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    for i in 0..p.len() {
                        let gi = g.data()[i].as_f64();
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * gi;
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * gi * gi;
                        let update = self.learning_rate * (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + self.eps);
                        p[i] = S::of_f64(p[i].as_f64() - update);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for i in 0..p.len() {
                        slot.m[i] = self.momentum * slot.m[i] + g.data()[i].as_f64();
                        p[i] = S::of_f64(p[i].as_f64() - self.learning_rate * slot.m[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn optimizer_step<S: Real>(store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)], state: &mut Optimizer) -> Result<()> {
    state.step(store, grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn new(num_classes: usize) -> Self {
        Self {
            loss: 0.0,
            accuracy: 0.0,
            confusion: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn render_confusion(&self) -> String {
        let mut out = String::from("# confusion rows=true cols=predicted\n");
        for row in &self.confusion {
            out.push_str(&row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "loss={} accuracy={} samples={}", self.loss, self.accuracy, self.total())
    }
}

struct Accumulator {
    loss_sum: f64,
    metrics: Metrics,
}

impl Accumulator {
    fn new(num_classes: usize) -> Self {
        Self {
            loss_sum: 0.0,
            metrics: Metrics::new(num_classes),
        }
    }

    fn add<S: Real>(&mut self, logits: &Tensor<S>, labels: &[usize], mean_loss: f64) {
        self.loss_sum += mean_loss * labels.len() as f64;
        let c = self.metrics.confusion.len();
        for (row, &label) in logits.data().chunks(c).zip(labels) {
            let pred = argmax(row);
            self.metrics.confusion[label][pred] += 1;
        }
    }

    fn finish(mut self) -> Metrics {
        let n = self.metrics.total();
        if n > 0 {
            self.metrics.loss = self.loss_sum / n as f64;
            self.metrics.accuracy = self.metrics.correct() as f64 / n as f64;
        }
        self.metrics
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.as_f64() > row[best].as_f64() {
            best = i;
        }
    }
    best
}

/// Stacks waveforms `indices` into `[B, L]` plus their labels.
pub fn make_batch<S: Real>(data: &(impl SampleSource + ?Sized), indices: &[usize], input_len: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    let mut wave = Vec::with_capacity(indices.len() * input_len);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let w = data.waveform(i)?;
        if w.len() != input_len {
            return Err(Error::Data(format!("sample {i} has {} samples, expected {input_len}", w.len())));
        }
        wave.extend(w.into_iter().map(|v| S::of_f64(v as f64)));
        labels.push(data.label(i));
    }
    Ok((Tensor::new(&[indices.len(), input_len], wave)?, labels))
}

fn check_labels(data: &(impl SampleSource + ?Sized), num_classes: usize) -> Result<()> {
    for i in 0..data.num_samples() {
        if data.label(i) >= num_classes {
            return Err(Error::Data(format!(
                "sample {i} has label {} but the model has {num_classes} classes",
                data.label(i)
            )));
        }
    }
    Ok(())
}

fn non_finite_diagnostic<S: Real>(model: &Model<S>, tape: &Tape<S>) -> String {
    for id in model.store.ids() {
        if !model.store.get(id).all_finite() {
            return format!("parameter `{}`", model.store.name(id));
        }
    }
    tape.first_non_finite().unwrap_or_else(|| "loss".into())
}

/// One shuffled pass with an optimizer step per batch. The shuffle is seeded
/// by `(cfg.seed, epoch)`.
pub fn train_epoch<S: Real>(
    model: &mut Model<S>,
    optimizer: &mut Optimizer,
    data: &(impl SampleSource + ?Sized),
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Metrics> {
    cfg.validate()?;
    let n = data.num_samples();
    if n == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    check_labels(data, model.config.num_classes)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let mut acc = Accumulator::new(model.config.num_classes);
    let mut tape = Tape::new();
    for chunk in order.chunks(cfg.batch_size) {
        let (wave, labels) = make_batch::<S>(data, chunk, model.config.input_len)?;
        tape.clear();
        let out = model.forward(&mut tape, &wave, Mode::Train)?;
        let loss = cross_entropy(&mut tape, out.logits_var, &labels)?;
        let loss_value = tape.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss in epoch {epoch}; first non-finite tensor: {}",
                non_finite_diagnostic(model, &tape)
            )));
        }
        tape.backward(loss)?;
        let grads = tape.param_grads();
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in epoch {epoch}; first non-finite tensor: {}",
                non_finite_diagnostic(model, &tape)
            )));
        }
        optimizer.step(&mut model.store, &grads)?;
        model.commit(&out.bn_updates);
        acc.add(&out.logits, &labels, loss_value);
    }
    Ok(acc.finish())
}

/// Eval-mode metrics; the model is not modified.
pub fn evaluate<S: Real>(model: &Model<S>, data: &(impl SampleSource + ?Sized), batch_size: usize) -> Result<Metrics> {
    check_labels(data, model.config.num_classes)?;
    let mut acc = Accumulator::new(model.config.num_classes);
    let indices: Vec<usize> = (0..data.num_samples()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (wave, labels) = make_batch::<S>(data, chunk, model.config.input_len)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &wave, Mode::Eval)?;
        let loss = cross_entropy(&mut tape, out.logits_var, &labels)?;
        acc.add(&out.logits, &labels, tape.value(loss).item()?.as_f64());
    }
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={} accuracy={}",
            self.epoch, self.split, self.loss, self.accuracy
        )
    }
}

pub struct FitReport<S = f32> {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    /// Parameters of the epoch with the best validation accuracy (or the last
    /// epoch without a validation set).
    pub best: Model<S>,
}

/// Trains for `cfg.epochs` epochs. `on_epoch` sees every log line together
/// with the current model; returning an error aborts.
pub fn fit<S: Real>(
    model: &mut Model<S>,
    train: &(impl SampleSource + ?Sized),
    val: Option<&(impl SampleSource + ?Sized)>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model<S>) -> Result<()>,
) -> Result<FitReport<S>> {
    cfg.validate()?;
    let mut optimizer = Optimizer::new(cfg);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc: Option<f64> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let m = train_epoch(model, &mut optimizer, train, cfg, epoch)?;
        let log = EpochLog {
            epoch,
            split: Split::Train,
            loss: m.loss,
            accuracy: m.accuracy,
        };
        on_epoch(&log, model)?;
        history.push(log);
        match val.filter(|v| v.num_samples() > 0) {
            Some(v) => {
                let vm = evaluate(model, v, cfg.batch_size)?;
                let log = EpochLog {
                    epoch,
                    split: Split::Validation,
                    loss: vm.loss,
                    accuracy: vm.accuracy,
                };
                on_epoch(&log, model)?;
                history.push(log);
                if best_acc.is_none_or(|b| vm.accuracy > b) {
                    best_acc = Some(vm.accuracy);
                    best_epoch = epoch;
                    best = model.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        break;
                    }
                }
            }
            None => {
                best = model.clone();
                best_epoch = epoch;
            }
        }
    }
    Ok(FitReport {
        history,
        best_epoch,
        best_val_accuracy: best_acc,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BottleneckSpec, GlscSpec, ModelConfig};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_len: 48,
            timesteps: 2,
            num_classes: 3,
            glsc: vec![GlscSpec { channels: 3, local_kernel: Some(3), global_kernel: Some(3), stride: 2, dilation: 2 }],
            bottlenecks: vec![BottleneckSpec { hidden: 2, channels: 4 }],
            seed: 1,
            ..ModelConfig::default()
        }
    }

    fn random_set(n: usize, len: usize, classes: usize, seed: u64) -> Vec<(Vec<f32>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| ((0..len).map(|_| rng.gen_range(-2.0..2.0)).collect(), i % classes))
            .collect()
    }

    fn store_of(store: &ParamStore<f32>) -> Vec<(ParamId, Tensor<f32>)> {
        store.ids().map(|id| (id, store.get(id).clone())).collect()
    }

    #[test]
    fn uniform_and_confident_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[2, 12]));
        let loss = cross_entropy(&mut tape, l, &[0, 7]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 12f64.ln()).abs() < 1e-12);
        let mut onehot = vec![0.0; 12];
        onehot[3] = 50.0;
        let l = tape.constant(Tensor::new(&[1, 12], onehot).unwrap());
        let loss = cross_entropy(&mut tape, l, &[3]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-10);
        let l = tape.constant(Tensor::zeros(&[1, 12]));
        assert!(matches!(cross_entropy(&mut tape, l, &[12]), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_definition() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("x", Tensor::scalar(1.0));
        let cfg = TrainConfig { optimizer: OptimizerKind::SgdMomentum, learning_rate: 0.1, ..TrainConfig::default() };
        let mut opt = Optimizer::new(&cfg);
        opt.step(&mut store, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(store.get(id).data()[0], 1.0);
        opt.step(&mut store, &[(id, Tensor::scalar(1.0))]).unwrap();
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_tiny() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("x", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(&TrainConfig::default());
        opt.step(&mut store, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert!((store.get(id).data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn adam_on_quadratic_matches_reference() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("x", Tensor::scalar(1.0));
        let cfg = TrainConfig { learning_rate: 0.05, ..TrainConfig::default() };
        let mut opt = Optimizer::new(&cfg);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * store.get(id).data()[0];
            opt.step(&mut store, &[(id, Tensor::scalar(g))]).unwrap();
            let gr = 2.0 * x;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(x.abs() < 0.05);
        assert!((store.get(id).data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn shape_drift_is_state_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", Tensor::zeros(&[2]));
        let mut opt = Optimizer::new(&TrainConfig::default());
        opt.step(&mut store, &[(id, Tensor::zeros(&[2]))]).unwrap();
        *store.get_mut(id) = Tensor::zeros(&[3]);
        let err = opt.step(&mut store, &[(id, Tensor::zeros(&[3]))]).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert!(matches!(opt.step(&mut store, &[(id, Tensor::zeros(&[2]))]), Err(Error::State(_))));
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut model = build_model(&tiny()).unwrap();
        let data = random_set(6, 48, 3, 2);
        let before = store_of(&model.store);
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 4, ..TrainConfig::default() };
        let mut opt = Optimizer::new(&cfg);
        let m = train_epoch(&mut model, &mut opt, data.as_slice(), &cfg, 1).unwrap();
        assert_eq!(m.total(), 6);
        for (id, t) in before {
            if model.store.is_trainable(id) {
                assert_eq!(model.store.get(id), &t);
            }
        }
    }

    #[test]
    fn epoch_is_deterministic() {
        let data = random_set(8, 48, 3, 3);
        let cfg = TrainConfig { batch_size: 3, learning_rate: 0.01, ..TrainConfig::default() };
        let run = || {
            let mut model = build_model(&tiny()).unwrap();
            let mut opt = Optimizer::new(&cfg);
            let m = train_epoch(&mut model, &mut opt, data.as_slice(), &cfg, 1).unwrap();
            (model.to_bytes(), m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_is_pure() {
        let model = build_model(&tiny()).unwrap();
        let data = random_set(7, 48, 3, 4);
        let bytes = model.to_bytes();
        let a = evaluate(&model, data.as_slice(), 3).unwrap();
        let b = evaluate(&model, data.as_slice(), 2).unwrap();
        assert_eq!(a.confusion, b.confusion);
        assert_eq!(model.to_bytes(), bytes);
        for (i, row) in a.confusion.iter().enumerate() {
            let expected = data.iter().filter(|(_, l)| *l == i).count() as u64;
            assert_eq!(row.iter().sum::<u64>(), expected);
        }
        assert_eq!(a.accuracy, a.correct() as f64 / 7.0);
        let one = evaluate(&model, &data[..1], 1).unwrap();
        assert!(one.accuracy == 0.0 || one.accuracy == 1.0);
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let mut model = build_model(&tiny()).unwrap();
        let mut data = random_set(2, 48, 3, 5);
        data[0].0[3] = f32::NAN;
        let cfg = TrainConfig::default();
        let mut opt = Optimizer::new(&cfg);
        let err = train_epoch(&mut model, &mut opt, data.as_slice(), &cfg, 1).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("node #"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn later_steps_carry_gradient() {
        use crate::layers::{ForwardCtx, GlscBlock};
        use crate::neurons::SurrogateSpec;
        let cfg = ModelConfig { timesteps: 4, ..tiny() };
        let model = build_model(&cfg).unwrap();
        let blk: &GlscBlock = &model.glsc[0];
        let x = Tensor::new(&[2, 1, 48], random_set(2, 48, 1, 6).into_iter().flat_map(|(w, _)| w).collect()).unwrap();
        let grad_of = |from_step: usize| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut ctx = ForwardCtx::new(&mut tape, &model.store, Mode::Train, 4, SurrogateSpec::default());
            let s = blk.forward(&mut ctx, xv, true).unwrap();
            let tail = ctx.tape.slice_outer(s, from_step * 2, (4 - from_step) * 2).unwrap();
            let loss = ctx.tape.sum(tail).unwrap();
            tape.backward(loss).unwrap();
            let w = blk.local.as_ref().unwrap().0.weight;
            tape.param_grads().into_iter().find(|(id, _)| *id == w).unwrap().1
        };
        let all = grad_of(0);
        let later = grad_of(1);
        assert!(later.data().iter().any(|&g| g != 0.0));
        assert_ne!(all, later);
    }

    #[test]
    fn fit_keeps_best_validation_model() {
        let mut model = build_model(&tiny()).unwrap();
        let train = random_set(9, 48, 3, 7);
        let val = random_set(6, 48, 3, 8);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, learning_rate: 0.01, ..TrainConfig::default() };
        let mut lines = Vec::new();
        let report = fit(&mut model, train.as_slice(), Some(val.as_slice()), &cfg, |log, _| {
            lines.push(log.to_string());
            Ok(())
        })
        .unwrap();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("epoch=1 split=train loss="));
        let best = report.best_val_accuracy.unwrap();
        let recomputed = evaluate(&report.best, val.as_slice(), 4).unwrap();
        assert_eq!(recomputed.accuracy, best);
    }
}
