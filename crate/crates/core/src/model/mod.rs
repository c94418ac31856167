//! The full network: GLSC feature blocks, bottleneck classifier blocks and a
//! rate readout, run over `T` time steps with the waveform presented at every
//! step.

mod config;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{make_variant, BottleneckSpec, GlscSpec, ModelConfig, Variant, SAMPLE_RATE};

use crate::config::KvConfig;
use crate::energy::{count_layer_ops, OpCounts, SpikeRecord, SynapseKind, SynapseLayer, SynapseSource};
use crate::error::{Error, Result};
use crate::layers::{Activation, BnUpdate, BottleneckPlifBlock, Conv1d, ForwardCtx, GlscBlock, Linear, Mode};
use crate::params::ParamStore;
use crate::tensor::serialize::{self, Entry};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const CONFIG_ENTRY: &str = "config";

#[derive(Clone, Debug)]
pub struct Model<S = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub glsc: Vec<GlscBlock>,
    pub bottlenecks: Vec<BottleneckPlifBlock>,
    pub readout: Linear,
}

pub struct ForwardOutput<S = f32> {
    /// `[B, classes]`.
    pub logits: Tensor<S>,
    pub logits_var: Var,
    pub spike_record: SpikeRecord,
    pub bn_updates: Vec<BnUpdate>,
    /// Spiking layer outputs `[T·B, C, L]` in execution order.
    pub spike_outputs: Vec<(String, Var)>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model<f32>> {
    Model::build(cfg)
}

impl<S: Real> Model<S> {
    /// Deterministic in `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let activation = if cfg.variant.is_spiking() {
            Activation::Spiking
        } else {
            Activation::Relu
        };
        let lif = cfg.lif()?;
        let glsc = (0..cfg.glsc.len())
            .map(|i| {
                GlscBlock::new(
                    &mut store,
                    &format!("glsc{i}"),
                    cfg.glsc_layout(i),
                    lif,
                    activation,
                    cfg.bn_eps,
                    cfg.bn_momentum,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut channels = cfg.glsc.last().map_or(0, |g| g.channels);
        let mut bottlenecks = Vec::with_capacity(cfg.bottlenecks.len());
        for (j, spec) in cfg.bottlenecks.iter().enumerate() {
            bottlenecks.push(BottleneckPlifBlock::new(
                &mut store,
                &format!("cla{j}"),
                channels,
                spec.hidden,
                spec.channels,
                cfg.v_th,
                activation,
                cfg.bn_eps,
                cfg.bn_momentum,
                &mut rng,
            )?);
            channels = spec.channels;
        }
        let readout = Linear::new(&mut store, "readout", channels, cfg.num_classes, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            store,
            glsc,
            bottlenecks,
            readout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    /// Accepts `[B, L]` or `[B, 1, L]` and returns `[B, 1, L]`.
    pub fn prepare_input(&self, wave: &Tensor<S>) -> Result<Tensor<S>> {
        let expected = [0, 1, self.config.input_len];
        let b = match *wave.shape() {
            [b, l] | [b, 1, l] if l == self.config.input_len => b,
            _ => return Err(Error::dim("model input", wave.shape(), &expected)),
        };
        if b == 0 {
            return Err(Error::dim("model input", wave.shape(), &expected));
        }
        wave.clone().reshape(&[b, 1, self.config.input_len])
    }

    /// Records one forward pass on `tape`. Train-mode batch-norm updates are
    /// returned, not applied; see [`Model::commit`].
    pub fn forward(&self, tape: &mut Tape<S>, wave: &Tensor<S>, mode: Mode) -> Result<ForwardOutput<S>> {
        let x = self.prepare_input(wave)?;
        let t = self.config.timesteps;
        let xv = tape.constant(x);
        let mut ctx = ForwardCtx::new(tape, &self.store, mode, t, self.config.surrogate);
        let mut h = xv;
        for (i, blk) in self.glsc.iter().enumerate() {
            h = blk.forward(&mut ctx, h, i == 0)?;
        }
        for blk in &self.bottlenecks {
            h = blk.forward(&mut ctx, h)?;
        }
        let pooled = ctx.tape.mean_last_axis(h)?;
        let rates = ctx.tape.mean_groups(pooled, t)?;
        let logits_var = self.readout.forward(&mut ctx, rates)?;
        let ForwardCtx {
            tape,
            bn_updates,
            record,
            spike_outputs,
            ..
        } = ctx;
        Ok(ForwardOutput {
            logits: tape.value(logits_var).clone(),
            logits_var,
            spike_record: record,
            bn_updates,
            spike_outputs,
        })
    }

    /// Logits and spike record of a pass that records no gradients.
    pub fn infer(&self, wave: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, SpikeRecord)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, wave, mode)?;
        Ok((out.logits, out.spike_record))
    }

    /// Applies queued running-statistics updates.
    pub fn commit(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            u.apply(&mut self.store);
        }
    }

    pub fn spike_layer_names(&self) -> Vec<String> {
        if !self.config.variant.is_spiking() {
            return Vec::new();
        }
        let mut names: Vec<String> = self.glsc.iter().map(|b| b.spike_layer_name()).collect();
        for b in &self.bottlenecks {
            names.extend(b.spike_layer_names());
        }
        names
    }

    /// Synaptic layers in execution order with the layer feeding each one.
    pub fn synapse_layers(&self) -> Result<Vec<SynapseLayer>> {
        let spiking = self.config.variant.is_spiking();
        let source = |name: Option<String>| match name {
            Some(n) if spiking => SynapseSource::Spikes(n),
            _ => SynapseSource::Dense,
        };
        let conv = |c: &Conv1d, src: &SynapseSource, in_len: usize, name: String| SynapseLayer {
            name,
            source: src.clone(),
            kind: SynapseKind::Conv {
                geom: c.geom,
                in_len,
            },
        };
        let mut layers = Vec::new();
        let mut len = self.config.input_len;
        let mut prev: Option<String> = None;
        for blk in &self.glsc {
            let src = source(prev.clone());
            for (tag, branch) in [("local", &blk.local), ("global", &blk.global)] {
                if let Some((c, _)) = branch {
                    layers.push(conv(c, &src, len, format!("{}.{tag}", blk.name)));
                }
            }
            len = blk
                .branches()
                .next()
                .map(|(c, _)| c.geom.out_len(len))
                .transpose()?
                .unwrap_or(len);
            prev = Some(blk.spike_layer_name());
        }
        for blk in &self.bottlenecks {
            let [p1, p2, _] = blk.spike_layer_names();
            let input = source(prev.clone());
            layers.push(conv(&blk.reduce.0, &input, len, format!("{}.reduce", blk.name)));
            layers.push(conv(&blk.mid.0, &source(Some(p1)), len, format!("{}.mid", blk.name)));
            layers.push(conv(&blk.expand.0, &source(Some(p2)), len, format!("{}.expand", blk.name)));
            layers.push(conv(&blk.skip.0, &input, len, format!("{}.skip", blk.name)));
            prev = Some(blk.spike_layer_names()[2].clone());
        }
        layers.push(SynapseLayer {
            name: "readout".into(),
            source: SynapseSource::Dense,
            kind: SynapseKind::Linear {
                in_features: self.readout.in_features,
                out_features: self.readout.out_features,
            },
        });
        Ok(layers)
    }

    /// Operation counts of a recorded pass over an input of `input_shape`.
    pub fn count_ops(&self, input_shape: &[usize], record: &SpikeRecord) -> Result<OpCounts> {
        let batch = match *input_shape {
            [b, l] | [b, 1, l] if l == self.config.input_len => b,
            _ => return Err(Error::dim("count_ops", input_shape, &[0, 1, self.config.input_len])),
        };
        if self.config.variant.is_spiking() && record.timesteps != self.config.timesteps {
            return Err(Error::Contract(format!(
                "record covers {} time steps, model runs {}",
                record.timesteps, self.config.timesteps
            )));
        }
        count_layer_ops(&self.synapse_layers()?, batch, record)
    }

    pub fn cast<T: Real>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            glsc: self.glsc.clone(),
            bottlenecks: self.bottlenecks.clone(),
            readout: self.readout.clone(),
        }
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut entries = self.store.to_entries();
        entries.push((
            CONFIG_ENTRY.to_string(),
            serialize::text_to_tensor(&self.config.to_kv().to_text()),
        ));
        entries
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let (_, cfg_tensor) = entries
            .iter()
            .find(|(n, _)| n == CONFIG_ENTRY)
            .ok_or_else(|| Error::Checkpoint {
                entry: CONFIG_ENTRY.into(),
                reason: "missing".into(),
            })?;
        let wrap = |e: Error| Error::Checkpoint {
            entry: CONFIG_ENTRY.into(),
            reason: e.to_string(),
        };
        let text = serialize::tensor_to_text(CONFIG_ENTRY, cfg_tensor)?;
        let cfg = ModelConfig::from_kv(&KvConfig::parse(&text).map_err(wrap)?).map_err(wrap)?;
        let mut model = Self::build(&cfg).map_err(wrap)?;
        model.store.load_entries(entries)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize::encode(&self.to_entries())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serialize::save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&serialize::load(path)?)
    }
}
