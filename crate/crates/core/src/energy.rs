//! Firing-rate bookkeeping and synaptic-operation energy estimates.
//!
//! The energy of the spiking network relative to an equally shaped ANN is
//! `energy_rate = (AC/MAC) × mean firing rate × T`, where an accumulate costs
//! `AC/MAC = 1/7` of a multiply-accumulate by default.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::kernels::Conv1dGeometry;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_AC_MAC_RATIO: f64 = 1.0 / 7.0;

/// Spike statistics of one spiking layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpikes {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    pub step_spikes: Vec<u64>,
    pub step_elements: Vec<u64>,
    /// Spikes per time-axis position, summed over batch, channels and steps.
    pub position_counts: Vec<u64>,
}

impl LayerSpikes {
    pub fn spikes(&self) -> u64 {
        self.step_spikes.iter().sum()
    }

    pub fn elements(&self) -> u64 {
        self.step_elements.iter().sum()
    }

    pub fn rate(&self) -> f64 {
        match self.elements() {
            0 => 0.0,
            e => self.spikes() as f64 / e as f64,
        }
    }

    pub fn step_rate(&self, t: usize) -> f64 {
        match self.step_elements[t] {
            0 => 0.0,
            e => self.step_spikes[t] as f64 / e as f64,
        }
    }
}

/// Per-layer spike counts accumulated over forward passes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeRecord {
    pub timesteps: usize,
    layers: Vec<LayerSpikes>,
}

impl SpikeRecord {
    pub fn new(timesteps: usize) -> Self {
        Self {
            timesteps,
            layers: Vec::new(),
        }
    }

    pub fn layers(&self) -> &[LayerSpikes] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpikes> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Adds the spikes of `[T·B, C, L]` (or `[T·B, C]`) to `layer`.
    pub fn record_spikes<S: Real>(&mut self, layer: &str, spikes: &Tensor<S>, timesteps: usize) -> Result<()> {
        if timesteps != self.timesteps {
            return Err(Error::Contract(format!(
                "record holds {} time steps, got {timesteps}",
                self.timesteps
            )));
        }
        if !spikes.is_binary() {
            return Err(Error::Contract(format!("layer {layer}: spike tensor is not binary")));
        }
        let (outer, channels, length) = match *spikes.shape() {
            [n, c] => (n, c, 1),
            [n, c, l] => (n, c, l),
            _ => return Err(Error::dim("record_spikes", spikes.shape(), &[0, 0, 0])),
        };
        if timesteps == 0 || outer % timesteps != 0 {
            return Err(Error::Contract(format!(
                "layer {layer}: outer extent {outer} not divisible by {timesteps} time steps"
            )));
        }
        let per_step = spikes.numel() / timesteps;
        let mut step_spikes = Vec::with_capacity(timesteps);
        let mut positions = vec![0u64; length];
        for t in 0..timesteps {
            let block = &spikes.data()[t * per_step..(t + 1) * per_step];
            let mut count = 0u64;
            for (i, &v) in block.iter().enumerate() {
                if v == S::ONE {
                    count += 1;
                    positions[i % length] += 1;
                }
            }
            step_spikes.push(count);
        }
        let incoming = LayerSpikes {
            name: layer.to_string(),
            channels,
            length,
            step_spikes,
            step_elements: vec![per_step as u64; timesteps],
            position_counts: positions,
        };
        self.merge_layer(incoming)
    }

    fn merge_layer(&mut self, incoming: LayerSpikes) -> Result<()> {
        match self.layers.iter_mut().find(|l| l.name == incoming.name) {
            None => self.layers.push(incoming),
            Some(l) => {
                if (l.channels, l.length) != (incoming.channels, incoming.length) {
                    return Err(Error::Contract(format!(
                        "layer {}: shape changed between recordings",
                        l.name
                    )));
                }
                for (a, b) in l.step_spikes.iter_mut().zip(&incoming.step_spikes) {
                    *a += b;
                }
                for (a, b) in l.step_elements.iter_mut().zip(&incoming.step_elements) {
                    *a += b;
                }
                for (a, b) in l.position_counts.iter_mut().zip(&incoming.position_counts) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    /// Combines two records; associative and order-independent in its counts.
    pub fn merge(&mut self, other: &SpikeRecord) -> Result<()> {
        if other.timesteps != self.timesteps {
            return Err(Error::Contract("cannot merge records with different time steps".into()));
        }
        for l in &other.layers {
            self.merge_layer(l.clone())?;
        }
        Ok(())
    }

    pub fn total_spikes(&self) -> u64 {
        self.layers.iter().map(|l| l.spikes()).sum()
    }

    pub fn total_elements(&self) -> u64 {
        self.layers.iter().map(|l| l.elements()).sum()
    }

    /// Element-weighted mean rate: all spikes over all neuron-positions.
    pub fn mean_rate(&self) -> f64 {
        match self.total_elements() {
            0 => 0.0,
            e => self.total_spikes() as f64 / e as f64,
        }
    }

    /// Unweighted mean of the per-layer rates.
    pub fn unweighted_mean_rate(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.rate()).sum::<f64>() / self.layers.len() as f64
    }
}

/// `(energy_rate, saving_factor)` with `energy_rate = ac_mac × mean_rate × T`.
///
/// Expects `mean_rate ∈ [0, 1]`, `timesteps ≥ 1` and `ac_mac > 0`. A zero
/// rate gives an infinite saving factor.
pub fn energy_ratio(mean_rate: f64, timesteps: usize, ac_mac: f64) -> (f64, f64) {
    let energy_rate = ac_mac * mean_rate * timesteps as f64;
    (energy_rate, 1.0 / energy_rate)
}

/// Where a synaptic layer takes its input from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SynapseSource {
    /// Real-valued input; charged as multiply-accumulates in both networks.
    Dense,
    /// Binary spikes of the named layer; charged as accumulates per spike.
    Spikes(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SynapseKind {
    Conv { geom: Conv1dGeometry, in_len: usize },
    Linear { in_features: usize, out_features: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynapseLayer {
    pub name: String,
    pub source: SynapseSource,
    pub kind: SynapseKind,
}

impl SynapseLayer {
    /// Dense multiply-accumulates for one sample (padding taps excluded).
    pub fn dense_macs(&self) -> Result<u64> {
        Ok(match &self.kind {
            SynapseKind::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
            SynapseKind::Conv { geom, in_len } => {
                let out_len = geom.out_len(*in_len)?;
                let taps: usize = (0..geom.kernel)
                    .map(|j| {
                        let (lo, hi, _) = geom.tap_range(j, *in_len, out_len);
                        hi - lo
                    })
                    .sum();
                (geom.out_channels * geom.in_channels * taps) as u64
            }
        })
    }

    /// Number of synaptic targets reached by one input element at each position.
    pub fn fanout(&self) -> Result<Vec<u64>> {
        Ok(match &self.kind {
            SynapseKind::Linear { out_features, .. } => vec![*out_features as u64],
            SynapseKind::Conv { geom, in_len } => {
                let out_len = geom.out_len(*in_len)?;
                let mut fan = vec![0u64; *in_len];
                for j in 0..geom.kernel {
                    let (lo, hi, off) = geom.tap_range(j, *in_len, out_len);
                    for o in lo..hi {
                        fan[((o * geom.stride) as isize + off) as usize] += geom.out_channels as u64;
                    }
                }
                fan
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Accumulates triggered by input spikes, over all time steps.
    pub snn_ac_ops: u64,
    /// Multiply-accumulates of layers fed by real-valued input.
    pub snn_mac_ops: u64,
    /// Dense multiply-accumulates of the equally shaped ANN (one pass).
    pub ann_mac_ops: u64,
}

/// Operation counts of one recorded forward pass over `batch` samples.
pub fn count_layer_ops(layers: &[SynapseLayer], batch: usize, record: &SpikeRecord) -> Result<OpCounts> {
    let mut counts = OpCounts::default();
    for layer in layers {
        let dense = layer.dense_macs()? * batch as u64;
        counts.ann_mac_ops += dense;
        match &layer.source {
            SynapseSource::Dense => counts.snn_mac_ops += dense,
            SynapseSource::Spikes(src) => {
                let rec = record.layer(src).ok_or_else(|| {
                    Error::Contract(format!("record has no spike layer `{src}` feeding `{}`", layer.name))
                })?;
                let expected_elements = (rec.channels * rec.length * batch) as u64;
                if rec.step_elements.iter().any(|&e| e != expected_elements) {
                    return Err(Error::Contract(format!(
                        "spike layer `{src}` was recorded for a different batch size than {batch}"
                    )));
                }
                let fan = layer.fanout()?;
                let flat: Vec<u64>;
                let positions = match layer.kind {
                    SynapseKind::Conv { .. } => &rec.position_counts,
                    SynapseKind::Linear { .. } => {
                        flat = vec![rec.spikes()];
                        &flat
                    }
                };
                if positions.len() != fan.len() {
                    return Err(Error::Contract(format!(
                        "spike layer `{src}` has length {}, `{}` expects {}",
                        positions.len(),
                        layer.name,
                        fan.len()
                    )));
                }
                counts.snn_ac_ops += positions.iter().zip(&fan).map(|(c, f)| c * f).sum::<u64>();
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRate {
    pub name: String,
    pub elements: u64,
    pub spikes: u64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerRate>,
    pub samples: usize,
    /// Element-weighted network rate.
    pub mean_rate: f64,
    pub unweighted_mean_rate: f64,
    pub timesteps: usize,
    pub ac_mac_ratio: f64,
    pub energy_rate: f64,
    pub saving_factor: f64,
    pub ops: Option<OpCounts>,
}

impl EnergyReport {
    pub fn from_rate(mean_rate: f64, timesteps: usize, ac_mac_ratio: f64) -> Self {
        let (energy_rate, saving_factor) = energy_ratio(mean_rate, timesteps, ac_mac_ratio);
        Self {
            layers: Vec::new(),
            samples: 0,
            mean_rate,
            unweighted_mean_rate: mean_rate,
            timesteps,
            ac_mac_ratio,
            energy_rate,
            saving_factor,
            ops: None,
        }
    }

    pub fn from_record(record: &SpikeRecord, samples: usize, ac_mac_ratio: f64, ops: Option<OpCounts>) -> Self {
        let mut report = Self::from_rate(record.mean_rate(), record.timesteps, ac_mac_ratio);
        report.unweighted_mean_rate = record.unweighted_mean_rate();
        report.samples = samples;
        report.ops = ops;
        report.layers = record
            .layers()
            .iter()
            .map(|l| LayerRate {
                name: l.name.clone(),
                elements: l.elements(),
                spikes: l.spikes(),
                rate: l.rate(),
            })
            .collect();
        report
    }

    /// Line-delimited `key=value` summary followed by a whitespace table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples={}", self.samples);
        let _ = writeln!(out, "timesteps={}", self.timesteps);
        let _ = writeln!(out, "ac_mac_ratio={}", self.ac_mac_ratio);
        let _ = writeln!(out, "mean_rate={}", self.mean_rate);
        let _ = writeln!(out, "unweighted_mean_rate={}", self.unweighted_mean_rate);
        let _ = writeln!(out, "energy_rate={}", self.energy_rate);
        let _ = writeln!(out, "saving_factor={}", self.saving_factor);
        if let Some(ops) = self.ops {
            let _ = writeln!(out, "snn_ac_ops={}", ops.snn_ac_ops);
            let _ = writeln!(out, "snn_mac_ops={}", ops.snn_mac_ops);
            let _ = writeln!(out, "ann_mac_ops={}", ops.ann_mac_ops);
        }
        let _ = writeln!(out, "# layer elements spikes rate");
        for l in &self.layers {
            let _ = writeln!(out, "{} {} {} {}", l.name, l.elements, l.spikes, l.rate);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spikes(n: usize, ones: usize) -> Tensor<f32> {
        Tensor::new(&[1, n], (0..n).map(|i| (i < ones) as u8 as f32).collect()).unwrap()
    }

    #[test]
    fn rates_of_simple_records() {
        let mut r = SpikeRecord::new(1);
        r.record_spikes("zero", &spikes(100, 0), 1).unwrap();
        r.record_spikes("one", &spikes(100, 100), 1).unwrap();
        r.record_spikes("some", &spikes(1000, 83), 1).unwrap();
        assert_eq!(r.layer("zero").unwrap().rate(), 0.0);
        assert_eq!(r.layer("one").unwrap().rate(), 1.0);
        assert!((r.layer("some").unwrap().rate() - 0.083).abs() < 1e-15);
    }

    #[test]
    fn non_binary_rejected() {
        let mut r = SpikeRecord::new(1);
        let t = Tensor::new(&[1, 2], vec![0.0f32, 0.5]).unwrap();
        assert!(matches!(r.record_spikes("x", &t, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn published_operating_point() {
        let (e, s) = energy_ratio(0.083, 8, DEFAULT_AC_MAC_RATIO);
        assert!((e - 0.083 * 8.0 / 7.0).abs() < 1e-12);
        assert!((e - 0.09486).abs() < 1e-5);
        assert!(s > 10.0);
        assert_eq!(energy_ratio(0.0, 8, DEFAULT_AC_MAC_RATIO).0, 0.0);
        assert!((energy_ratio(1.0, 7, DEFAULT_AC_MAC_RATIO).0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_conv_macs() {
        let geom = Conv1dGeometry { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, dilation: 1, padding: 0 };
        let layer = SynapseLayer {
            name: "c".into(),
            source: SynapseSource::Spikes("s".into()),
            kind: SynapseKind::Conv { geom, in_len: 12 },
        };
        assert_eq!(geom.out_len(12).unwrap(), 10);
        assert_eq!(layer.dense_macs().unwrap(), 30);
        let mut r = SpikeRecord::new(2);
        r.record_spikes("s", &Tensor::<f32>::zeros(&[2, 1, 12]), 2).unwrap();
        let c = count_layer_ops(&[layer.clone()], 1, &r).unwrap();
        assert_eq!(c.snn_ac_ops, 0);
        assert_eq!(c.ann_mac_ops, 30);
        let missing = SpikeRecord::new(2);
        assert!(count_layer_ops(&[layer], 1, &missing).is_err());
    }

    #[test]
    fn report_is_recomputable() {
        let mut r = SpikeRecord::new(4);
        r.record_spikes("a", &Tensor::new(&[4, 3], (0..12).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap(), 4).unwrap();
        r.record_spikes("b", &Tensor::new(&[4, 5], (0..20).map(|i| (i % 7 == 0) as u8 as f32).collect()).unwrap(), 4).unwrap();
        let rep = EnergyReport::from_record(&r, 1, DEFAULT_AC_MAC_RATIO, None);
        assert_eq!(rep.energy_rate, rep.ac_mac_ratio * rep.mean_rate * rep.timesteps as f64);
        let weighted: f64 = rep.layers.iter().map(|l| l.rate * l.elements as f64).sum::<f64>()
            / rep.layers.iter().map(|l| l.elements as f64).sum::<f64>();
        assert!((weighted - rep.mean_rate).abs() < 1e-15);
        let text = rep.render();
        assert!(text.contains(&format!("energy_rate={}", rep.energy_rate)));
    }

    proptest! {
        #[test]
        fn merge_is_order_independent(
            a in prop::collection::vec(any::<bool>(), 12),
            b in prop::collection::vec(any::<bool>(), 12),
            c in prop::collection::vec(any::<bool>(), 12),
        ) {
            let rec = |bits: &[bool]| {
                let mut r = SpikeRecord::new(2);
                let t = Tensor::new(&[2, 2, 3], bits.iter().map(|&x| x as u8 as f32).collect()).unwrap();
                r.record_spikes("l", &t, 2).unwrap();
                r
            };
            let (ra, rb, rc) = (rec(&a), rec(&b), rec(&c));
            let mut left = ra.clone();
            left.merge(&rb).unwrap();
            left.merge(&rc).unwrap();
            let mut right = rc.clone();
            let mut bc = rb.clone();
            bc.merge(&ra).unwrap();
            right.merge(&bc).unwrap();
            prop_assert_eq!(left, right);
        }
    }
}
