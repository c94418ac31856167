#![allow(dead_code)]

use std::path::PathBuf;

use snn_kws::energy::{SynapseKind, SynapseLayer, SynapseSource};
use snn_kws::{Tape, Var};

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/gsc_tiny")
}

/// Scalar LIF over `steps` inputs of one neuron: returns `(spikes, u')` per step.
pub fn lif_scalar(inputs: &[f32], tau: f32, v_th: f32) -> Vec<(f32, f32)> {
    let mut u = 0f32;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let pre = u * tau + x;
        let s = if pre >= v_th { 1.0 } else { 0.0 };
        u = if s == 1.0 { 0.0 } else { pre };
        out.push((s, u));
    }
    out
}

/// Scalar PLIF with decay `k`.
pub fn plif_scalar(inputs: &[f32], k: f32, v_th: f32) -> Vec<(f32, f32)> {
    let mut u = 0f32;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let pre = u - (u - x) * k;
        let s = if pre >= v_th { 1.0 } else { 0.0 };
        u = if s == 1.0 { 0.0 } else { pre };
        out.push((s, u));
    }
    out
}

/// Counts accumulates by visiting every spike of every layer that feeds a
/// synaptic layer and every output it reaches through the kernel taps.
pub fn event_walk_ac_ops(layers: &[SynapseLayer], spike_outputs: &[(String, Var)], tape: &Tape<f32>) -> u64 {
    let mut total = 0u64;
    for layer in layers {
        let SynapseSource::Spikes(src) = &layer.source else {
            continue;
        };
        let var = spike_outputs
            .iter()
            .find(|(n, _)| n == src)
            .unwrap_or_else(|| panic!("no spike output {src}"))
            .1;
        let spikes = tape.value(var);
        let shape = spikes.shape().to_vec();
        let (rows, channels) = (shape[0], shape[1]);
        let len = shape.get(2).copied().unwrap_or(1);
        for r in 0..rows {
            for c in 0..channels {
                for i in 0..len {
                    if spikes.data()[(r * channels + c) * len + i] == 0.0 {
                        continue;
                    }
                    total += match &layer.kind {
                        SynapseKind::Linear { out_features, .. } => *out_features as u64,
                        SynapseKind::Conv { geom, .. } => {
                            let out_len = (len + 2 * geom.padding - geom.dilation * (geom.kernel - 1) - 1) / geom.stride + 1;
                            let mut reached = 0u64;
                            for o in 0..out_len {
                                for j in 0..geom.kernel {
                                    let pos = (o * geom.stride + j * geom.dilation) as isize - geom.padding as isize;
                                    if pos == i as isize {
                                        reached += geom.out_channels as u64;
                                    }
                                }
                            }
                            reached
                        }
                    };
                }
            }
        }
    }
    total
}
