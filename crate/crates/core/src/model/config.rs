use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, KvConfig};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm1d, GlscLayout, MID_KERNEL};
use crate::neurons::{LifParams, SurrogateKind, SurrogateSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SnnKws,
    GlscOnlyLocal,
    GlscOnlyGlobal,
    GlcAnn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SnnKws, Variant::GlscOnlyLocal, Variant::GlscOnlyGlobal, Variant::GlcAnn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SnnKws => "snn-kws",
            Variant::GlscOnlyLocal => "glsc-only-local",
            Variant::GlscOnlyGlobal => "glsc-only-global",
            Variant::GlcAnn => "glc-ann",
        }
    }

    pub fn is_spiking(self) -> bool {
        self != Variant::GlcAnn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// One global-local block; a `None` kernel drops that branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlscSpec {
    pub channels: usize,
    pub local_kernel: Option<usize>,
    pub global_kernel: Option<usize>,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub hidden: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_len: usize,
    pub timesteps: usize,
    pub v_th: f64,
    pub tau: f64,
    pub surrogate: SurrogateSpec,
    pub variant: Variant,
    pub glsc: Vec<GlscSpec>,
    pub bottlenecks: Vec<BottleneckSpec>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

pub const SAMPLE_RATE: usize = 16_000;

impl Default for ModelConfig {
    /// 12-class network of four GLSC blocks (16/32/48/64 channels) and two
    /// 64→32→64 bottlenecks, about 76K parameters.
    fn default() -> Self {
        let glsc = [(16, 4, 2), (32, 2, 4), (48, 2, 8), (64, 2, 16)]
            .map(|(channels, stride, dilation)| GlscSpec {
                channels,
                local_kernel: Some(5),
                global_kernel: Some(5),
                stride,
                dilation,
            })
            .to_vec();
        Self {
            num_classes: 12,
            input_len: SAMPLE_RATE,
            timesteps: 8,
            v_th: 1.0,
            tau: 0.5,
            surrogate: SurrogateSpec::default(),
            variant: Variant::SnnKws,
            glsc,
            bottlenecks: vec![BottleneckSpec { hidden: 32, channels: 64 }; 2],
            bn_eps: BatchNorm1d::DEFAULT_EPS,
            bn_momentum: BatchNorm1d::DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small two-class network for the synthetic tone task.
    pub fn synthetic() -> Self {
        Self {
            num_classes: 2,
            timesteps: 4,
            glsc: vec![
                GlscSpec { channels: 4, local_kernel: Some(5), global_kernel: Some(5), stride: 8, dilation: 2 },
                GlscSpec { channels: 8, local_kernel: Some(5), global_kernel: Some(5), stride: 4, dilation: 4 },
            ],
            bottlenecks: vec![BottleneckSpec { hidden: 4, channels: 8 }],
            ..Self::default()
        }
    }

    /// One GLSC block and one bottleneck, a single channel everywhere.
    pub fn micro(input_len: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            input_len,
            timesteps: 2,
            glsc: vec![GlscSpec { channels: 1, local_kernel: Some(3), global_kernel: Some(3), stride: 2, dilation: 2 }],
            bottlenecks: vec![BottleneckSpec { hidden: 1, channels: 1 }],
            ..Self::default()
        }
    }

    pub fn n_conv_blocks(&self) -> usize {
        self.glsc.len()
    }

    pub fn n_cla_blocks(&self) -> usize {
        self.bottlenecks.len()
    }

    pub fn lif(&self) -> Result<LifParams> {
        LifParams::new(self.tau, self.v_th)
    }

    pub fn glsc_layout(&self, i: usize) -> GlscLayout {
        let spec = self.glsc[i];
        GlscLayout {
            in_channels: if i == 0 { 1 } else { self.glsc[i - 1].channels },
            out_channels: spec.channels,
            stride: spec.stride,
            local_kernel: spec.local_kernel,
            global_kernel: spec.global_kernel,
            dilation: spec.dilation,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.bottlenecks
            .last()
            .map(|b| b.channels)
            .or_else(|| self.glsc.last().map(|g| g.channels))
            .unwrap_or(0)
    }

    /// Time-axis length after each GLSC block.
    pub fn lengths(&self) -> Result<Vec<usize>> {
        let mut len = self.input_len;
        let mut out = Vec::with_capacity(self.glsc.len());
        for i in 0..self.glsc.len() {
            len = self
                .glsc_layout(i)
                .out_len(len)
                .map_err(|e| Error::Config(format!("glsc{i}: {e}")))?;
            out.push(len);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if self.glsc.is_empty() || self.bottlenecks.is_empty() {
            return Err(Error::Config("need at least one GLSC block and one bottleneck block".into()));
        }
        if self.variant == Variant::GlcAnn && self.timesteps != 1 {
            return Err(Error::Config("the glc-ann variant runs a single time step".into()));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in (0, 1)".into()));
        }
        self.lif()?;
        self.surrogate.validate()?;
        for i in 0..self.glsc.len() {
            if self.glsc[i].channels == 0 {
                return Err(Error::Config(format!("glsc{i}: zero channels")));
            }
            self.glsc_layout(i).validate(&format!("glsc{i}"))?;
        }
        for (j, b) in self.bottlenecks.iter().enumerate() {
            if b.hidden == 0 || b.channels == 0 {
                return Err(Error::Config(format!("cla{j}: zero channels")));
            }
        }
        let lengths = self.lengths()?;
        if lengths.last().copied().unwrap_or(0) == 0 {
            return Err(Error::Config("final time-axis length is zero".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn analytic_param_count(&self) -> usize {
        let mut total = 0;
        for i in 0..self.glsc.len() {
            let l = self.glsc_layout(i);
            for k in [l.local_kernel, l.global_kernel].into_iter().flatten() {
                total += l.out_channels * l.in_channels * k + 2 * l.out_channels;
            }
        }
        let mut c = self.glsc.last().map_or(0, |g| g.channels);
        for b in &self.bottlenecks {
            let (h, o) = (b.hidden, b.channels);
            total += c * h + h * h * MID_KERNEL + h * o + c * o;
            total += 2 * (h + h + o + o);
            if self.variant.is_spiking() {
                total += 3;
            }
            c = o;
        }
        total + c * self.num_classes + self.num_classes
    }

    pub fn to_kv(&self) -> KvConfig {
        let kernels = |f: fn(&GlscSpec) -> Option<usize>| {
            self.glsc
                .iter()
                .map(|g| f(g).map_or("-".to_string(), |k| k.to_string()))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = KvConfig::new();
        kv.set("num_classes", self.num_classes);
        kv.set("input_len", self.input_len);
        kv.set("timesteps", self.timesteps);
        kv.set("v_th", self.v_th);
        kv.set("tau", self.tau);
        kv.set("surrogate", surrogate_name(self.surrogate.kind));
        kv.set("surrogate_width", self.surrogate.width);
        kv.set("variant", self.variant);
        kv.set("n_conv_blocks", self.glsc.len());
        kv.set("glsc_channels", join_list(&self.glsc.iter().map(|g| g.channels).collect::<Vec<_>>()));
        kv.set("glsc_local_kernels", kernels(|g| g.local_kernel));
        kv.set("glsc_global_kernels", kernels(|g| g.global_kernel));
        kv.set("glsc_strides", join_list(&self.glsc.iter().map(|g| g.stride).collect::<Vec<_>>()));
        kv.set("glsc_dilations", join_list(&self.glsc.iter().map(|g| g.dilation).collect::<Vec<_>>()));
        kv.set("n_cla_blocks", self.bottlenecks.len());
        kv.set("cla_hidden", join_list(&self.bottlenecks.iter().map(|b| b.hidden).collect::<Vec<_>>()));
        kv.set("cla_channels", join_list(&self.bottlenecks.iter().map(|b| b.channels).collect::<Vec<_>>()));
        kv.set("bn_eps", self.bn_eps);
        kv.set("bn_momentum", self.bn_momentum);
        kv.set("seed", self.seed);
        kv
    }

    /// Overrides fields present in `kv`; unknown keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        macro_rules! scalar {
            ($field:ident) => {
                if let Some(v) = kv.get_parsed(stringify!($field))? {
                    self.$field = v;
                }
            };
        }
        scalar!(num_classes);
        scalar!(input_len);
        scalar!(timesteps);
        scalar!(v_th);
        scalar!(tau);
        scalar!(bn_eps);
        scalar!(bn_momentum);
        scalar!(seed);
        if let Some(v) = kv.get("variant") {
            self.variant = v.parse()?;
        }
        if let Some(v) = kv.get("surrogate") {
            self.surrogate.kind = match v {
                "rectangular" => SurrogateKind::Rectangular,
                "sigmoid" => SurrogateKind::SigmoidDerivative,
                other => return Err(Error::Config(format!("unknown surrogate `{other}`"))),
            };
        }
        if let Some(w) = kv.get_parsed("surrogate_width")? {
            self.surrogate.width = w;
        }

        let n = kv.get_parsed::<usize>("n_conv_blocks")?;
        let channels = kv.get_list::<usize>("glsc_channels")?;
        let local = optional_list(kv, "glsc_local_kernels")?;
        let global = optional_list(kv, "glsc_global_kernels")?;
        let strides = kv.get_list::<usize>("glsc_strides")?;
        let dilations = kv.get_list::<usize>("glsc_dilations")?;
        let count = [n, channels.as_ref().map(Vec::len), local.as_ref().map(Vec::len), global.as_ref().map(Vec::len), strides.as_ref().map(Vec::len), dilations.as_ref().map(Vec::len)];
        if let Some(len) = common_len(&count, "glsc")? {
            let base = self.glsc.clone();
            self.glsc = (0..len)
                .map(|i| {
                    let fallback = base.get(i).or(base.last()).copied();
                    let pick = |list: &Option<Vec<usize>>, f: fn(&GlscSpec) -> usize| {
                        list.as_ref().map(|l| l[i]).or(fallback.as_ref().map(f))
                    };
                    let pick_opt = |list: &Option<Vec<Option<usize>>>, f: fn(&GlscSpec) -> Option<usize>| {
                        match list {
                            Some(l) => l[i],
                            None => fallback.as_ref().and_then(f),
                        }
                    };
                    Ok(GlscSpec {
                        channels: pick(&channels, |g| g.channels).ok_or_else(|| missing("glsc_channels"))?,
                        local_kernel: pick_opt(&local, |g| g.local_kernel),
                        global_kernel: pick_opt(&global, |g| g.global_kernel),
                        stride: pick(&strides, |g| g.stride).ok_or_else(|| missing("glsc_strides"))?,
                        dilation: pick(&dilations, |g| g.dilation).ok_or_else(|| missing("glsc_dilations"))?,
                    })
                })
                .collect::<Result<_>>()?;
        }

        let n = kv.get_parsed::<usize>("n_cla_blocks")?;
        let hidden = kv.get_list::<usize>("cla_hidden")?;
        let chans = kv.get_list::<usize>("cla_channels")?;
        if let Some(len) = common_len(&[n, hidden.as_ref().map(Vec::len), chans.as_ref().map(Vec::len)], "cla")? {
            let base = self.bottlenecks.clone();
            self.bottlenecks = (0..len)
                .map(|j| {
                    let fallback = base.get(j).or(base.last()).copied();
                    Ok(BottleneckSpec {
                        hidden: hidden.as_ref().map(|l| l[j]).or(fallback.map(|b| b.hidden)).ok_or_else(|| missing("cla_hidden"))?,
                        channels: chans.as_ref().map(|l| l[j]).or(fallback.map(|b| b.channels)).ok_or_else(|| missing("cla_channels"))?,
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn surrogate_name(kind: SurrogateKind) -> &'static str {
    match kind {
        SurrogateKind::Rectangular => "rectangular",
        SurrogateKind::SigmoidDerivative => "sigmoid",
    }
}

fn missing(key: &str) -> Error {
    Error::Config(format!("`{key}` is required"))
}

fn optional_list(kv: &KvConfig, key: &str) -> Result<Option<Vec<Option<usize>>>> {
    kv.get(key)
        .map(|v| {
            v.split(',')
                .map(|item| match item.trim() {
                    "-" => Ok(None),
                    s => s
                        .parse()
                        .map(Some)
                        .map_err(|_| Error::Config(format!("`{key}`: cannot parse list item `{s}`"))),
                })
                .collect()
        })
        .transpose()
}

fn common_len(lens: &[Option<usize>], group: &str) -> Result<Option<usize>> {
    let mut found: Option<usize> = None;
    for &l in lens.iter().flatten() {
        match found {
            Some(f) if f != l => {
                return Err(Error::Config(format!("{group}: block lists disagree on block count ({f} vs {l})")));
            }
            _ => found = Some(l),
        }
    }
    Ok(found)
}

/// Derives an ablation configuration from a full `snn-kws` configuration.
///
/// Single-branch variants widen the remaining kernel per block so that the
/// total parameter count stays within 5% of the full model.
pub fn make_variant(cfg: &ModelConfig, variant: Variant) -> Result<ModelConfig> {
    let mut out = cfg.clone();
    out.variant = variant;
    match variant {
        Variant::SnnKws => {}
        Variant::GlcAnn => out.timesteps = 1,
        Variant::GlscOnlyLocal | Variant::GlscOnlyGlobal => {
            let mut drift: i64 = 0;
            for i in 0..out.glsc.len() {
                let l = cfg.glsc_layout(i);
                let fan = (l.out_channels * l.in_channels) as i64;
                let budget: i64 = [l.local_kernel, l.global_kernel]
                    .into_iter()
                    .flatten()
                    .map(|k| fan * k as i64 + 2 * l.out_channels as i64)
                    .sum();
                let max_k = l.local_kernel.unwrap_or(0) + l.global_kernel.unwrap_or(0) + 1;
                let k = (1..=max_k.max(1))
                    .step_by(2)
                    .min_by_key(|&k| (drift + fan * k as i64 + 2 * l.out_channels as i64 - budget).abs())
                    .unwrap_or(1);
                drift += fan * k as i64 + 2 * l.out_channels as i64 - budget;
                let spec = &mut out.glsc[i];
                if variant == Variant::GlscOnlyLocal {
                    spec.local_kernel = Some(k);
                    spec.global_kernel = None;
                } else {
                    spec.local_kernel = None;
                    spec.global_kernel = Some(k);
                }
            }
        }
    }
    out.validate()?;
    let (full, derived) = (cfg.analytic_param_count() as f64, out.analytic_param_count() as f64);
    if (derived - full).abs() > 0.05 * full {
        return Err(Error::Config(format!(
            "variant {variant}: {derived} parameters, not within 5% of {full}"
        )));
    }
    Ok(out)
}
