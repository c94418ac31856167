//! Resolution of built-in defaults, the configuration file and flags.

use std::path::PathBuf;

use snn_kws::config::KvConfig;
use snn_kws::data::{load_dataset, tone_task, LabelMode, Utterance};
use snn_kws::training::{Split, TrainConfig};
use snn_kws::{make_variant, Error, ModelConfig, Variant};

use crate::{CliResult, CommonArgs, Failure};

/// Keys read by the command line itself rather than the model or trainer.
const CLI_KEYS: [&str; 3] = ["data_root", "mode", "ac_mac_ratio"];

pub const SYNTHETIC_TRAIN: usize = 200;
pub const SYNTHETIC_HELD_OUT: usize = 40;

#[derive(Clone, Debug)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mode: LabelMode,
    pub data_root: Option<PathBuf>,
    pub synthetic: bool,
    pub ac_mac_ratio: Option<f64>,
}

impl Settings {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv.set("mode", self.mode);
        if let Some(root) = &self.data_root {
            kv.set("data_root", root.display());
        }
        kv
    }
}

fn flag_overlay(args: &CommonArgs) -> KvConfig {
    let mut kv = KvConfig::new();
    if let Some(v) = &args.data_root {
        kv.set("data_root", v.display());
    }
    if let Some(v) = &args.mode {
        kv.set("mode", v);
    }
    if let Some(v) = &args.variant {
        kv.set("variant", v);
    }
    if let Some(v) = args.seed {
        kv.set("seed", v);
    }
    if let Some(v) = args.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = args.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = args.lr {
        kv.set("lr", v);
    }
    if let Some(v) = args.timesteps {
        kv.set("timesteps", v);
    }
    kv
}

fn check_keys(kv: &KvConfig) -> CliResult<()> {
    let model_keys = ModelConfig::default().to_kv();
    let train_keys = TrainConfig::default().to_kv();
    for key in kv.keys() {
        let known = CLI_KEYS.contains(&key) || model_keys.get(key).is_some() || train_keys.get(key).is_some();
        if !known {
            return Err(Failure::config(Error::Config(format!("unknown configuration key `{key}`"))));
        }
    }
    Ok(())
}

/// Defaults, overridden by the `--config` file, overridden by flags.
pub fn resolve(args: &CommonArgs) -> CliResult<Settings> {
    let mut kv = match &args.config {
        Some(path) => KvConfig::load(path).map_err(Failure::config)?,
        None => KvConfig::new(),
    };
    kv.merge(&flag_overlay(args));
    check_keys(&kv)?;
    let mode: LabelMode = kv.get("mode").unwrap_or("v1-12").parse().map_err(Failure::config)?;

    let (mut model, mut train) = if args.synthetic {
        let train = TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        (ModelConfig::synthetic(), train)
    } else {
        let model = ModelConfig {
            num_classes: mode.num_classes(),
            ..ModelConfig::default()
        };
        (model, TrainConfig::default())
    };
    model.apply_kv(&kv).map_err(Failure::config)?;
    train.apply_kv(&kv).map_err(Failure::config)?;
    let both_branches = model.glsc.iter().all(|g| g.local_kernel.is_some() && g.global_kernel.is_some());
    if model.variant != Variant::SnnKws && both_branches {
        let full = ModelConfig {
            variant: Variant::SnnKws,
            ..model.clone()
        };
        model = make_variant(&full, model.variant).map_err(Failure::config)?;
    }
    model.validate().map_err(Failure::config)?;
    train.validate().map_err(Failure::config)?;
    let ac_mac_ratio = kv.get_parsed("ac_mac_ratio").map_err(Failure::config)?;
    Ok(Settings {
        model,
        train,
        mode,
        data_root: kv.get("data_root").map(PathBuf::from),
        synthetic: args.synthetic,
        ac_mac_ratio,
    })
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub num_classes: usize,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Loads the dataset named by the settings. Every failure here is a data error.
pub fn load_splits(s: &Settings) -> CliResult<Splits> {
    if s.synthetic {
        let seed = s.train.seed;
        return Ok(Splits {
            train: tone_task(SYNTHETIC_TRAIN, seed),
            validation: tone_task(SYNTHETIC_HELD_OUT, seed.wrapping_add(1)),
            test: tone_task(SYNTHETIC_HELD_OUT, seed.wrapping_add(2)),
            num_classes: 2,
        });
    }
    let root = s
        .data_root
        .as_ref()
        .ok_or_else(|| Failure::data(Error::Config("--data-root is required unless --synthetic is given".into())))?;
    let ds = load_dataset(root, s.mode, s.train.seed).map_err(Failure::data)?;
    Ok(Splits {
        num_classes: ds.labels.num_classes(),
        train: ds.train,
        validation: ds.validation,
        test: ds.test,
    })
}
