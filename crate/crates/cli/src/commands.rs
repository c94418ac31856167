use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use snn_kws::config::join_list;
use snn_kws::energy::{EnergyReport, OpCounts, SpikeRecord, DEFAULT_AC_MAC_RATIO};
use snn_kws::gradcheck::{run_gradcheck, GradcheckOptions};
use snn_kws::layers::Mode;
use snn_kws::tensor::OpKind;
use snn_kws::training::{evaluate, fit, make_batch, EpochLog, Split};
use snn_kws::{Error, Model};

use crate::settings::{load_splits, resolve, Settings, Splits};
use crate::{CliResult, CommonArgs, Failure};

pub const DEFAULT_RUN_DIR: &str = "snn-kws-run";
pub const METRICS_LOG: &str = "metrics.log";
pub const CONFIG_FILE: &str = "config.txt";
pub const BEST_CHECKPOINT: &str = "best.skws";
pub const LAST_CHECKPOINT: &str = "last.skws";

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::config(Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text).map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Model> {
    Model::load(path).map_err(Failure::config)
}

fn require_checkpoint(args: &CommonArgs) -> CliResult<&Path> {
    args.checkpoint
        .as_deref()
        .ok_or_else(|| Failure::config(Error::Config("--checkpoint is required".into())))
}

/// The checkpoint must produce the class count of the selected label protocol.
fn check_classes(model: &Model, s: &Settings) -> CliResult<()> {
    let expected = if s.synthetic { 2 } else { s.mode.num_classes() };
    if model.config.num_classes != expected {
        let what = if s.synthetic { "the synthetic task".to_string() } else { format!("mode {}", s.mode) };
        return Err(Failure::config(Error::Config(format!(
            "checkpoint has {} classes but {what} has {expected}",
            model.config.num_classes
        ))));
    }
    Ok(())
}

fn parse_split(args: &CommonArgs) -> CliResult<Split> {
    args.split.as_deref().unwrap_or("test").parse().map_err(Failure::config)
}

struct MetricsLog {
    path: PathBuf,
    file: fs::File,
}

impl MetricsLog {
    fn create(path: PathBuf) -> CliResult<Self> {
        let file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
        Ok(Self { path, file })
    }

    fn write(&mut self, line: &EpochLog) -> CliResult<()> {
        println!("{line}");
        writeln!(self.file, "{line}").map_err(|e| io_failure(&self.path, e))
    }
}

pub fn train(args: &CommonArgs) -> CliResult<()> {
    let s = resolve(args)?;
    let data = load_splits(&s)?;
    if data.num_classes != s.model.num_classes {
        return Err(Failure::config(Error::Config(format!(
            "num_classes = {} but the dataset has {} classes",
            s.model.num_classes, data.num_classes
        ))));
    }
    let mut model = match &args.checkpoint {
        Some(path) => {
            let m = load_checkpoint(path)?;
            check_classes(&m, &s)?;
            m
        }
        None => Model::build(&s.model).map_err(Failure::config)?,
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, s.to_kv().to_text()).map_err(|e| io_failure(&config_path, e))?;
    let mut log = MetricsLog::create(out.join(METRICS_LOG))?;
    let save = |m: &Model, name: &str| m.save(&out.join(name)).map_err(Failure::config);

    if s.train.epochs == 0 {
        save(&model, "checkpoint-epoch0.skws")?;
        save(&model, BEST_CHECKPOINT)?;
        save(&model, LAST_CHECKPOINT)?;
        let (split, items) = if data.validation.is_empty() {
            (Split::Train, &data.train)
        } else {
            (Split::Validation, &data.validation)
        };
        let m = evaluate(&model, &items[..], s.train.batch_size)?;
        return log.write(&EpochLog {
            epoch: 0,
            split,
            loss: m.loss,
            accuracy: m.accuracy,
        });
    }

    let every = s.train.checkpoint_every;
    let mut log_error = None;
    let report = fit(&mut model, &data.train[..], Some(&data.validation[..]), &s.train, |line, m| {
        if let Err(f) = log.write(line) {
            log_error = Some(f);
            return Err(Error::State("metrics log is not writable".into()));
        }
        if every > 0 && line.split == Split::Train && line.epoch % every == 0 {
            m.save(&out.join(format!("checkpoint-epoch{}.skws", line.epoch)))?;
        }
        Ok(())
    });
    let report = match (report, log_error) {
        (_, Some(f)) => return Err(f),
        (r, None) => r?,
    };
    save(&model, LAST_CHECKPOINT)?;
    save(&report.best, BEST_CHECKPOINT)?;
    if !data.test.is_empty() {
        let m = evaluate(&report.best, &data.test[..], s.train.batch_size)?;
        log.write(&EpochLog {
            epoch: report.best_epoch,
            split: Split::Test,
            loss: m.loss,
            accuracy: m.accuracy,
        })?;
    }
    Ok(())
}

fn model_and_data(args: &CommonArgs, s: &Settings) -> CliResult<(Model, Splits)> {
    let model = load_checkpoint(require_checkpoint(args)?)?;
    check_classes(&model, s)?;
    let data = load_splits(s)?;
    Ok((model, data))
}

pub fn eval(args: &CommonArgs) -> CliResult<()> {
    let s = resolve(args)?;
    let split = parse_split(args)?;
    let (model, data) = model_and_data(args, &s)?;
    let m = evaluate(&model, data.get(split), s.train.batch_size)?;
    let text = format!("split={split} {m}\n{}", m.render_confusion());
    emit(args.out.as_deref(), &text)
}

pub fn energy(args: &CommonArgs, n_samples: usize, rate: Option<f64>, ac_mac: Option<f64>) -> CliResult<()> {
    let s = resolve(args)?;
    let ratio = ac_mac.or(s.ac_mac_ratio).unwrap_or(DEFAULT_AC_MAC_RATIO);
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Failure::config(Error::Config(format!("AC/MAC ratio must be positive, got {ratio}"))));
    }
    if let Some(rate) = rate {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Failure::config(Error::Config(format!("rate must lie in [0, 1], got {rate}"))));
        }
        let report = EnergyReport::from_rate(rate, s.model.timesteps, ratio);
        return emit(args.out.as_deref(), &report.render());
    }
    let split = parse_split(args)?;
    let (model, data) = model_and_data(args, &s)?;
    let items = data.get(split);
    let n = n_samples.min(items.len());
    let indices: Vec<usize> = (0..n).collect();
    let mut record = SpikeRecord::new(model.timesteps());
    let mut ops = OpCounts::default();
    for chunk in indices.chunks(s.train.batch_size) {
        let (wave, _) = make_batch::<f32>(items, chunk, model.config.input_len)?;
        let (_, rec) = model.infer(&wave, Mode::Eval)?;
        let c = model.count_ops(wave.shape(), &rec)?;
        ops.snn_ac_ops += c.snn_ac_ops;
        ops.snn_mac_ops += c.snn_mac_ops;
        ops.ann_mac_ops += c.ann_mac_ops;
        record.merge(&rec)?;
    }
    let report = EnergyReport::from_record(&record, n, ratio, Some(ops));
    emit(args.out.as_deref(), &report.render())
}

pub fn gradcheck(seed: u64, fault: Option<&str>, out: Option<&Path>) -> CliResult<()> {
    let fault = fault
        .map(|name| OpKind::parse(name).ok_or_else(|| Failure::config(Error::Config(format!("unknown operation `{name}`")))))
        .transpose()?;
    let opts = GradcheckOptions {
        seed,
        fault,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts)?;
    emit(out, &report.render())?;
    let failures: Vec<String> = report
        .failures()
        .map(|r| format!("{} (max_rel_err={:.3e})", r.name, r.max_rel_err))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::verification(format!(
            "gradient check failed for {}",
            failures.join(", ")
        )))
    }
}

pub fn inspect(args: &CommonArgs) -> CliResult<()> {
    let s = resolve(args)?;
    let model = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => Model::build(&s.model).map_err(Failure::config)?,
    };
    let cfg = &model.config;
    let mut text = String::from("# model\n");
    text.push_str(&cfg.to_kv().to_text());
    if args.checkpoint.is_none() {
        text.push_str("# training\n");
        text.push_str(&s.train.to_kv().to_text());
    }
    text.push_str(&format!("param_count={}\n", model.param_count()));
    text.push_str(&format!("analytic_param_count={}\n", cfg.analytic_param_count()));
    text.push_str(&format!("lengths={}\n", join_list(&cfg.lengths()?)));
    text.push_str("# parameter shape elements trainable\n");
    for id in model.store.ids() {
        let t = model.store.get(id);
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        text.push_str(&format!(
            "{} {} {} {}\n",
            model.store.name(id),
            shape.join("x"),
            t.numel(),
            model.store.is_trainable(id)
        ));
    }
    emit(args.out.as_deref(), &text)
}
