//! One line per acceptance criterion: `criterion=N name=... status=PASS|FAIL|SKIP detail`.

mod common;

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snn_kws::data::{balanced_subset, load_dataset, tone_task, LabelMode, Utterance};
use snn_kws::energy::{energy_ratio, DEFAULT_AC_MAC_RATIO};
use snn_kws::gradcheck::{run_gradcheck, GradcheckOptions};
use snn_kws::layers::Mode;
use snn_kws::neurons::{lif_sequence, lif_step, plif_sequence, plif_step, LifParams, NeuronState, PlifParams, SurrogateSpec};
use snn_kws::training::{evaluate, train_epoch, Optimizer, TrainConfig};
use snn_kws::{build_model, make_variant, Model, ModelConfig, Tape, Tensor, Variant};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn timed(limit: Duration, start: Instant, outcome: Outcome) -> Outcome {
    let elapsed = start.elapsed();
    match outcome {
        Outcome::Pass(d) if elapsed >= limit => Outcome::Fail(format!("{d} elapsed={elapsed:.2?} over {limit:?}")),
        Outcome::Pass(d) => Outcome::Pass(format!("{d} elapsed={elapsed:.2?}")),
        other => other,
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, steps: usize, n: usize) -> Vec<Vec<f32>> {
    (0..steps).map(|_| (0..n).map(|_| rng.gen_range(-0.5f32..1.5)).collect()).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (steps, n) = (32, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = random_inputs(&mut rng, steps, n);
    let per_neuron = |i: usize| inputs.iter().map(|x| x[i]).collect::<Vec<f32>>();
    let lif = LifParams::new(0.5, 1.0).unwrap();
    let a = 0.3;
    let plif = PlifParams { a, v_th: 1.0 };
    let k: f32 = plif.k();
    let lif_oracle: Vec<_> = (0..n).map(|i| common::lif_scalar(&per_neuron(i), 0.5, 1.0)).collect();
    let plif_oracle: Vec<_> = (0..n).map(|i| common::plif_scalar(&per_neuron(i), k, 1.0)).collect();

    let mut mismatches = 0;
    let mut reset_violations = 0;
    let mut spikes_seen = 0;
    let (mut ls, mut ps) = (NeuronState::<f32>::zeros(&[n]), NeuronState::<f32>::zeros(&[n]));
    for (t, x) in inputs.iter().enumerate() {
        let x = Tensor::new(&[n], x.clone()).unwrap();
        let (s, next) = lif_step(&ls, &x, &lif).unwrap();
        let (q, pnext) = plif_step(&ps, &x, &plif).unwrap();
        for i in 0..n {
            mismatches += usize::from((s.data()[i], next.u.data()[i]) != lif_oracle[i][t]);
            mismatches += usize::from((q.data()[i], pnext.u.data()[i]) != plif_oracle[i][t]);
            reset_violations += usize::from(s.data()[i] * next.u.data()[i] != 0.0);
            reset_violations += usize::from(q.data()[i] * pnext.u.data()[i] != 0.0);
            spikes_seen += (s.data()[i] + q.data()[i]) as usize;
        }
        ls = next;
        ps = pnext;
    }

    // Time-folded sequences on the tape.
    let folded = Tensor::new(&[steps, n], inputs.concat()).unwrap();
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(folded, false);
    let lseq = lif_sequence(&mut tape, xv, steps, &lif, SurrogateSpec::default()).unwrap();
    let av = tape.leaf(Tensor::new(&[1], vec![a as f32]).unwrap(), false);
    let pseq = plif_sequence(&mut tape, xv, steps, av, 1.0, SurrogateSpec::default()).unwrap();
    for t in 0..steps {
        for i in 0..n {
            mismatches += usize::from(tape.value(lseq).data()[t * n + i] != lif_oracle[i][t].0);
            mismatches += usize::from(tape.value(pseq).data()[t * n + i] != plif_oracle[i][t].0);
        }
    }
    timed(
        Duration::from_secs(1),
        start,
        check(
            mismatches == 0 && reset_violations == 0 && spikes_seen > 0,
            format!("steps={steps} neurons={n} mismatches={mismatches} reset_violations={reset_violations} spikes={spikes_seen}"),
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let opts = GradcheckOptions::default();
    let report = run_gradcheck(&opts).unwrap();
    let worst = report.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let has_model = report.results.iter().any(|r| r.name.starts_with("model/"));
    let detail = format!("checks={} worst_rel_err={worst:.3e} eps={}", report.results.len(), opts.eps);
    let outcome = check(report.passed() && has_model && worst < 1e-4, detail);
    let outcome = match outcome {
        Outcome::Fail(d) => Outcome::Fail(format!("{d}\n{}", report.render())),
        other => other,
    };
    timed(Duration::from_secs(60), start, outcome)
}

fn criterion_3() -> Outcome {
    let (energy_rate, saving) = energy_ratio(0.083, 8, DEFAULT_AC_MAC_RATIO);
    check(
        (energy_rate - 0.083 * 8.0 / 7.0).abs() <= 1e-6 && (energy_rate - 0.09486).abs() <= 1e-5 && saving > 10.0,
        format!("energy_rate={energy_rate:.6} saving_factor={saving:.3}"),
    )
}

fn criterion_4() -> Outcome {
    let full = build_model(&ModelConfig::default()).unwrap();
    let analytic = ModelConfig::default().analytic_param_count();
    let mut micro_ok = true;
    for classes in [2, 3, 12] {
        let m = build_model(&ModelConfig::micro(64, classes)).unwrap();
        // local + global conv (3 taps each) with their BN pairs: 2 × (3 + 2)
        // reduce 1, mid 3, expand 1, skip 1, four BN pairs 8, three PLIF decays 3
        // readout weight and bias: 2 × classes
        let hand = 10 + 17 + 2 * classes;
        micro_ok &= m.param_count() == hand && ModelConfig::micro(64, classes).analytic_param_count() == hand;
    }
    check(
        full.param_count() < 100_000 && full.param_count() == analytic && micro_ok,
        format!("default_params={} analytic={analytic} micro_closed_form={micro_ok}", full.param_count()),
    )
}

fn disjoint(splits: [&[Utterance]; 3]) -> bool {
    let mut seen = HashSet::new();
    splits.iter().flat_map(|s| s.iter()).all(|u| seen.insert(u.source_path.clone()))
}

fn criterion_5() -> Vec<(String, Outcome)> {
    let ds = load_dataset(&common::fixture_root(), LabelMode::V1Twelve, 0).unwrap();
    let paths = |s: &[Utterance]| s.iter().map(|u| (u.source_path.clone(), u.label)).collect::<Vec<_>>();
    let unknown = 11;
    let expected_train = vec![
        ("bed/s0_nohash_0.wav".to_string(), unknown),
        ("bed/s1_nohash_0.wav".to_string(), unknown),
        ("no/s0_nohash_0.wav".to_string(), 1),
        ("no/s1_nohash_0.wav".to_string(), 1),
        ("yes/s0_nohash_0.wav".to_string(), 0),
        ("yes/s1_nohash_0.wav".to_string(), 0),
    ];
    let expected_val = vec![
        ("bed/s2_nohash_0.wav".to_string(), unknown),
        ("no/s2_nohash_0.wav".to_string(), 1),
        ("yes/s2_nohash_0.wav".to_string(), 0),
    ];
    let expected_test = vec![
        ("bed/s3_nohash_0.wav".to_string(), unknown),
        ("no/s3_nohash_0.wav".to_string(), 1),
        ("yes/s3_nohash_0.wav".to_string(), 0),
    ];
    let train = paths(&ds.train);
    let silence: Vec<_> = train[6..].iter().filter(|(p, l)| p.starts_with("_background_noise_/") && *l == 10).collect();
    let fixture_ok = train[..6] == expected_train[..]
        && train.len() == 7
        && silence.len() == 1
        && paths(&ds.validation) == expected_val
        && paths(&ds.test) == expected_test
        && ds.silence_counts == [1, 0, 0]
        && disjoint([&ds.train, &ds.validation, &ds.test]);
    let mut out = vec![(
        "fixture".to_string(),
        check(fixture_ok, format!("keyword_files={:?} silence={:?}", ds.keyword_counts, ds.silence_counts)),
    )];

    let real = match std::env::var_os("GSC_V1_ROOT") {
        None => Outcome::Skip("GSC_V1_ROOT not set".into()),
        Some(root) => {
            let start = Instant::now();
            match load_dataset(&PathBuf::from(root), LabelMode::V1Twelve, 0) {
                Err(e) => Outcome::Fail(e.to_string()),
                Ok(ds) => {
                    let fractions: Vec<f64> = (0..3)
                        .map(|i| ds.silence_counts[i] as f64 / (ds.keyword_counts[i] + ds.silence_counts[i]) as f64)
                        .collect();
                    let ok = ds.keyword_counts == [56588, 7743, 7835]
                        && fractions.iter().all(|f| (0.09..=0.11).contains(f))
                        && disjoint([&ds.train, &ds.validation, &ds.test]);
                    timed(
                        Duration::from_secs(120),
                        start,
                        check(ok, format!("keyword_files={:?} silence_fraction={fractions:.4?}", ds.keyword_counts)),
                    )
                }
            }
        }
    };
    out.push(("gsc-v1".to_string(), real));
    out
}

fn synthetic_train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    }
}

/// Trains until train accuracy exceeds `target` or `max_epochs` pass.
fn train_until(model: &mut Model, data: &[Utterance], cfg: &TrainConfig, target: f64, max_epochs: usize) -> (usize, f64) {
    let mut opt = Optimizer::new(cfg);
    let mut acc = 0.0;
    for epoch in 1..=max_epochs {
        acc = train_epoch(model, &mut opt, data, cfg, epoch).unwrap().accuracy;
        if acc > target {
            return (epoch, acc);
        }
    }
    (max_epochs, acc)
}

fn criterion_6(trained: &mut Option<Model>) -> Vec<(String, Outcome)> {
    let start = Instant::now();
    let data = tone_task(200, 11);
    let mut model = build_model(&ModelConfig::synthetic()).unwrap();
    let (epochs, acc) = train_until(&mut model, &data, &synthetic_train_cfg(3), 0.95, 30);
    let synthetic = timed(
        Duration::from_secs(300),
        start,
        check(acc > 0.95, format!("train_accuracy={acc:.3} epochs={epochs}")),
    );
    *trained = Some(model);

    let gsc = match std::env::var_os("GSC_V1_ROOT") {
        None => Outcome::Skip("GSC_V1_ROOT not set".into()),
        Some(root) => {
            let ds = load_dataset(&PathBuf::from(root), LabelMode::V1Twelve, 0).unwrap();
            // yes, no and up carry indices 0, 1 and 2 in the 12-class map
            let classes = [0, 1, 2];
            let train = balanced_subset(&ds.train, &classes, 100);
            let test = balanced_subset(&ds.test, &classes, 20);
            let cfg = ModelConfig {
                num_classes: 3,
                ..ModelConfig::synthetic()
            };
            let mut model = build_model(&cfg).unwrap();
            let tc = TrainConfig { epochs: 20, ..synthetic_train_cfg(5) };
            let mut opt = Optimizer::new(&tc);
            let mut best = 0f64;
            for epoch in 1..=tc.epochs {
                train_epoch(&mut model, &mut opt, &train[..], &tc, epoch).unwrap();
                best = best.max(evaluate(&model, &test[..], 32).unwrap().accuracy);
            }
            check(best > 0.70, format!("train={} test={} test_accuracy={best:.3}", train.len(), test.len()))
        }
    };
    vec![("synthetic".into(), synthetic), ("gsc-subset".into(), gsc)]
}

fn criterion_7(trained: &Model) -> Outcome {
    let wave = Tensor::new(&[8, trained.config.input_len], tone_task(8, 99).iter().flat_map(|u| u.samples().unwrap()).collect()).unwrap();
    let (_, record) = trained.infer(&wave, Mode::Eval).unwrap();
    let rates_ok = record.layers().iter().all(|l| (0.0..=1.0).contains(&l.rate()));
    let spikes: u64 = record.layers().iter().map(|l| l.step_spikes.iter().sum::<u64>()).sum();
    let elements: u64 = record.layers().iter().map(|l| l.step_elements.iter().sum::<u64>()).sum();
    let recomputed = spikes as f64 / elements as f64;
    let rate_exact = recomputed == record.mean_rate();

    let micro = build_model(&ModelConfig { seed: 2, ..ModelConfig::micro(64, 2) }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = Tensor::new(&[3, 64], (0..3 * 64).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let out = micro.forward(&mut tape, &input, Mode::Train).unwrap();
    let counted = micro.count_ops(input.shape(), &out.spike_record).unwrap().snn_ac_ops;
    let walked = common::event_walk_ac_ops(&micro.synapse_layers().unwrap(), &out.spike_outputs, &tape);
    check(
        rates_ok && rate_exact && counted == walked && walked > 0,
        format!(
            "layers={} mean_rate={:.4} recomputed_exact={rate_exact} snn_ac_ops={counted} event_walk={walked}",
            record.layers().len(),
            record.mean_rate()
        ),
    )
}

fn criterion_8() -> Outcome {
    let data = tone_task(24, 5);
    let cfg = TrainConfig { epochs: 2, batch_size: 8, ..synthetic_train_cfg(17) };
    let run = || {
        let mut model = build_model(&ModelConfig::synthetic()).unwrap();
        let mut opt = Optimizer::new(&cfg);
        for epoch in 1..=cfg.epochs {
            train_epoch(&mut model, &mut opt, &data[..], &cfg, epoch).unwrap();
        }
        model
    };
    let (a, b) = (run(), run());
    let identical = a.to_bytes() == b.to_bytes();
    let before = a.to_bytes();
    let first = evaluate(&a, &data[..], 8).unwrap().to_string();
    let second = evaluate(&a, &data[..], 8).unwrap().to_string();
    let pure = first == second && a.to_bytes() == before;
    check(identical && pure, format!("checkpoint_bytes={} bit_identical={identical} eval_pure={pure}", before.len()))
}

fn criterion_9() -> Outcome {
    let base = ModelConfig::synthetic();
    let full = build_model(&base).unwrap().param_count();
    let data = tone_task(200, 11);
    let mut parts = Vec::new();
    let mut ok = true;
    for variant in [Variant::GlscOnlyLocal, Variant::GlscOnlyGlobal, Variant::GlcAnn] {
        let cfg = make_variant(&base, variant).unwrap();
        let mut model = build_model(&cfg).unwrap();
        let params = model.param_count();
        let within = (params as f64 - full as f64).abs() <= 0.05 * full as f64;
        let (epochs, acc) = train_until(&mut model, &data, &synthetic_train_cfg(3), 0.95, 30);
        ok &= within && acc.is_finite();
        parts.push(format!("{variant}:params={params},epochs={epochs},train_accuracy={acc:.3}"));
    }
    check(ok, format!("full_params={full} {}", parts.join(" ")))
}

fn print(id: &str, name: &str, outcome: &Outcome) {
    let (status, detail) = match outcome {
        Outcome::Pass(d) => ("PASS", d),
        Outcome::Fail(d) => ("FAIL", d),
        Outcome::Skip(d) => ("SKIP", d),
    };
    println!("criterion={id} name={name} status={status} {detail}");
}

#[test]
fn acceptance() {
    let mut results: Vec<(String, String, Outcome)> = Vec::new();
    results.push(("1".into(), "neuron-oracle".into(), criterion_1()));
    results.push(("2".into(), "gradcheck".into(), criterion_2()));
    results.push(("3".into(), "energy-constants".into(), criterion_3()));
    results.push(("4".into(), "parameter-budget".into(), criterion_4()));
    for (part, o) in criterion_5() {
        results.push(("5".into(), format!("dataset-protocol/{part}"), o));
    }
    let mut trained = None;
    for (part, o) in criterion_6(&mut trained) {
        results.push(("6".into(), format!("learning/{part}"), o));
    }
    results.push(("7".into(), "spike-bookkeeping".into(), criterion_7(trained.as_ref().unwrap())));
    results.push(("8".into(), "determinism".into(), criterion_8()));
    results.push(("9".into(), "ablation".into(), criterion_9()));
    for (id, name, o) in &results {
        print(id, name, o);
    }
    let failed: Vec<_> = results.iter().filter(|r| matches!(r.2, Outcome::Fail(_))).map(|r| r.0.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
