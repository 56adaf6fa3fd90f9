//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p ctckit --test acceptance` (add `--release` for a
//! faster training criterion).

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ctckit::data::{generate_synthetic, make_batches, Dataset, SyntheticConfig};
use ctckit::decode::{beam_search_decode, best_path_decode, exact_decode, prefix_search_decode, DecodeConfig};
use ctckit::lattice::{
    ctc_gradient, ctc_loss, extend_with_blanks, LabelSequence, Lattice, PosteriorMatrix,
};
use ctckit::matrix::Matrix;
use ctckit::metrics::{edit_distance, label_error_rate, Metric};
use ctckit::model::{CtcModel, FitOptions, WEIGHTS_FILE};
use ctckit::net::{self, init_params, CellKind, LayerSpec, NetworkSpec, OptimizerKind};
use ctckit::{Error, LoadError};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

fn posterior(rows: &[Vec<f64>]) -> PosteriorMatrix {
    PosteriorMatrix::from_rows(rows).unwrap()
}

fn labels(v: &[usize]) -> LabelSequence {
    LabelSequence(v.to_vec())
}

fn loss_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut compared, mut infeasible, mut worst) = (0, 0, 0.0f64);
    while compared < 1000 {
        let t = rng.gen_range(1..=6);
        let k = rng.gen_range(2..=4);
        let l = rng.gen_range(0..=3);
        let probs = random_posteriors(&mut rng, t, k);
        let lab = random_labels(&mut rng, l, k - 1);
        let oracle = sequence_probability(&probs, &lab);
        match ctc_loss(&posterior(&probs), &labels(&lab), t, l) {
            Ok(loss) => {
                if oracle == 0.0 {
                    return Err(format!("loss {loss} for an unreachable sequence {lab:?}"));
                }
                worst = worst.max(relative_error((-loss).exp(), oracle, 0.0));
                compared += 1;
            }
            Err(Error::InfeasibleAlignment { .. }) if oracle == 0.0 => infeasible += 1,
            Err(e) => return Err(format!("{e} (oracle {oracle})")),
        }
    }
    let detail = format!("{compared} instances (+{infeasible} infeasible agreed), max rel err {worst:.2e}");
    if worst <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn worked_instance() -> Outcome {
    let uniform = posterior(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    let loss = ctc_loss(&uniform, &labels(&[0]), 2, 1).map_err(|e| e.to_string())?;
    let expected = -(0.75f64).ln();
    let repeated = ctc_loss(&uniform, &labels(&[0, 0]), 2, 2);
    let infeasible = matches!(repeated, Err(Error::InfeasibleAlignment { .. }));
    let detail = format!("loss {loss:.10} (expected {expected:.10}), [a,a] infeasible: {infeasible}");
    if (loss - 0.2876820724517809).abs() < 1e-12 && infeasible {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lattice_gradient_audit(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let t = rng.gen_range(1..=5);
        let k = rng.gen_range(2..=4);
        let l = rng.gen_range(0..=2);
        let lab = random_labels(rng, l, k - 1);
        if LabelSequence(lab.clone()).min_frames() > t {
            continue;
        }
        let mut logits: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = Matrix::from_vec(t, k, logits.clone()).unwrap();
        let (_, grad) = ctc_gradient(&m, &labels(&lab), t, l).map_err(|e| e.to_string())?;
        let oracle_loss = |z: &[f64]| {
            let probs: Vec<Vec<f64>> = z.chunks(k).map(softmax).collect();
            -sequence_probability(&probs, &lab).ln()
        };
        for i in 0..t * k {
            let numeric = central_difference(&mut logits, i, 1e-5, oracle_loss);
            worst = worst.max(relative_error(grad.as_slice()[i], numeric, 1e-3));
        }
        done += 1;
    }
    Ok(worst)
}

fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let depth = rng.gen_range(1..=2);
    NetworkSpec {
        feature_dim: rng.gen_range(1..=3),
        layers: (0..depth)
            .map(|_| LayerSpec {
                kind: if rng.gen_bool(0.5) { CellKind::Lstm } else { CellKind::Rnn },
                units: rng.gen_range(1..=3),
                bidirectional: rng.gen_bool(0.5),
            })
            .collect(),
        num_labels: rng.gen_range(1..=2),
    }
}

fn network_gradient_audit(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let spec = random_spec(rng);
        let t = rng.gen_range(2..=5);
        let lab = {
            let len = rng.gen_range(0..=2);
            let mut l = random_labels(rng, len, spec.num_labels);
            while LabelSequence(l.clone()).min_frames() > t {
                l.pop();
            }
            LabelSequence(l)
        };
        let mut params = init_params(&spec, rng.gen()).map_err(|e| e.to_string())?;
        let features = Matrix::from_vec(
            t,
            spec.feature_dim,
            (0..t * spec.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (_, cache) = net::forward(&spec, &params, &features, t).map_err(|e| e.to_string())?;
        let (_, grad_logits) = ctc_gradient(&cache.logits, &lab, t, lab.len()).map_err(|e| e.to_string())?;
        let grads = net::backward(&spec, &params, &cache, &grad_logits).map_err(|e| e.to_string())?;
        for ti in 0..params.tensors.len() {
            for j in 0..params.tensors[ti].data.len() {
                let orig = params.tensors[ti].data[j];
                let mut eval = |x: f64| {
                    params.tensors[ti].data[j] = x;
                    let (p, _) = net::forward(&spec, &params, &features, t).unwrap();
                    ctc_loss(&p, &lab, t, lab.len()).unwrap()
                };
                let numeric = (eval(orig + 1e-5) - eval(orig - 1e-5)) / 2e-5;
                params.tensors[ti].data[j] = orig;
                worst = worst.max(relative_error(grads.tensors[ti].data[j], numeric, 1e-3));
            }
        }
    }
    Ok(worst)
}

fn gradient_audits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lattice = lattice_gradient_audit(&mut rng)?;
    let network = network_gradient_audit(&mut rng)?;
    let detail = format!(
        "100 lattice instances max rel err {lattice:.2e} (<= 1e-6), 100 networks max rel err {network:.2e} (<= 1e-5)"
    );
    if lattice <= 1e-6 && network <= 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn decoder_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..500 {
        let t = rng.gen_range(1..=5);
        let k = rng.gen_range(2..=3);
        let rows = random_posteriors(&mut rng, t, k);
        let p = posterior(&rows);
        let exact = exact_decode(&p, t, 1).map_err(|e| e.to_string())?;
        let (oracle_labels, oracle_p) = exact_top1(&rows);
        if exact.best_labels().0 != oracle_labels || relative_error(exact.best().score.exp(), oracle_p, 0.0) > 1e-10 {
            return Err(format!("instance {i}: exact_decode disagrees with enumeration"));
        }
        let beam = beam_search_decode(&p, t, 1024, 1).map_err(|e| e.to_string())?;
        if beam.best_labels() != exact.best_labels() {
            return Err(format!(
                "instance {i}: beam {:?} vs exact {:?}",
                beam.best_labels(),
                exact.best_labels()
            ));
        }
    }
    let mut prefix_checked = 0;
    for i in 0..300 {
        let t = rng.gen_range(1..=6);
        let k = rng.gen_range(2..=3);
        let rows = random_posteriors(&mut rng, t, k);
        let p = posterior(&rows);
        let prefix = prefix_search_decode(&p, t, 1.0, usize::MAX).map_err(|e| e.to_string())?;
        let (oracle_labels, _) = exact_top1(&rows);
        if prefix.approximate || prefix.best_labels().0 != oracle_labels {
            return Err(format!("instance {i}: prefix search {:?} vs exact {oracle_labels:?}", prefix.best_labels()));
        }
        prefix_checked += 1;
    }

    let div = posterior(&[vec![0.4, 0.6], vec![0.4, 0.6]]);
    let greedy = best_path_decode(&div, 2).map_err(|e| e.to_string())?;
    let exact = exact_decode(&div, 2, 1).map_err(|e| e.to_string())?;
    let beam = beam_search_decode(&div, 2, 8, 1).map_err(|e| e.to_string())?;
    let divergence_ok = greedy.best_labels().is_empty()
        && exact.best_labels().0 == [0]
        && beam.best_labels().0 == [0]
        && (exact.best().score.exp() - 0.64).abs() < 1e-12
        && (beam.best().score.exp() - 0.64).abs() < 1e-12;
    let detail = format!(
        "500 beam/exact agreements, {prefix_checked} prefix/exact agreements, divergence instance greedy={:?} exact={:?} p={:.4}",
        greedy.best_labels().0,
        exact.best_labels().0,
        exact.best().score.exp()
    );
    if divergence_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn alpha_beta_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut count = 0;
    while count < 1000 {
        let t = rng.gen_range(1..=12);
        let k = rng.gen_range(2..=5);
        let len = rng.gen_range(0..=4);
        let lab = random_labels(&mut rng, len, k - 1);
        if LabelSequence(lab.clone()).min_frames() > t {
            continue;
        }
        let p = posterior(&random_posteriors(&mut rng, t, k));
        let ext = extend_with_blanks(&labels(&lab), k - 1);
        let lattice = Lattice::compute(&p, &ext, t).map_err(|e| e.to_string())?;
        for total in lattice.frame_log_totals() {
            worst = worst.max((total - lattice.log_likelihood).abs());
        }
        count += 1;
    }
    let detail = format!("{count} lattices, max deviation {worst:.2e}");
    if worst <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|x| x.to_bits()).collect()
}

fn padding_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Lattice level: arbitrary content in padded frames.
    for _ in 0..200 {
        let t = rng.gen_range(1..=6);
        let k = rng.gen_range(2..=4);
        let len = rng.gen_range(0..=2);
        let lab = random_labels(&mut rng, len, k - 1);
        if LabelSequence(lab.clone()).min_frames() > t {
            continue;
        }
        let rows = random_posteriors(&mut rng, 2 * t, k);
        let short = posterior(&rows[..t]);
        let long = posterior(&rows);
        let a = ctc_loss(&short, &labels(&lab), t, lab.len()).unwrap();
        let b = ctc_loss(&long, &labels(&lab), t, lab.len()).unwrap();
        if a.to_bits() != b.to_bits() {
            return Err("lattice loss depends on padded frames".into());
        }
        let z: Vec<f64> = (0..2 * t * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (la, ga) = ctc_gradient(&Matrix::from_vec(t, k, z[..t * k].to_vec()).unwrap(), &labels(&lab), t, lab.len()).unwrap();
        let (lb, gb) = ctc_gradient(&Matrix::from_vec(2 * t, k, z).unwrap(), &labels(&lab), t, lab.len()).unwrap();
        if la.to_bits() != lb.to_bits()
            || bits(ga.as_slice()) != bits(&gb.as_slice()[..t * k])
            || gb.as_slice()[t * k..].iter().any(|&g| g.to_bits() != 0)
        {
            return Err("lattice gradient depends on padded frames".into());
        }
    }

    // Model level: whole batches re-padded to twice their maxima.
    let data = generate_synthetic(&SyntheticConfig {
        num_sequences: 40,
        seed: 60,
        ..Default::default()
    })
    .unwrap();
    let spec = NetworkSpec {
        feature_dim: 4,
        layers: vec![
            LayerSpec {
                kind: CellKind::Lstm,
                units: 5,
                bidirectional: true,
            },
            LayerSpec {
                kind: CellKind::Rnn,
                units: 4,
                bidirectional: true,
            },
        ],
        num_labels: 4,
    };
    let model = CtcModel::compile(spec, OptimizerKind::Adam, 1e-2, DecodeConfig::default(), 61).unwrap();
    let beam = DecodeConfig {
        greedy: false,
        beam_width: 8,
        top_paths: 3,
    };
    let metrics = [Metric::Loss, Metric::Ler, Metric::Ser];
    let batches = make_batches(&data, 8, 62).unwrap();
    for batch in &batches {
        let doubled = batch.with_padding(2 * batch.max_frames(), 2 * batch.max_labels()).unwrap();
        let same = |what: &str, a: String, b: String| if a == b { Ok(()) } else { Err(format!("{what} changed under padding")) };
        same(
            "losses",
            format!("{:?}", bits(&model.get_loss(batch).unwrap())),
            format!("{:?}", bits(&model.get_loss(&doubled).unwrap())),
        )?;
        same(
            "greedy predictions",
            format!("{:?}", model.predict(batch).unwrap()),
            format!("{:?}", model.predict(&doubled).unwrap()),
        )?;
        same(
            "beam predictions",
            format!("{:?}", model.predict_with(batch, &beam).unwrap()),
            format!("{:?}", model.predict_with(&doubled, &beam).unwrap()),
        )?;
        same(
            "metrics",
            format!("{:?}", model.evaluate(batch, &metrics).unwrap()),
            format!("{:?}", model.evaluate(&doubled, &metrics).unwrap()),
        )?;
        let (mut a, mut b) = (model.clone(), model.clone());
        let la = a.train_on_batch(batch).unwrap();
        let lb = b.train_on_batch(&doubled).unwrap();
        let param_bits = |m: &CtcModel| {
            m.params()
                .tensors
                .iter()
                .flat_map(|t| bits(&t.data))
                .collect::<Vec<_>>()
        };
        if la.to_bits() != lb.to_bits() || param_bits(&a) != param_bits(&b) {
            return Err("training step changed under padding".into());
        }
    }
    Ok(format!(
        "lattice loss/gradient bit-identical; {} batches: loss, gradient step, greedy+beam predictions, metrics bit-identical",
        batches.len()
    ))
}

fn metric_axioms() -> Outcome {
    let config = Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let seq = || vec(0usize..4, 0..9);
    let result = runner.run(&(seq(), seq(), seq()), |(a, b, c)| {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab, edit_distance_table(&a, &b));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(ab == 0, a == b);
        prop_assert_eq!(ab, edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        prop_assert!(ab >= a.len().abs_diff(b.len()) && ab <= a.len().max(b.len()));
        Ok(())
    });
    let kitten = [10, 8, 19, 19, 4, 13];
    let sitting = [18, 8, 19, 19, 8, 13, 6];
    let ks = edit_distance(&kitten, &sitting);
    let oracle = edit_distance_table(&kitten, &sitting);
    match result {
        Ok(()) if ks == 3 && oracle == 3 => Ok(format!(
            "10000 random triples satisfy identity, symmetry, triangle and oracle agreement; kitten/sitting = {ks} (oracle {oracle})"
        )),
        Ok(()) => Err(format!("kitten/sitting = {ks}, oracle {oracle}")),
        Err(e) => Err(e.to_string()),
    }
}

fn mean_ler(model: &CtcModel, data: &Dataset) -> f64 {
    let preds = model.predict(data).unwrap();
    preds
        .iter()
        .zip(&data.sequences)
        .map(|(p, s)| label_error_rate(p.best_labels(), &s.labels))
        .sum::<f64>()
        / preds.len() as f64
}

fn end_to_end_training() -> Outcome {
    let synthetic = |n, seed| {
        generate_synthetic(&SyntheticConfig {
            num_sequences: n,
            num_labels: 4,
            feature_dim: 4,
            frames_per_label: (2, 4),
            noise_sigma: 0.1,
            seed,
        })
        .unwrap()
    };
    let train = synthetic(500, 2024);
    let held_out = synthetic(100, 2025);
    let spec = NetworkSpec::stacked(4, 4, CellKind::Rnn, 32, 1, true);
    let mut model = CtcModel::compile(spec, OptimizerKind::Adam, 1e-3, DecodeConfig::default(), 7).unwrap();
    let start = Instant::now();
    let mut losses = Vec::new();
    let mut reached = None;
    let mut ler = f64::NAN;
    for epoch in 1..=50 {
        let history = model
            .fit(
                &train,
                &FitOptions {
                    epochs: 1,
                    batch_size: 16,
                    shuffle_seed: 1000 + epoch as u64,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
        losses.push(history.epochs[0].train_loss);
        ler = mean_ler(&model, &held_out);
        if ler < 0.05 && reached.is_none() {
            reached = Some(epoch);
        }
        if reached.is_some() && epoch >= 3 {
            break;
        }
    }
    let decreasing = losses.len() >= 3 && losses[0] > losses[1] && losses[1] > losses[2];
    let detail = format!(
        "epoch losses 1-3 {:.4} {:.4} {:.4}; held-out LER {ler:.4} {} ({:.1}s)",
        losses[0],
        losses.get(1).copied().unwrap_or(f64::NAN),
        losses.get(2).copied().unwrap_or(f64::NAN),
        match reached {
            Some(e) => format!("below 0.05 at epoch {e}"),
            None => "never below 0.05 within 50 epochs".into(),
        },
        start.elapsed().as_secs_f64()
    );
    if decreasing && reached.is_some() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SyntheticConfig {
        num_sequences: 30,
        seed: 90,
        ..Default::default()
    })
    .unwrap();
    let spec = NetworkSpec::stacked(4, 4, CellKind::Lstm, 6, 2, true);
    let decode = DecodeConfig {
        greedy: false,
        beam_width: 10,
        top_paths: 2,
    };
    let mut model = CtcModel::compile(spec, OptimizerKind::Adam, 1e-2, decode, 91).unwrap();
    model
        .fit(
            &data,
            &FitOptions {
                epochs: 2,
                batch_size: 8,
                ..Default::default()
            },
        )
        .unwrap();
    let before = model.predict(&data).unwrap();
    model.save_model(dir.path()).map_err(|e| e.to_string())?;
    let loaded = CtcModel::load_model(dir.path(), None).map_err(|e| e.to_string())?;
    let after = loaded.predict(&data).unwrap();
    let identical = format!("{before:?}") == format!("{after:?}")
        && before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.paths.iter().zip(&b.paths).all(|(x, y)| x.score.to_bits() == y.score.to_bits()));

    let path = dir.path().join(WEIGHTS_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let typed = match CtcModel::load_model(dir.path(), None) {
        Err(Error::Load(LoadError::BadMagic { path: p, .. })) => p == path,
        _ => false,
    };
    let detail = format!("predictions bit-identical after reload: {identical}; corrupted magic gives BadMagic naming the file: {typed}");
    if identical && typed {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ctckit"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    std::fs::write(
        p("config.json"),
        r#"{"feature_dim": 4, "num_labels": 4, "layers": [{"kind": "rnn", "units": 8, "bidirectional": true}]}"#,
    )
    .unwrap();
    run_cli(&["gen-data", "--num", "60", "--labels", "4", "--feature-dim", "4", "--sigma", "0.1", "--seed", "11", "--out", &p("train.jsonl")])?;
    run_cli(&["gen-data", "--num", "20", "--labels", "4", "--feature-dim", "4", "--sigma", "0.1", "--seed", "12", "--out", &p("test.jsonl")])?;
    run_cli(&[
        "train", "--config", &p("config.json"), "--data", &p("train.jsonl"), "--epochs", "3", "--batch-size", "8",
        "--lr", "0.01", "--optimizer", "adam", "--seed", "13", "--out", &p("model"),
    ])?;
    run_cli(&["evaluate", "--model", &p("model"), "--data", &p("test.jsonl"), "--metrics", "loss,ler,ser", "--out", &p("report.json")])?;
    Ok((
        std::fs::read(p("report.json")).unwrap(),
        std::fs::read(dir.join("model").join(WEIGHTS_FILE)).unwrap(),
    ))
}

fn cli_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (report_a, weights_a) = pipeline(a.path())?;
    let (report_b, weights_b) = pipeline(b.path())?;
    let detail = format!(
        "report bytes identical: {}, weights identical: {} ({} byte report)",
        report_a == report_b,
        weights_a == weights_b,
        report_a.len()
    );
    if report_a == report_b && weights_a == weights_b {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("loss-oracle equivalence", loss_oracle_equivalence),
        ("worked instance", worked_instance),
        ("gradient audits", gradient_audits),
        ("decoder oracles", decoder_oracles),
        ("alpha/beta consistency", alpha_beta_consistency),
        ("padding invariance", padding_invariance),
        ("metric axioms", metric_axioms),
        ("end-to-end trainability", end_to_end_training),
        ("persistence", persistence),
        ("determinism", cli_determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{}] {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

