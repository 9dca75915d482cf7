//! Acceptance criteria 1–10. Runs as a plain binary (no libtest harness) so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{
    floyd_warshall, permuted_sample, random_graph, random_permutation, random_tree, toy_records,
};
use ndarray::{Array2, Array3};
use relblend::blend::{blend_relations, sample_blend_mask, Modality};
use relblend::milab::{run_trials, DiscreteJoint};
use relblend::model::{FinetuneMode, ModelConfig, ModelParams, ModelSession};
use relblend::objectives::{cross_entropy, off_diagonal_mask, FinetuneTask};
use relblend::relations::{spd_matrix, unreachable_bucket, RelationSet};
use relblend::train::{
    grad_check, load_checkpoint, pretrain_sample, run_finetune, run_pretrain, save_checkpoint,
    Checkpoint, GradCheckConfig, Prepared, PretrainOptions, Record, TrainConfig,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn c1_spd_oracle() -> Outcome {
    let start = Instant::now();
    let max_spd = 15;
    for k in 0..200u64 {
        let n = 1 + (k as usize % 12);
        let density = [0.1, 0.25, 0.4, 0.7][(k / 12) as usize % 4];
        let mol = random_graph(k, n, density, false);
        let fw = floyd_warshall(&mol);
        let spd = spd_matrix(&mol, max_spd);
        for i in 0..n {
            for j in 0..n {
                let want = fw[i][j].map_or(unreachable_bucket(max_spd), |d| d.min(max_spd));
                ensure(spd[[i, j]] == want, || {
                    format!("graph {k}: ({i},{j}) {} vs {want}", spd[[i, j]])
                })?;
            }
        }
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "200 graphs exact in {:.3}s",
        start.elapsed().as_secs_f64()
    ))
}

fn c2_blend_fidelity() -> Outcome {
    let config = ModelConfig::desk();
    let params = ModelParams::<f64>::init(&config, 7).unwrap();
    for k in 0..50u64 {
        let mol = random_tree(1000 + k, 2 + (k as usize % 11));
        let n = mol.atom_count();
        let rels = RelationSet::for_molecule(&mol, config.max_spd, &params.relations).unwrap();
        let mask = sample_blend_mask(n, [0.4, 0.3, 0.3], k).unwrap();
        let out = blend_relations(&rels, &mask).unwrap();
        let dist = rels.dist_enc.as_ref().unwrap();
        for ((i, j), &m) in mask.entries.indexed_iter() {
            let src = match m {
                Modality::Spd => rels.spd_enc[[i, j]],
                Modality::Edge => rels.edge_enc[[i, j]],
                Modality::Dist => dist[[i, j]],
            };
            ensure(out.values[[i, j]].to_bits() == src.to_bits(), || {
                format!("pair {k} at ({i},{j})")
            })?;
        }
        let spd_only =
            blend_relations(&rels, &sample_blend_mask(n, [1.0, 0.0, 0.0], k).unwrap()).unwrap();
        ensure(
            spd_only
                .values
                .iter()
                .zip(rels.spd_enc.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("p=(1,0,0) differs from spd_enc on pair {k}"),
        )?;
    }
    Ok("50 pairs entrywise exact; p=(1,0,0) bitwise spd_enc".into())
}

fn c3_blend_statistics() -> Outcome {
    let p = [0.5, 0.3, 0.2];
    let n = 50;
    let mut counts = [0u64; 3];
    let mut total = 0u64;
    let mut seed = 0;
    while total < 100_000 {
        let mask = sample_blend_mask(n, p, seed).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                counts[mask.entries[[i, j]] as usize - 1] += 1;
                total += 1;
            }
        }
        seed += 1;
    }
    let freq = counts.map(|c| c as f64 / total as f64);
    for k in 0..3 {
        ensure((freq[k] - p[k]).abs() <= 0.01, || {
            format!("frequencies {freq:?} vs {p:?}")
        })?;
    }
    Ok(format!(
        "{total} pairs, frequencies {:.4}/{:.4}/{:.4}",
        freq[0], freq[1], freq[2]
    ))
}

fn c4_gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let m = &cfg.model;
    ensure(
        (m.layers, m.hidden, m.heads, m.head_dim, m.kernels) == (2, 8, 2, 4, 4),
        || "unexpected model".into(),
    )?;
    ensure(cfg.step == 1e-6 && cfg.tolerance == 1e-5, || {
        "unexpected step/tolerance".into()
    })?;
    let report = grad_check(&cfg).map_err(|e| e.to_string())?;
    for required in [
        "relations.gaussian.means",
        "relations.gaussian.widths",
        "relations.gaussian.gamma",
        "relations.gaussian.beta",
        "relations.gaussian.proj_hidden",
        "relations.gaussian.proj_out",
        "relations.edge.hop_weights",
        "head.left",
        "head.right",
        "head.spd",
        "head.edge",
        "head.dist",
    ] {
        ensure(report.tensors.iter().any(|t| t.name == required), || {
            format!("{required} not checked")
        })?;
    }
    let failed: Vec<String> = report
        .failures()
        .map(|t| format!("{} ({:.2e})", t.name, t.max_rel_err))
        .collect();
    ensure(failed.is_empty(), || {
        format!("failed: {}", failed.join(", "))
    })?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "{} tensors, max relative error {:.2e}, {:.2}s",
        report.tensors.len(),
        report.max_rel_err,
        start.elapsed().as_secs_f64()
    ))
}

fn c5_permutation_invariance() -> Outcome {
    let config = ModelConfig::desk();
    let params = ModelParams::<f64>::init(&config, 5).unwrap();
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let mol = random_tree(500 + k, 3 + (k as usize % 10));
        let record = Record {
            id: format!("m{k}"),
            molecule: mol.clone(),
        };
        let prep = Prepared::new(&record, config.max_spd);
        let sample = pretrain_sample::<f64>(&prep, &config, k, 1, 0, 0).unwrap();
        let perm = random_permutation(k, mol.atom_count());
        let moved = permuted_sample(&sample, &mol, &perm, config.max_spd);
        let a = ModelSession::new(&params, &config)
            .forward_pretrain(&sample)
            .unwrap()
            .0
            .total;
        let b = ModelSession::new(&params, &config)
            .forward_pretrain(&moved)
            .unwrap()
            .0
            .total;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-9, || format!("max |dL| = {worst:.3e}"))?;
    Ok(format!("20 molecules, max |dL| = {worst:.2e}"))
}

fn c6_overfit() -> Outcome {
    let start = Instant::now();
    let config = TrainConfig::desk();
    let out = run_pretrain::<f64>(&config, &toy_records(), PretrainOptions::default())
        .map_err(|e| e.to_string())?;
    let first = out.history.first().unwrap().total;
    let last = out.history.last().unwrap().total;
    let drop = 1.0 - last / first;
    ensure(out.history.len() == 2000, || {
        format!("{} steps", out.history.len())
    })?;
    ensure(drop >= 0.9, || {
        format!("loss {first:.4} -> {last:.4}, drop {:.1}%", 100.0 * drop)
    })?;
    within(start.elapsed(), 300.0)?;
    Ok(format!(
        "loss {first:.4} -> {last:.4} ({:.1}% drop) in {:.1}s",
        100.0 * drop,
        start.elapsed().as_secs_f64()
    ))
}

fn c7_information_identities() -> Outcome {
    let start = Instant::now();
    let report = run_trials(100, 0, 4).map_err(|e| e.to_string())?;
    ensure(
        report.max_chain_rule <= 1e-10 && report.max_decomposition <= 1e-10,
        || {
            format!(
                "residuals {:.2e} / {:.2e}",
                report.max_chain_rule, report.max_decomposition
            )
        },
    )?;
    let copies =
        DiscreteJoint::from_fn([2; 4], |[a1, a2, b1, b2]| f64::from(a1 == b1 && a2 == b2)).unwrap();
    let (lhs, rhs) = copies.decomposition_sides().unwrap();
    let two_ln2 = 2.0 * std::f64::consts::LN_2;
    ensure(
        (lhs - two_ln2).abs() <= 1e-12 && (rhs - two_ln2).abs() <= 1e-12,
        || format!("copy case {lhs} / {rhs}"),
    )?;
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "100 trials, max residuals {:.1e} / {:.1e}; copy case 2 ln 2",
        report.max_chain_rule, report.max_decomposition
    ))
}

fn c8_determinism_and_resume() -> Outcome {
    let records = toy_records();
    let config = TrainConfig {
        steps: 60,
        warmup: 10,
        seed: 3,
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str, workers: usize| {
        let path = dir.path().join(name);
        let cfg = TrainConfig {
            workers,
            ..config.clone()
        };
        run_pretrain::<f64>(
            &cfg,
            &records,
            PretrainOptions {
                checkpoint_path: Some(&path),
                ..Default::default()
            },
        )
        .unwrap();
        std::fs::read(&path).unwrap()
    };
    let a = run("a.bin", 0);
    let b = run("b.bin", 0);
    ensure(a == b, || {
        "two identical runs wrote different checkpoints".into()
    })?;
    // the worker count is recorded in the header but never changes the numbers
    let threaded = Checkpoint::from_bytes(&run("c.bin", 3)).map_err(|e| e.to_string())?;
    let base = Checkpoint::from_bytes(&a).map_err(|e| e.to_string())?;
    ensure(
        threaded.params == base.params && threaded.moments == base.moments,
        || "worker count changed the trained state".into(),
    )?;

    let mid = dir.path().join("mid.bin");
    let opts = PretrainOptions {
        checkpoint_path: Some(&mid),
        stop_after: Some(23),
        ..Default::default()
    };
    run_pretrain::<f64>(&config, &records, opts).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(&mid).map_err(|e| e.to_string())?;
    let end = dir.path().join("resumed.bin");
    let opts = PretrainOptions {
        resume: Some(&ck),
        checkpoint_path: Some(&end),
        ..Default::default()
    };
    run_pretrain::<f64>(&config, &records, opts).map_err(|e| e.to_string())?;
    let resumed = std::fs::read(&end).map_err(|e| e.to_string())?;
    ensure(resumed == a, || {
        "save -> load -> resume diverged from the uninterrupted run".into()
    })?;

    // the same holds for an in-memory round trip through save_checkpoint
    let again = dir.path().join("again.bin");
    save_checkpoint(&again, &ck).map_err(|e| e.to_string())?;
    ensure(
        load_checkpoint(&again).map_err(|e| e.to_string())? == ck,
        || "checkpoint round trip".into(),
    )?;
    Ok(format!(
        "{} checkpoint bytes identical; resume from step 23 bit-exact",
        a.len()
    ))
}

fn c9_finetune_reduction() -> Outcome {
    let records = toy_records();
    let data: Vec<(Record, f64)> = records
        .into_iter()
        .enumerate()
        .map(|(k, r)| (r, 0.5 * k as f64 - 0.3))
        .collect();
    let run = |mode: FinetuneMode, zero: bool| {
        let mut cfg = TrainConfig {
            seed: 9,
            ..TrainConfig::desk()
        };
        cfg.finetune.mode = mode;
        cfg.finetune.zero_distance = zero;
        cfg.finetune.task = FinetuneTask::Regression;
        cfg.finetune.epochs = 4;
        cfg.finetune.batch_size = 2;
        cfg.finetune.peak_lr = 1e-3;
        cfg.finetune.valid_fraction = 0.25;
        let init = ModelParams::<f64>::init(&cfg.model, cfg.seed).unwrap();
        run_finetune(&cfg, init, &data, None).unwrap()
    };
    let two_d = run(FinetuneMode::TwoD, false);
    let reduced = run(FinetuneMode::TwoDThreeD, true);
    let bits = |h: &[relblend::train::EpochMetrics]| {
        h.iter()
            .map(|m| {
                (
                    m.train_loss.to_bits(),
                    m.train_metric.to_bits(),
                    m.valid_loss.map(f64::to_bits),
                    m.valid_metric.map(f64::to_bits),
                )
            })
            .collect::<Vec<_>>()
    };
    ensure(bits(&two_d.history) == bits(&reduced.history), || {
        "metrics differ".into()
    })?;
    ensure(two_d.params.bit_eq(&reduced.params), || {
        "parameters differ".into()
    })?;
    let full = run(FinetuneMode::TwoDThreeD, false);
    ensure(bits(&full.history) != bits(&two_d.history), || {
        "distance term had no effect".into()
    })?;
    Ok(format!(
        "{} epochs of metrics and parameters bit-identical",
        two_d.history.len()
    ))
}

fn c10_cross_entropy_calibration() -> Outcome {
    let n = 3;
    let z = Array3::<f64>::from_elem((n, n, 6), 0.37);
    let targets = Array2::from_shape_fn((n, n), |(i, j)| (i + j) % 6);
    let loss = cross_entropy(&z, &targets, &off_diagonal_mask(n)).map_err(|e| e.to_string())?;
    let want = 1.791759469228055;
    ensure((loss - want).abs() <= 1e-12, || format!("{loss} vs ln 6"))?;
    Ok(format!("loss {loss:.12}"))
}

type Criterion = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("SPD oracle equivalence", c1_spd_oracle),
        ("blend fidelity", c2_blend_fidelity),
        ("blend statistics", c3_blend_statistics),
        ("gradient check", c4_gradient_check),
        ("permutation invariance", c5_permutation_invariance),
        ("overfit smoke test", c6_overfit),
        ("MI identities", c7_information_identities),
        ("determinism and persistence", c8_determinism_and_resume),
        ("finetune reduction", c9_finetune_reduction),
        ("cross-entropy calibration", c10_cross_entropy_calibration),
    ];
    let mut failures = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", k + 1),
            Err(reason) => {
                failures += 1;
                println!("criterion {:>2} {name}: FAIL ({reason})", k + 1);
            }
        }
    }
    println!("acceptance: {}/10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
