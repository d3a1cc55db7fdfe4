//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Criteria that need hours of training are `#[ignore]` and run
//! via `cargo test --release --test acceptance -- --ignored --nocapture
//! --test-threads 1`; everything else runs in the default suite.

use sab::nn::GradMap;
use sab::tasks::{
    answer_window, gen_copying, AddingConfig, BatchSource, CopyingConfig,
    CopyingSource, Targets,
};
use sab::tensor::{Tape, Tensor};
use sab::train::{
    checkpoint, sab_gradient_check, GradCheckSettings, Mode, SeqState, TrainConfig, Trainer,
};

fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ── 1. Gradient oracle ──────────────────────────────────────────────

#[test]
fn criterion_1_gradient_oracle() {
    let started = std::time::Instant::now();
    let settings = GradCheckSettings::default(); // n_h=8, T=12, k_att=2, k_top=2, k_trunc=3, batch 2
    let mut worst = 0.0f64;
    let mut worst_skip = 0.0f64;
    for seed in 0..10 {
        let report = sab_gradient_check(&settings, seed).unwrap();
        worst = worst.max(report.max_rel_err);
        worst_skip = worst_skip.max(report.skipped_fraction());
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && worst_skip < 0.05 && elapsed < 60.0;
    assert!(
        verdict(
            "1 gradient-oracle",
            pass,
            &format!("max rel {worst:.3e}, skipped {worst_skip:.2}%, {elapsed:.1}s, 10 seeds")
        ),
        "worst {worst}, skipped {worst_skip}"
    );
}

// ── 2. Mode-reduction equivalences ──────────────────────────────────

fn toy_config(mode: Mode, seed: u64, k_trunc: usize, k_top: usize) -> TrainConfig {
    TrainConfig {
        mode,
        k_trunc,
        k_top,
        k_att: 2,
        n_input: 10,
        n_hidden: 10,
        n_out: 9,
        batch_size: 2,
        seed,
        update_every: k_trunc,
        ..TrainConfig::defaults(mode)
    }
}

fn segment_grads(trainer: &Trainer, batch: &sab::tasks::Batch) -> Vec<GradMap> {
    let mut seq = SeqState::new(batch.batch_size(), trainer.config.n_hidden);
    let total = batch.steps();
    let window = match trainer.config.mode {
        Mode::Bptt => total,
        _ => trainer.config.k_trunc,
    };
    let mut out = Vec::new();
    let mut t = 1;
    while t <= total {
        let t_end = (t + window - 1).min(total);
        let idx = trainer.run_segment(&mut seq, batch, t, t_end).unwrap();
        out.push(trainer.backward_segment(&seq, idx).unwrap().grads);
        t = t_end + 1;
    }
    out
}

#[test]
fn criterion_2_mode_reductions() {
    let started = std::time::Instant::now();
    let mut bit_identical = true;
    let mut worst_rel = 0.0f64;
    for trial in 0..100u64 {
        let t_gap = 4 + (trial % 5) as usize;
        let batch = gen_copying(trial, &CopyingConfig { t_gap }, 2);
        let k_trunc = 2 + (trial % 4) as usize;

        // (a) zero-k_top attentive mode vs plain truncated mode, bitwise.
        let sab = Trainer::new(toy_config(Mode::Sab, trial, k_trunc, 0)).unwrap();
        let tbptt = Trainer::new(toy_config(Mode::Tbptt, trial, k_trunc, 0)).unwrap();
        for (a, b) in segment_grads(&sab, &batch).iter().zip(&segment_grads(&tbptt, &batch)) {
            for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
                bit_identical &= ta.data() == tb.data();
            }
        }

        // (b) full-window truncation vs one-segment backprop, < 1e-12.
        let total = batch.steps();
        let tb_full = Trainer::new(toy_config(Mode::Tbptt, trial, total, 0)).unwrap();
        let bptt = Trainer::new(toy_config(Mode::Bptt, trial, total, 0)).unwrap();
        let gf = segment_grads(&tb_full, &batch);
        let gb = segment_grads(&bptt, &batch);
        assert_eq!(gf.len(), 1);
        for ((_, ta), (_, tb)) in gf[0].iter().zip(gb[0].iter()) {
            for (&x, &y) in ta.data().iter().zip(tb.data()) {
                let denom = x.abs().max(y.abs()).max(1e-300);
                worst_rel = worst_rel.max((x - y).abs() / denom);
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = bit_identical && worst_rel < 1e-12 && elapsed < 60.0;
    assert!(
        verdict(
            "2 mode-reductions",
            pass,
            &format!("100 trials, bitwise {bit_identical}, full-window worst rel {worst_rel:.2e}, {elapsed:.1}s")
        ),
        "bitwise {bit_identical}, worst {worst_rel}"
    );
}

// ── 3. Sparsity and truncation invariants ───────────────────────────

fn oracle_top_k(scores: &[f64], k: usize) -> (Vec<usize>, f64) {
    let mut pairs: Vec<(f64, usize)> = scores.iter().cloned().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let tau = if scores.len() > k {
        pairs[k].0
    } else {
        pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - 1.0
    };
    let mut cols: Vec<usize> = pairs
        .iter()
        .take(k)
        .filter(|p| p.0 - tau > 0.0)
        .map(|p| p.1)
        .collect();
    cols.sort_unstable();
    (cols, tau)
}

#[test]
fn criterion_3_sparsity_truncation_invariants() {
    let started = std::time::Instant::now();
    let mut rng = sab::rng::Rng::seeded(33);
    let instances = 10_000usize;

    // Selection matches the sort oracle; at most k_top positive weights.
    for _ in 0..instances {
        let m = 1 + rng.below(16) as usize;
        let k = 1 + rng.below(6) as usize;
        let scores: Vec<f64> = (0..m).map(|_| rng.range(-5.0, 5.0)).collect();
        let mut tape = Tape::new();
        let sv = tape.leaf(Tensor::matrix(1, m, scores.clone()));
        let (w, sel) = tape.topk_select(sv, k).unwrap();
        let (ocols, otau) = oracle_top_k(&scores, k);
        assert_eq!(sel[0].cols, ocols);
        assert_eq!(sel[0].tau, otau);
        let positives = tape.value(w).data().iter().filter(|&&v| v > 0.0).count();
        assert!(positives <= k);
        assert_eq!(positives, sel[0].cols.len());
    }

    // Zero gradient (exact) to inputs outside every retained window.
    let mut zero_ok = true;
    for trial in 0..10_000u64 {
        let cfg = TrainConfig {
            mode: Mode::Sab,
            k_trunc: 2,
            k_top: 1,
            k_att: 2,
            n_input: 3,
            n_hidden: 3,
            n_out: 2,
            batch_size: 1,
            seed: trial,
            update_every: 2,
            ..TrainConfig::defaults(Mode::Sab)
        };
        let trainer = Trainer::new(cfg).unwrap();
        let mut inputs = Vec::new();
        let mut classes = Vec::new();
        for _ in 0..6 {
            inputs.push(Tensor::new(
                vec![1, 3],
                (0..3).map(|_| rng.range(-1.0, 1.0)).collect(),
            ));
            classes.push(vec![rng.below(2) as usize]);
        }
        let batch = sab::tasks::Batch {
            inputs,
            targets: Targets::Classes(classes),
            loss_mask: vec![vec![true]; 6],
        };
        let mut seq = SeqState::new(1, 3);
        let mut last = 0;
        for (t0, t1) in [(1, 2), (3, 4), (5, 6)] {
            last = trainer.run_segment(&mut seq, &batch, t0, t1).unwrap();
        }
        let back = trainer.backward_segment(&seq, last).unwrap();
        let seg = seq.segments[last].as_ref().unwrap();
        let mut allowed: std::collections::BTreeSet<usize> = (seg.t_start..=seg.t_end).collect();
        for rec in &seg.records {
            for sel in &rec.selection {
                for &col in &sel.cols {
                    let mid = rec.visible_micros[col];
                    let m = seq.macrostate.iter().find(|m| m.id == mid).unwrap();
                    let owner = seq.segments[m.segment].as_ref().unwrap();
                    allowed.extend(owner.t_start..=owner.t_end);
                }
            }
        }
        for t in 1..=6 {
            if !allowed.contains(&t) && back.input_grads.contains_key(&t) {
                zero_ok = false;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = zero_ok && elapsed < 120.0;
    assert!(
        verdict(
            "3 sparsity-truncation",
            pass,
            &format!("2x10^4 instances, exact zeros {zero_ok}, {elapsed:.1}s")
        ),
        "zero_ok {zero_ok}"
    );
}

// ── 9. Determinism and persistence ──────────────────────────────────

#[test]
fn criterion_9_determinism_persistence() {
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let src = CopyingSource {
        config: CopyingConfig { t_gap: 6 },
        seed: 9,
        batch_size: 3,
        batches_per_epoch: 3,
    };
    let mk = || Trainer::new(toy_config(Mode::Sab, 9, 4, 2)).unwrap();

    // Same-seed runs bit-identical.
    let mut a = mk();
    let mut b = mk();
    a.train_epoch(&src, |_, _| Ok(())).unwrap();
    b.train_epoch(&src, |_, _| Ok(())).unwrap();
    let identical = a
        .params
        .iter()
        .zip(b.params.iter())
        .all(|((_, _, x), (_, _, y))| x.data() == y.data());

    // Checkpoint resume bit-identical to uninterrupted.
    let mut c = mk();
    c.train_epoch(&src, |_, _| Ok(())).unwrap();
    let path = dir.path().join("mid.sabckpt");
    checkpoint::save(&c, &path).unwrap();
    let mut c = checkpoint::load(&path).unwrap();
    c.train_epoch(&src, |_, _| Ok(())).unwrap();
    let mut d = mk();
    d.train_epoch(&src, |_, _| Ok(())).unwrap();
    d.train_epoch(&src, |_, _| Ok(())).unwrap();
    let resume_identical = c
        .params
        .iter()
        .zip(d.params.iter())
        .all(|((_, _, x), (_, _, y))| x.data() == y.data());

    // Dataset dumps byte-identical across runs.
    let dump = |name: &str| {
        let p = dir.path().join(name);
        let batches: Vec<_> = (0..2).map(|k| src.batch(0, k)).collect();
        sab::tasks::dump_batches(&p, &batches, serde_json::json!({"task": "copying"})).unwrap();
        (
            std::fs::read(&p).unwrap(),
            std::fs::read(sab::blobfile::blob_path(&p)).unwrap(),
        )
    };
    let dumps_identical = dump("a.sabdata") == dump("b.sabdata");

    let elapsed = started.elapsed().as_secs_f64();
    let pass = identical && resume_identical && dumps_identical && elapsed < 60.0;
    assert!(
        verdict(
            "9 determinism-persistence",
            pass,
            &format!(
                "same-seed {identical}, resume {resume_identical}, dumps {dumps_identical}, {elapsed:.1}s"
            )
        ),
        "{identical} {resume_identical} {dumps_identical}"
    );
}

// ── Long-running training criteria ──────────────────────────────────
//
// Several CPU-hours each; excluded from the default suite. Run with:
//   cargo test --release --test acceptance -- --ignored --nocapture --test-threads 1

struct CopyRun {
    last10: f64,
    attn_first10: f64,
    updates: u64,
}

/// Train one seed on the copying task, evaluating every `eval_every`
/// batches; stops early once `target_last10` is reached.
fn train_copying(
    mode: Mode,
    t_gap: usize,
    k_trunc: usize,
    k_top: usize,
    seed: u64,
    max_updates: u64,
    target_last10: f64,
) -> CopyRun {
    let cfg = TrainConfig {
        mode,
        k_trunc,
        k_top: if mode == Mode::Sab { k_top } else { 0 },
        k_att: 2,
        n_input: 10,
        n_hidden: 128,
        n_out: 9,
        batch_size: 64,
        seed,
        update_every: k_trunc,
        ..TrainConfig::defaults(mode)
    };
    let src = CopyingSource {
        config: CopyingConfig { t_gap },
        seed,
        batch_size: 64,
        batches_per_epoch: 100,
    };
    let eval: Vec<_> = (0..2).map(|k| src.batch(u64::MAX, k)).collect();
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut best = CopyRun {
        last10: 0.0,
        attn_first10: 0.0,
        updates: 0,
    };
    let mut k = 0u64;
    while trainer.counters.updates < max_updates {
        trainer.train_batch(&src.batch(k / 100, k % 100)).unwrap();
        k += 1;
        if k % 50 == 0 {
            let m = trainer.evaluate(&eval, Some(10)).unwrap();
            let acc = m.acc_last.unwrap_or(0.0);
            if acc > best.last10 {
                best.last10 = acc;
                best.updates = trainer.counters.updates;
            }
            let snap = sab::metrics::record_attention(&trainer, &eval[0], k);
            let answers = answer_window(&CopyingConfig { t_gap });
            let (mut first, mut total) = (0.0, 0.0);
            for (i, row) in snap.matrix.iter().enumerate() {
                if answers.contains(&i) {
                    for (j, &v) in row.iter().enumerate() {
                        total += v;
                        if snap.micro_timesteps[j] <= 10 {
                            first += v;
                        }
                    }
                }
            }
            if total > 0.0 {
                best.attn_first10 = 100.0 * first / total;
            }
            eprintln!(
                "  [{mode:?} T={t_gap} seed {seed}] updates {}: loss {:.4} last10 {:.1}% attn {:.1}%",
                trainer.counters.updates, m.loss, acc, best.attn_first10
            );
            if acc >= target_last10 {
                break;
            }
        }
    }
    best
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

#[test]
#[ignore = "several CPU-hours: copying T=100 training comparison"]
fn criterion_4_copying_t100() {
    let budget = 50_000u64;
    let mut sab_scores = Vec::new();
    let mut tbptt_scores = Vec::new();
    for seed in 1..=3 {
        let s = train_copying(Mode::Sab, 100, 10, 10, seed, budget, 95.0);
        eprintln!("SAB seed {seed}: last10 {:.1}% at {} updates", s.last10, s.updates);
        sab_scores.push(s.last10);
        let t = train_copying(Mode::Tbptt, 100, 10, 0, seed, budget, 101.0);
        eprintln!("TBPTT seed {seed}: last10 {:.1}%", t.last10);
        tbptt_scores.push(t.last10);
    }
    let sab_med = median3(sab_scores);
    let tbptt_med = median3(tbptt_scores);
    let pass = sab_med >= 95.0 && tbptt_med <= 60.0;
    assert!(
        verdict(
            "4 copying-T100",
            pass,
            &format!("median last10: sab {sab_med:.1}%, tbptt {tbptt_med:.1}% (budget {budget} updates)")
        ),
        "sab {sab_med}, tbptt {tbptt_med}"
    );
}

#[test]
#[ignore = "several CPU-hours: copying T=300 separation"]
fn criterion_5_copying_t300_separation() {
    let budget = 30_000u64;
    let mut sab_scores = Vec::new();
    let mut tbptt_scores = Vec::new();
    for seed in 1..=3 {
        let s = train_copying(Mode::Sab, 300, 5, 5, seed, budget, 99.5);
        sab_scores.push(s.last10);
        let t = train_copying(Mode::Tbptt, 300, 20, 0, seed, budget, 101.0);
        tbptt_scores.push(t.last10);
        eprintln!(
            "seed {seed}: sab {:.1}%, tbptt {:.1}%",
            sab_scores.last().unwrap(),
            tbptt_scores.last().unwrap()
        );
    }
    let sab_med = median3(sab_scores);
    let tbptt_med = median3(tbptt_scores);
    let pass = sab_med - tbptt_med >= 30.0;
    assert!(
        verdict(
            "5 copying-T300",
            pass,
            &format!("median last10: sab {sab_med:.1}% vs tbptt {tbptt_med:.1}% (need +30pp)")
        ),
        "sab {sab_med}, tbptt {tbptt_med}"
    );
}

#[test]
#[ignore = "several CPU-hours: adding T=200 regression"]
fn criterion_6_adding_t200() {
    // Monte-Carlo baseline: always predicting 1.0.
    let mut rng = sab::rng::Rng::seeded(606);
    let mut acc = 0.0;
    let n = 100_000;
    for _ in 0..n {
        let s = rng.uniform() + rng.uniform();
        acc += (s - 1.0) * (s - 1.0);
    }
    let baseline = acc / n as f64;

    let mut finals = Vec::new();
    for seed in 1..=3 {
        let cfg = TrainConfig {
            mode: Mode::Sab,
            k_trunc: 10,
            k_top: 10,
            k_att: 2,
            n_input: 2,
            n_hidden: 128,
            n_out: 1,
            batch_size: 64,
            seed,
            update_every: 10,
            ..TrainConfig::defaults(Mode::Sab)
        };
        let src = sab::tasks::AddingSource {
            config: AddingConfig { t_len: 200 },
            seed,
            batch_size: 64,
            batches_per_epoch: 100,
        };
        let eval: Vec<_> = (0..2).map(|k| src.batch(u64::MAX, k)).collect();
        let mut trainer = Trainer::new(cfg).unwrap();
        let mut best = f64::INFINITY;
        for k in 0..6_000u64 {
            trainer.train_batch(&src.batch(k / 100, k % 100)).unwrap();
            if k % 100 == 99 {
                let m = trainer.evaluate(&eval, None).unwrap();
                best = best.min(m.loss);
                eprintln!("  [adding seed {seed}] batch {k}: test mse {:.6}", m.loss);
                if best <= 0.005 {
                    break;
                }
            }
        }
        finals.push(best);
    }
    let med = median3(finals);
    let pass = med <= 0.01 && med <= baseline / 10.0;
    assert!(
        verdict(
            "6 adding-T200",
            pass,
            &format!("median test mse {med:.5}, baseline {baseline:.4} (need <=0.01 and <=baseline/10)")
        ),
        "mse {med}, baseline {baseline}"
    );
}

#[test]
#[ignore = "several CPU-hours: attention localization on copying T=200"]
fn criterion_7_attention_localization() {
    let run = train_copying(Mode::Sab, 200, 10, 10, 1, 50_000, 95.0);
    let pass = run.attn_first10 >= 80.0 && run.last10 >= 95.0;
    assert!(
        verdict(
            "7 attention-localization",
            pass,
            &format!(
                "answer-phase attention mass on first-10 region {:.1}% (converged last10 {:.1}%)",
                run.attn_first10, run.last10
            )
        ),
        "attention {:.1}",
        run.attn_first10
    );
}

#[test]
#[ignore = "long-running; needs MNIST files under $SAB_MNIST_DIR"]
fn criterion_8_sequential_mnist() {
    let Some(dir) = std::env::var_os("SAB_MNIST_DIR") else {
        panic!(
            "set SAB_MNIST_DIR to a directory with train-images-idx3-ubyte / \
             train-labels-idx1-ubyte, or use: sab train --task mnist --data-dir <dir> \
             --mode sab --k-trunc 10 --k-top 10 --k-att 10 --hidden-size 128 --epochs 20"
        );
    };
    let dir = std::path::PathBuf::from(dir);
    let data = std::sync::Arc::new(
        sab::tasks::load_mnist_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )
        .unwrap(),
    );
    let n = data.images.len();
    let holdout = n.min(10_000);
    let train = sab::tasks::MnistSource {
        data: std::sync::Arc::clone(&data),
        range: 0..n - holdout,
        batch_size: 64,
        seed: 1,
    };
    let valid_src = sab::tasks::MnistSource {
        data,
        range: n - holdout..n,
        batch_size: 64,
        seed: 1,
    };
    let eval: Vec<_> = (0..16.min(valid_src.batches_per_epoch()) as u64)
        .map(|k| valid_src.batch(0, k))
        .collect();
    let cfg = TrainConfig {
        mode: Mode::Sab,
        k_trunc: 10,
        k_top: 10,
        k_att: 10,
        n_input: 1,
        n_hidden: 128,
        n_out: 10,
        batch_size: 64,
        seed: 1,
        update_every: 10,
        max_epochs: 20,
        ..TrainConfig::defaults(Mode::Sab)
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut best = 0.0f64;
    for epoch in 0..20 {
        trainer.train_epoch(&train, |_, _| Ok(())).unwrap();
        let m = trainer.evaluate(&eval, None).unwrap();
        best = best.max(m.accuracy.unwrap_or(0.0));
        eprintln!("  [mnist] epoch {epoch}: valid acc {:.2}%", m.accuracy.unwrap());
        if best >= 85.0 {
            break;
        }
    }
    assert!(
        verdict("8 mnist-smoke", best >= 85.0, &format!("best valid acc {best:.2}%")),
        "{best}"
    );
}
