//! Attention-mechanism contracts at the step level, and metric baselines
//! computed against direct counting oracles.

use sab::attention::{output_head, sab_step, StepVars};
use sab::metrics::{masked_ce, sequence_accuracy};
use sab::model::SabModel;
use sab::nn::ParamSet;
use sab::rng::Rng;
use sab::tasks::{gen_copying, CopyingConfig, Targets};
use sab::tensor::{Tape, Tensor, Var};

fn enter(params: &ParamSet, model: &SabModel, tape: &mut Tape) -> StepVars {
    model.enter(params, tape)
}

#[test]
fn first_step_with_empty_macrostate_is_plain_lstm_plus_head() {
    let mut params = ParamSet::new();
    let model = SabModel::init(&mut params, 3, 4, 6, 3, 2);
    let mut tape = Tape::new();
    let vars = enter(&params, &model, &mut tape);
    let x = tape.leaf(Tensor::matrix(2, 4, vec![0.3; 8]));
    let h0 = tape.constant(Tensor::zeros(vec![2, 6]));
    let c0 = tape.constant(Tensor::zeros(vec![2, 6]));
    let mut cache = Vec::new();
    let out = sab_step(&mut tape, &vars, x, h0, c0, &[], &mut cache, 2).unwrap();
    // No history: the final state IS the provisional state.
    assert_eq!(tape.value(out.h), tape.value(out.h_hat));
    assert!(out.selection.is_empty());

    // And the output is exactly the hidden head with no attention term.
    let y_ref = output_head(&mut tape, out.h_hat, None, &vars).unwrap();
    assert_eq!(tape.value(out.y), tape.value(y_ref));
}

#[test]
fn output_head_with_zero_state_weight_reads_only_attention() {
    let mut params = ParamSet::new();
    let model = SabModel::init(&mut params, 5, 4, 6, 3, 2);
    // Zero out the hidden-state head.
    let zero = Tensor::zeros(vec![3, 6]);
    params.set(model.attn.out_state, zero);

    let mut tape = Tape::new();
    let vars = enter(&params, &model, &mut tape);
    let h = tape.leaf(Tensor::matrix(1, 6, vec![0.5; 6]));
    let w = tape.leaf(Tensor::matrix(1, 2, vec![1.5, 0.25]));
    let y = output_head(&mut tape, h, Some(w), &vars).unwrap();
    // Change h: the output must not move.
    let h2 = tape.leaf(Tensor::matrix(1, 6, vec![-2.0; 6]));
    let y2 = output_head(&mut tape, h2, Some(w), &vars).unwrap();
    assert_eq!(tape.value(y), tape.value(y2));
}

#[test]
fn output_head_attention_columns_commute_with_slot_permutation() {
    // Permuting the attention weight slots together with the matching
    // columns of the attention head leaves the output unchanged.
    let mut rng = Rng::seeded(8);
    let (n_out, k) = (3usize, 4usize);
    let v2: Vec<f64> = (0..n_out * k).map(|_| rng.range(-1.0, 1.0)).collect();
    let w: Vec<f64> = (0..k).map(|_| rng.range(0.0, 2.0)).collect();
    let perm = [2usize, 0, 3, 1];

    let eval = |v2: &[f64], w: &[f64]| -> Tensor {
        let mut tape = Tape::new();
        let wv = tape.leaf(Tensor::matrix(1, k, w.to_vec()));
        let v2v = tape.leaf(Tensor::matrix(n_out, k, v2.to_vec()));
        let y = tape.matmul_nt(wv, v2v).unwrap();
        tape.value(y).clone()
    };

    let base = eval(&v2, &w);
    let mut v2p = vec![0.0; n_out * k];
    let mut wp = vec![0.0; k];
    for (new_slot, &old_slot) in perm.iter().enumerate() {
        wp[new_slot] = w[old_slot];
        for r in 0..n_out {
            v2p[r * k + new_slot] = v2[r * k + old_slot];
        }
    }
    let permuted = eval(&v2p, &wp);
    for (a, b) in base.data().iter().zip(permuted.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn uniform_random_predictions_score_one_ninth_on_last_ten() {
    // Monte-Carlo oracle: argmax of random 9-class logits matches a
    // random target about 1/9 of the time.
    let mut rng = Rng::seeded(99);
    let cfg = CopyingConfig { t_gap: 20 };
    let mut hits = 0usize;
    let mut total = 0usize;
    for seed in 0..200 {
        let batch = gen_copying(seed, &cfg, 10);
        let Targets::Classes(targets) = &batch.targets else {
            panic!()
        };
        let len = batch.steps();
        for t in len - 10..len {
            for e in 0..10 {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..9 {
                    let v = rng.uniform();
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                if best == targets[t][e] {
                    hits += 1;
                }
                total += 1;
            }
        }
    }
    let acc = 100.0 * hits as f64 / total as f64;
    assert!((acc - 100.0 / 9.0).abs() < 1.5, "acc {acc}");
}

#[test]
fn all_blank_predictor_shows_why_last_ten_is_the_discriminator() {
    // A predictor that always answers "blank" looks strong on the full
    // mask and scores zero on the answer window.
    let cfg = CopyingConfig { t_gap: 100 };
    let batch = gen_copying(5, &cfg, 8);
    let Targets::Classes(targets) = &batch.targets else {
        panic!()
    };
    let len = batch.steps();
    let mut blank_logits = vec![0.0; 9];
    blank_logits[0] = 10.0;
    let logits: Vec<Tensor> = (0..len)
        .map(|_| {
            Tensor::matrix(
                8,
                9,
                (0..8).flat_map(|_| blank_logits.clone()).collect(),
            )
        })
        .collect();
    let full_mask = vec![vec![true; 8]; len];
    let full = sequence_accuracy(&logits, targets, &full_mask).unwrap();
    let mut last_mask = vec![vec![false; 8]; len];
    for row in last_mask.iter_mut().skip(len - 10) {
        row.fill(true);
    }
    let last = sequence_accuracy(&logits, targets, &last_mask).unwrap();
    // 110 of 120 positions are blank.
    assert!((full - 100.0 * 110.0 / 120.0).abs() < 1e-9, "full {full}");
    assert_eq!(last, 0.0);

    // The same predictor's confident wrong answers also show up in the
    // masked cross-entropy.
    let ce_last = masked_ce(&logits, targets, &last_mask).unwrap();
    assert!(ce_last > 5.0, "{ce_last}");
}

#[test]
fn attention_weights_are_query_offset_invariant() {
    // Adding any per-row constant to all scores changes neither the
    // selection nor the sparse weights: the threshold subtraction
    // removes it. This is why the sparse weights carry no query signal.
    let mut rng = Rng::seeded(4);
    for _ in 0..200 {
        let m = 2 + rng.below(10) as usize;
        let k = 1 + rng.below(4) as usize;
        let scores: Vec<f64> = (0..m).map(|_| rng.range(-2.0, 2.0)).collect();
        let offset = rng.range(-5.0, 5.0);
        let shifted: Vec<f64> = scores.iter().map(|&v| v + offset).collect();

        let run = |s: &[f64]| {
            let mut tape = Tape::new();
            let sv: Var = tape.leaf(Tensor::matrix(1, s.len(), s.to_vec()));
            let (w, sel) = tape.topk_select(sv, k).unwrap();
            (sel[0].cols.clone(), tape.value(w).data().to_vec())
        };
        let (cols_a, w_a) = run(&scores);
        let (cols_b, w_b) = run(&shifted);
        assert_eq!(cols_a, cols_b);
        for (x, y) in w_a.iter().zip(&w_b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y} offset {offset}");
        }
    }
}

#[test]
fn lstm_step_matches_independent_cell_oracle() {
    // Random small instance: the tape path against the independently
    // coded plain cell.
    let mut rng = Rng::seeded(21);
    let (n_x, n_h, b) = (3usize, 5usize, 2usize);
    let rand = |rng: &mut Rng, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.range(-1.0, 1.0)).collect())
    };
    let w_input = rand(&mut rng, vec![4 * n_h, n_x]);
    let w_hidden = rand(&mut rng, vec![4 * n_h, n_h]);
    let bias = rand(&mut rng, vec![4 * n_h]);
    let x = rand(&mut rng, vec![b, n_x]);
    let h_prev = rand(&mut rng, vec![b, n_h]);
    let c_prev = rand(&mut rng, vec![b, n_h]);

    let mut tape = Tape::new();
    let wi = tape.leaf(w_input.clone());
    let wh = tape.leaf(w_hidden.clone());
    let bv = tape.leaf(bias.clone());
    let xv = tape.leaf(x.clone());
    let hv = tape.leaf(h_prev.clone());
    let cv = tape.leaf(c_prev.clone());
    let (h, c) = sab::nn::lstm_step(&mut tape, wi, wh, bv, xv, hv, cv).unwrap();

    let (h_ref, c_ref) = sab::reference::lstm_cell(&w_input, &w_hidden, &bias, &x, &h_prev, &c_prev);
    for (a, b) in tape.value(h).data().iter().zip(h_ref.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in tape.value(c).data().iter().zip(c_ref.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn worked_figure_wiring_three_selected_microstates() {
    // k_top = 3, k_att = 1, truncation 2: at a step with at least three
    // stored microstates and distinct scores, exactly three are summed
    // into the final hidden state.
    let mut params = ParamSet::new();
    let model = SabModel::init(&mut params, 11, 2, 4, 2, 3);
    let mut tape = Tape::new();
    let vars = enter(&params, &model, &mut tape);
    let mut h = tape.constant(Tensor::zeros(vec![1, 4]));
    let mut c = tape.constant(Tensor::zeros(vec![1, 4]));
    let mut micro_vars: Vec<Var> = Vec::new();
    let mut cache = Vec::new();
    let mut rng = Rng::seeded(2);
    let mut last = None;
    for t in 1..=6 {
        let x = tape.leaf(Tensor::matrix(1, 2, vec![rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)]));
        let out = sab_step(&mut tape, &vars, x, h, c, &micro_vars, &mut cache, 3).unwrap();
        h = out.h;
        c = out.c;
        // k_att = 1: every step's provisional state joins the pool.
        micro_vars.push(out.h_hat);
        cache.push(None);
        last = Some(out);
    }
    let out = last.unwrap();
    assert_eq!(out.selection.len(), 1);
    assert_eq!(out.selection[0].cols.len(), 3);
    // The final hidden state is the provisional state plus the weighted
    // sum of exactly those three microstates.
    let weights = tape.value(out.attn_weights.unwrap()).clone();
    let mut expect = tape.value(out.h_hat).data().to_vec();
    for (slot, &col) in out.selection[0].cols.iter().enumerate() {
        let m = tape.value(micro_vars[col]);
        for (e, &mv) in expect.iter_mut().zip(m.row(0)) {
            *e += weights.at(0, slot) * mv;
        }
    }
    for (a, b) in tape.value(out.h).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn snapshot_with_zero_k_top_is_all_zero_and_row_counted() {
    use sab::metrics::record_attention;
    use sab::train::{Mode, TrainConfig, Trainer};
    let cfg = TrainConfig {
        mode: Mode::Sab,
        k_trunc: 4,
        k_top: 0,
        k_att: 2,
        n_input: 10,
        n_hidden: 6,
        n_out: 9,
        batch_size: 2,
        seed: 3,
        update_every: 4,
        ..TrainConfig::defaults(Mode::Sab)
    };
    let trainer = Trainer::new(cfg).unwrap();
    let batch = gen_copying(1, &CopyingConfig { t_gap: 4 }, 2);
    let snap = record_attention(&trainer, &batch, 7);
    assert_eq!(snap.matrix.len(), batch.steps());
    assert!(snap.matrix.iter().flatten().all(|&v| v == 0.0));
    assert_eq!(snap.iteration, 7);
}
