//! Whole-pipeline gradient verification.
//!
//! The training backward differentiates a gated objective: chain
//! gradients stop at segment boundaries, sparsification thresholds and
//! selections are discrete decisions, and attention references inside an
//! attended segment stay frozen at their stored values. The checker
//! rebuilds exactly that function from cached decisions — per segment, a
//! replay from the cached boundary with frozen selections, with attended
//! external microstates recomputed one level deep through their own
//! segments — and compares its central differences against the analytic
//! gradients accumulated over every segment.
//!
//! Coordinates whose perturbation changes any live selection set are
//! skipped: across such a boundary the two-sided quotient does not
//! estimate the gated gradient.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::SabModel;
use crate::reference::{self, InferState};
use crate::rng::Rng;
use crate::tasks::{Batch, Targets};
use crate::tensor::{
    finite_diff_check, CheckConfig, CheckReport, ParamId, Tensor,
};
use crate::train::{Mode, SeqState, StepRecord, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    pub n_hidden: usize,
    pub t_len: usize,
    pub k_att: usize,
    pub k_top: usize,
    pub k_trunc: usize,
    pub batch: usize,
    pub n_input: usize,
    pub n_out: usize,
    pub eps: f64,
    /// Nonzero corrupts the tanh backward rule so the check must fail.
    pub tanh_skew: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            n_hidden: 8,
            t_len: 12,
            k_att: 2,
            k_top: 2,
            k_trunc: 3,
            batch: 2,
            n_input: 4,
            n_out: 3,
            eps: 1e-5,
            tanh_skew: 0.0,
        }
    }
}

/// A random full-mask classification batch for the check.
fn random_batch(settings: &GradCheckSettings, seed: u64) -> Batch {
    let mut rng = Rng::stream(seed, 0xDA7A);
    let b = settings.batch;
    let mut inputs = Vec::with_capacity(settings.t_len);
    let mut classes = Vec::with_capacity(settings.t_len);
    for _ in 0..settings.t_len {
        inputs.push(Tensor::new(
            vec![b, settings.n_input],
            (0..b * settings.n_input)
                .map(|_| rng.range(-1.0, 1.0))
                .collect(),
        ));
        classes.push((0..b).map(|_| rng.below(settings.n_out as u64) as usize).collect());
    }
    Batch {
        inputs,
        targets: Targets::Classes(classes),
        loss_mask: vec![vec![true; b]; settings.t_len],
    }
}

struct SegReplay {
    boundary_h: Tensor,
    boundary_c: Tensor,
    records: Vec<StepRecord>,
}

struct ReplaySpec {
    segments: Vec<SegReplay>,
    /// Microstate id -> (originating segment, stored value).
    micro_origin: HashMap<u64, usize>,
    micro_cached: HashMap<u64, Tensor>,
    inputs: Vec<Tensor>,
    classes: Vec<Vec<usize>>,
    k_top: usize,
}

struct ParamView<'a> {
    p: &'a [Tensor],
    model: &'a SabModel,
}

impl ParamView<'_> {
    fn get(&self, id: ParamId) -> &Tensor {
        &self.p[id.0]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn ce_row(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Replay one segment from its cached boundary with frozen selections.
/// Microstate references resolve to values created earlier in this very
/// replay when possible, otherwise through `fallback`. Returns the loss
/// sum and the values of the microstates the replay created.
fn replay_segment(
    view: &ParamView,
    spec: &ReplaySpec,
    seg: &SegReplay,
    fallback: &HashMap<u64, Tensor>,
) -> (f64, HashMap<u64, Tensor>) {
    let model = view.model;
    let w_state = view.get(model.attn.score_state);
    let batch = seg.boundary_h.rows();
    let n_h = model.n_hidden;

    let mut h = seg.boundary_h.clone();
    let mut c = seg.boundary_c.clone();
    let mut local: HashMap<u64, Tensor> = HashMap::new();
    let mut loss = 0.0;

    for rec in &seg.records {
        let x = &spec.inputs[rec.t - 1];
        let (h_hat, c_new) = reference::lstm_cell(
            view.get(model.lstm.w_input),
            view.get(model.lstm.w_hidden),
            view.get(model.lstm.bias),
            x,
            &h,
            &c,
        );
        c = c_new;

        let stored = h_hat.clone();
        let (h_new, attn) = if rec.selection.is_empty() {
            (h_hat, None)
        } else {
            let mut attn = vec![0.0; batch * spec.k_top];
            let mut summed = h_hat.clone();
            let sd = summed.data_mut();
            for (b, sel) in rec.selection.iter().enumerate() {
                for (slot, &col) in sel.cols.iter().enumerate() {
                    let id = rec.visible_micros[col];
                    let m = local
                        .get(&id)
                        .or_else(|| fallback.get(&id))
                        .unwrap_or_else(|| &spec.micro_cached[&id]);
                    let w = dot(w_state.data(), m.row(b)) - sel.tau;
                    attn[b * spec.k_top + slot] = w;
                    for (s, &mv) in sd[b * n_h..(b + 1) * n_h].iter_mut().zip(m.row(b)) {
                        *s += w * mv;
                    }
                }
            }
            (summed, Some(Tensor::new(vec![batch, spec.k_top], attn)))
        };
        h = h_new;

        let y = reference::output_dense(
            view.get(model.attn.out_state),
            view.get(model.attn.out_attn),
            view.get(model.attn.out_bias),
            &h,
            attn.as_ref(),
        );
        for b in 0..batch {
            loss += ce_row(y.row(b), spec.classes[rec.t - 1][b]);
        }

        if let Some(id) = rec.created_micro {
            local.insert(id, stored.clone());
        }
    }
    (loss, local)
}

/// The gated objective: sum over segments of the replayed masked loss,
/// attended external microstates recomputed one level deep.
fn eval_gated(spec: &ReplaySpec, view: &ParamView) -> f64 {
    let mut total = 0.0;
    for (j, seg) in spec.segments.iter().enumerate() {
        // External microstates this segment's selections touch.
        let mut needed: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
        for rec in &seg.records {
            for sel in &rec.selection {
                for &col in &sel.cols {
                    let id = rec.visible_micros[col];
                    let origin = spec.micro_origin[&id];
                    if origin != j {
                        needed.entry(origin).or_default().insert(id);
                    }
                }
            }
        }
        // One-level recompute: replay each origin from its boundary with
        // its own references frozen at stored values.
        let mut ext: HashMap<u64, Tensor> = HashMap::new();
        for (&origin, ids) in &needed {
            let (_, created) = replay_segment(view, spec, &spec.segments[origin], &HashMap::new());
            for id in ids {
                ext.insert(*id, created[id].clone());
            }
        }
        let (loss, _) = replay_segment(view, spec, seg, &ext);
        total += loss;
    }
    total
}

/// Fingerprint of the live selection sets over the whole sequence.
fn live_signature(
    base: &crate::nn::ParamSet,
    model: &SabModel,
    batch: &Batch,
    k_att: usize,
    values: &[Tensor],
) -> u64 {
    let mut params = base.clone();
    for (i, t) in values.iter().enumerate() {
        params.set(ParamId(i), t.clone());
    }
    let b = batch.batch_size();
    let mut state = InferState::new(b, model.n_hidden);
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut mix = |v: u64| {
        hash = (hash ^ v).wrapping_mul(0x0000_0100_0000_01b3);
    };
    for x in &batch.inputs {
        let out = reference::infer_step(&params, model, &mut state, x, k_att);
        for sel in &out.selection {
            for &c in &sel.cols {
                mix(c as u64 + 1);
            }
            mix(0);
        }
        mix(u64::MAX);
    }
    hash
}

/// Run the full-pipeline gradient check at the given toy sizes and seed.
pub fn sab_gradient_check(settings: &GradCheckSettings, seed: u64) -> Result<CheckReport> {
    let config = TrainConfig {
        mode: Mode::Sab,
        k_trunc: settings.k_trunc,
        k_top: settings.k_top,
        k_att: settings.k_att,
        n_input: settings.n_input,
        n_hidden: settings.n_hidden,
        n_out: settings.n_out,
        batch_size: settings.batch,
        seed,
        update_every: settings.k_trunc,
        ..TrainConfig::defaults(Mode::Sab)
    };
    let mut trainer = Trainer::new(config)?;
    trainer.tanh_backward_skew = settings.tanh_skew;
    let batch = random_batch(settings, seed);

    // Forward the whole sequence and accumulate the analytic gradient over
    // every segment, with no parameter updates in between.
    let mut seq = SeqState::new(settings.batch, settings.n_hidden);
    let mut analytic = crate::nn::GradMap::zeros_like(&trainer.params);
    let mut t = 1;
    while t <= settings.t_len {
        let t_end = (t + settings.k_trunc - 1).min(settings.t_len);
        let index = trainer.run_segment(&mut seq, &batch, t, t_end)?;
        let back = trainer.backward_segment(&seq, index)?;
        for (id, g) in back.grads.iter() {
            analytic.accumulate(id, g.data());
        }
        t = t_end + 1;
    }

    // Freeze the decisions the forward made.
    let mut segments = Vec::new();
    for seg in seq.segments.iter() {
        let seg = seg
            .as_ref()
            .ok_or_else(|| Error::Internal("segment freed during gradcheck".into()))?;
        segments.push(SegReplay {
            boundary_h: seg.boundary_h.clone(),
            boundary_c: seg.boundary_c.clone(),
            records: seg.records.clone(),
        });
    }
    let mut micro_origin = HashMap::new();
    let mut micro_cached = HashMap::new();
    for m in seq.macrostate.iter() {
        micro_origin.insert(m.id, m.segment);
        micro_cached.insert(m.id, m.value.clone());
    }
    let Targets::Classes(classes) = &batch.targets else {
        return Err(Error::Usage("gradient check expects a classification batch".into()));
    };
    let spec = ReplaySpec {
        segments,
        micro_origin,
        micro_cached,
        inputs: batch.inputs.clone(),
        classes: classes.clone(),
        k_top: settings.k_top,
    };

    let named: Vec<(String, Tensor)> = trainer
        .params
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect();
    let analytic_tensors: Vec<Tensor> = trainer
        .params
        .iter()
        .map(|(id, _, _)| analytic.get(id).clone())
        .collect();

    let model = trainer.model;
    let f = |ps: &[Tensor]| {
        let view = ParamView { p: ps, model: &model };
        eval_gated(&spec, &view)
    };
    let base_params = trainer.params.clone();
    let k_att = settings.k_att;
    let sig = |ps: &[Tensor]| live_signature(&base_params, &model, &batch, k_att, ps);

    Ok(finite_diff_check(
        &named,
        &analytic_tensors,
        f,
        sig,
        &CheckConfig {
            eps: settings.eps,
            ..CheckConfig::default()
        },
    ))
}
