//! Training orchestration over long sequences.
//!
//! A sequence is processed in segments of at most `k_trunc` steps. Each
//! segment records its own retained tape; the hidden and cell values
//! carried across the boundary pass through gradient gates, so chain
//! gradients never leave a segment. Under sparse attentive backtracking,
//! microstates referenced by a later segment enter that segment's tape as
//! value leaves; after the segment's own backward pass, the gradients
//! deposited on those leaves are pushed into the originating segments'
//! tapes and propagated there, up to those segments' own boundary gates.
//! Attention references found inside an attended segment are leaves of
//! that tape, so the expansion is one level deep; the optional recursive
//! mode re-seeds through them transitively instead.
//!
//! Targets are always taken from the data (teacher forcing); the model's
//! own outputs are never fed back as inputs.

pub mod checkpoint;
mod gradcheck;

pub use gradcheck::{sab_gradient_check, GradCheckSettings};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{eligible, sab_step, Macrostate, Microstate, StepOutput};
use crate::error::{Error, Result};
use crate::model::SabModel;
use crate::nn::{clip_gradients, lstm_step, AdamState, GradMap, ParamSet};
use crate::tasks::{Batch, BatchSource, Targets};
use crate::tensor::{RowSelection, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full backpropagation through time: one segment per sequence.
    Bptt,
    /// Truncated backpropagation: fixed windows, no attention.
    Tbptt,
    /// Sparse attentive backtracking.
    Sab,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Truncation window length in timesteps.
    pub k_trunc: usize,
    /// Microstates selected per step.
    pub k_top: usize,
    /// Every k_att-th hidden state becomes a microstate.
    pub k_att: usize,
    pub n_input: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Batches between metric rows during training (0: epoch end only).
    pub eval_every: usize,
    /// Timesteps between optimizer steps.
    pub update_every: usize,
    /// Sequences per epoch for generated tasks.
    pub batches_per_epoch: usize,
    /// Follow attention references found inside attended segments too.
    pub recursive_backtrack: bool,
    /// Oldest-first eviction bound on the macrostate; unbounded if unset.
    pub macrostate_capacity: Option<usize>,
}

impl TrainConfig {
    /// Baseline configuration; fields mirror the command-line flags.
    pub fn defaults(mode: Mode) -> Self {
        TrainConfig {
            mode,
            k_trunc: 10,
            k_top: 10,
            k_att: 2,
            n_input: 1,
            n_hidden: 128,
            n_out: 1,
            lr: 0.001,
            clip_norm: 1.0,
            batch_size: 64,
            seed: 0,
            max_epochs: 10,
            eval_every: 0,
            update_every: 10,
            batches_per_epoch: 100,
            recursive_backtrack: false,
            macrostate_capacity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(msg));
        if self.k_trunc == 0 {
            return bad("k_trunc must be positive".into());
        }
        if self.k_att == 0 {
            return bad("k_att must be positive".into());
        }
        if self.n_input == 0 || self.n_hidden == 0 || self.n_out == 0 || self.batch_size == 0 {
            return bad("sizes must be positive".into());
        }
        if self.update_every == 0 {
            return bad("update_every must be positive".into());
        }
        if let Some(cap) = self.macrostate_capacity {
            if self.k_top > cap {
                return bad(format!(
                    "k_top {} exceeds macrostate capacity {}",
                    self.k_top, cap
                ));
            }
        }
        Ok(())
    }
}

/// Selection record for one step of a segment.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    /// Per-row selection; column indices refer to `visible_micros`.
    pub selection: Vec<RowSelection>,
    /// Microstate ids scorable at this step, in macrostate order.
    pub visible_micros: Vec<u64>,
    pub created_micro: Option<u64>,
}

/// Retained graph for one truncation window.
pub struct SegmentGraph {
    pub tape: Tape,
    pub index: usize,
    /// 1-based inclusive timestep range.
    pub t_start: usize,
    pub t_end: usize,
    /// Microstates created inside this segment: id -> node.
    micro_nodes: BTreeMap<u64, Var>,
    /// References to older segments' microstates: (id, origin segment, leaf).
    ext_leaves: Vec<(u64, usize, Var)>,
    /// Per-step masked loss sums (scalar nodes).
    pub losses: Vec<Var>,
    pub mask_count: usize,
    pub records: Vec<StepRecord>,
    /// Input leaves per timestep, for querying input gradients.
    input_leaves: Vec<(usize, Var)>,
    pub boundary_h: Tensor,
    pub boundary_c: Tensor,
    pub final_h: Tensor,
    pub final_c: Tensor,
}

impl SegmentGraph {
    pub fn owns_micros(&self) -> bool {
        !self.micro_nodes.is_empty()
    }

    pub fn loss_value(&self) -> f64 {
        self.losses.iter().map(|&l| self.tape.value(l).item()).sum()
    }
}

/// Per-sequence state: running values, the macrostate, and the retained
/// segment graphs.
pub struct SeqState {
    pub h: Tensor,
    pub c: Tensor,
    pub macrostate: Macrostate,
    pub segments: Vec<Option<SegmentGraph>>,
    pub t: usize,
    next_micro_id: u64,
}

impl SeqState {
    pub fn new(batch: usize, n_hidden: usize) -> Self {
        SeqState {
            h: Tensor::zeros(vec![batch, n_hidden]),
            c: Tensor::zeros(vec![batch, n_hidden]),
            macrostate: Macrostate::new(),
            segments: Vec::new(),
            t: 0,
            next_micro_id: 0,
        }
    }

    pub fn retained_segments(&self) -> usize {
        self.segments.iter().filter(|s| s.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub sequences: u64,
    pub updates: u64,
    pub timesteps: u64,
}

/// Everything one segment-level backward produced: parameter gradients,
/// the masked-position count behind them, and the gradients that reached
/// the inputs of any timestep (absent timesteps received exactly zero).
pub struct SegmentBackward {
    pub grads: GradMap,
    pub mask_count: usize,
    pub input_grads: BTreeMap<usize, Tensor>,
}

impl SegmentBackward {
    fn collect_inputs(&mut self, seg: &SegmentGraph, grads: &crate::tensor::Gradients) {
        for &(t, leaf) in &seg.input_leaves {
            if let Some(g) = grads.wrt(leaf) {
                match self.input_grads.get_mut(&t) {
                    Some(acc) => {
                        let buf = acc.data_mut();
                        for (b, &v) in buf.iter_mut().zip(g) {
                            *b += v;
                        }
                    }
                    None => {
                        self.input_grads
                            .insert(t, Tensor::new(seg.tape.shape(leaf).to_vec(), g.to_vec()));
                    }
                }
            }
        }
    }
}

pub struct Trainer {
    pub params: ParamSet,
    pub model: SabModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub counters: Counters,
    /// Skew injected into the tanh backward rule of every segment tape;
    /// zero in real training. The gradient checker flips this on to prove
    /// it detects a broken rule.
    pub tanh_backward_skew: f64,
    pending: GradMap,
    pending_count: usize,
    steps_since_update: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let model = SabModel::init(
            &mut params,
            config.seed,
            config.n_input,
            config.n_hidden,
            config.n_out,
            config.k_top,
        );
        let adam = AdamState::new(&params);
        let pending = GradMap::zeros_like(&params);
        Ok(Trainer {
            params,
            model,
            adam,
            config,
            counters: Counters::default(),
            tanh_backward_skew: 0.0,
            pending,
            pending_count: 0,
            steps_since_update: 0,
        })
    }

    /// Forward one segment, recording its retained graph. Timesteps are
    /// 1-based and `t_start..=t_end` must continue exactly where the
    /// sequence state left off.
    pub fn run_segment(
        &self,
        seq: &mut SeqState,
        batch: &Batch,
        t_start: usize,
        t_end: usize,
    ) -> Result<usize> {
        if t_start != seq.t + 1 || t_end < t_start || t_end > batch.steps() {
            return Err(Error::Usage(format!(
                "segment range {t_start}..={t_end} does not follow step {}",
                seq.t
            )));
        }
        if t_end - t_start + 1 > self.config.k_trunc && self.config.mode != Mode::Bptt {
            return Err(Error::Usage(format!(
                "segment of {} steps exceeds k_trunc {}",
                t_end - t_start + 1,
                self.config.k_trunc
            )));
        }
        let index = seq.segments.len();
        let sab = self.config.mode == Mode::Sab;
        let mut tape = Tape::new();
        tape.set_tanh_backward_skew(self.tanh_backward_skew);
        let vars = self.model.enter(&self.params, &mut tape);

        let boundary_h = seq.h.clone();
        let boundary_c = seq.c.clone();
        let h_leaf = tape.leaf(boundary_h.clone());
        let c_leaf = tape.leaf(boundary_c.clone());
        let mut h = tape.stop_gradient(h_leaf);
        let mut c = tape.stop_gradient(c_leaf);

        // Existing microstates enter as value leaves; their gradients are
        // routed to the originating segments after backward.
        let mut micro_vars: Vec<Var> = Vec::new();
        let mut micro_ids: Vec<u64> = Vec::new();
        let mut score_cache: Vec<Option<Var>> = Vec::new();
        let mut ext_leaves = Vec::new();
        if sab {
            for m in seq.macrostate.iter() {
                let leaf = tape.leaf(m.value.clone());
                ext_leaves.push((m.id, m.segment, leaf));
                micro_vars.push(leaf);
                micro_ids.push(m.id);
                score_cache.push(None);
            }
        }

        let mut micro_nodes = BTreeMap::new();
        let mut losses = Vec::new();
        let mut mask_count = 0usize;
        let mut records = Vec::new();
        let mut input_leaves = Vec::new();

        for t in t_start..=t_end {
            let x = tape.leaf(batch.inputs[t - 1].clone());
            input_leaves.push((t, x));
            let visible = micro_ids.clone();
            let out = if sab {
                sab_step(
                    &mut tape,
                    &vars,
                    x,
                    h,
                    c,
                    &micro_vars,
                    &mut score_cache,
                    self.config.k_top,
                )?
            } else {
                let (h_hat, c_new) = lstm_step(
                    &mut tape,
                    vars.w_input,
                    vars.w_hidden,
                    vars.lstm_bias,
                    x,
                    h,
                    c,
                )?;
                let y = crate::attention::output_head(&mut tape, h_hat, None, &vars)?;
                StepOutput {
                    h: h_hat,
                    h_hat,
                    c: c_new,
                    y,
                    selection: Vec::new(),
                    attn_weights: None,
                }
            };
            h = out.h;
            c = out.c;
            if !tape.value(h).data().iter().all(|v| v.is_finite()) {
                return Err(Error::Internal(format!(
                    "hidden state diverged at timestep {t}"
                )));
            }

            let mask_row = &batch.loss_mask[t - 1];
            let n_masked = mask_row.iter().filter(|&&m| m).count();
            if n_masked > 0 {
                let loss = match &batch.targets {
                    Targets::Classes(classes) => {
                        let ce = tape.softmax_ce_rows(out.y, &classes[t - 1])?;
                        let mask = tape.constant(Tensor::vector(
                            mask_row.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                        ));
                        let masked = tape.mul(ce, mask)?;
                        tape.sum(masked)
                    }
                    Targets::Regression(target) => {
                        let tv = tape.constant(target.clone());
                        let diff = tape.sub(out.y, tv)?;
                        let sq = tape.mul(diff, diff)?;
                        let mask = tape.constant(Tensor::new(
                            vec![mask_row.len(), 1],
                            mask_row.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                        ));
                        let masked = tape.mul(sq, mask)?;
                        tape.sum(masked)
                    }
                };
                losses.push(loss);
                mask_count += n_masked;
            }

            let mut created = None;
            if sab && eligible(t, self.config.k_att) {
                let id = seq.next_micro_id;
                seq.next_micro_id += 1;
                seq.macrostate.push(Microstate {
                    id,
                    value: tape.value(out.h_hat).clone(),
                    timestep: t,
                    segment: index,
                });
                micro_vars.push(out.h_hat);
                micro_ids.push(id);
                score_cache.push(None);
                micro_nodes.insert(id, out.h_hat);
                created = Some(id);
            }
            records.push(StepRecord {
                t,
                selection: out.selection,
                visible_micros: visible,
                created_micro: created,
            });
        }

        seq.h = tape.value(h).clone();
        seq.c = tape.value(c).clone();
        seq.t = t_end;
        seq.segments.push(Some(SegmentGraph {
            tape,
            index,
            t_start,
            t_end,
            micro_nodes,
            ext_leaves,
            losses,
            mask_count,
            records,
            input_leaves,
            boundary_h,
            boundary_c,
            final_h: seq.h.clone(),
            final_c: seq.c.clone(),
        }));
        Ok(index)
    }

    /// Backward for one segment's losses, routing attention-edge
    /// gradients into the originating segments.
    pub fn backward_segment(&self, seq: &SeqState, index: usize) -> Result<SegmentBackward> {
        let seg = seq.segments[index]
            .as_ref()
            .ok_or_else(|| Error::Internal(format!("segment {index} already freed")))?;
        let mut out = SegmentBackward {
            grads: GradMap::zeros_like(&self.params),
            mask_count: seg.mask_count,
            input_grads: BTreeMap::new(),
        };
        if seg.losses.is_empty() {
            return Ok(out);
        }
        let seeds: Vec<(Var, Vec<f64>)> =
            seg.losses.iter().map(|&l| (l, vec![1.0])).collect();
        let grads = seg.tape.backward_seeded(&seeds)?;
        out.grads.add_from(&grads);
        out.collect_inputs(seg, &grads);

        // Cotangents waiting per origin segment, keyed by node for
        // deterministic accumulation order.
        let mut queue: BTreeMap<usize, BTreeMap<Var, Vec<f64>>> = BTreeMap::new();
        let push_edges =
            |queue: &mut BTreeMap<usize, BTreeMap<Var, Vec<f64>>>,
             seq: &SeqState,
             leaves: &[(u64, usize, Var)],
             grads: &crate::tensor::Gradients|
             -> Result<()> {
                for &(mid, origin_idx, leaf) in leaves {
                    let Some(g) = grads.wrt(leaf) else { continue };
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let origin = seq.segments[origin_idx].as_ref().ok_or_else(|| {
                        Error::Internal(format!(
                            "microstate {mid} references freed segment {origin_idx}"
                        ))
                    })?;
                    let node = origin.micro_nodes.get(&mid).ok_or_else(|| {
                        Error::Internal(format!(
                            "segment {origin_idx} does not own microstate {mid}"
                        ))
                    })?;
                    let slot = queue
                        .entry(origin_idx)
                        .or_default()
                        .entry(*node)
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for (s, &v) in slot.iter_mut().zip(g) {
                        *s += v;
                    }
                }
                Ok(())
            };
        push_edges(&mut queue, seq, &seg.ext_leaves, &grads)?;

        // Descending order: a segment only receives gradient from later
        // ones, so all its cotangents are known when it is popped.
        while let Some((&origin_idx, _)) = queue.iter().next_back() {
            let seeds_map = queue.remove(&origin_idx).unwrap();
            let origin = seq.segments[origin_idx].as_ref().unwrap();
            let seeds: Vec<(Var, Vec<f64>)> = seeds_map.into_iter().collect();
            let grads = origin.tape.backward_seeded(&seeds)?;
            out.grads.add_from(&grads);
            out.collect_inputs(origin, &grads);
            if self.config.recursive_backtrack {
                push_edges(&mut queue, seq, &origin.ext_leaves, &grads)?;
            }
        }
        Ok(out)
    }

    fn apply_update(&mut self) {
        self.steps_since_update = 0;
        if self.pending_count == 0 {
            return;
        }
        self.pending.scale(1.0 / self.pending_count as f64);
        clip_gradients(&mut self.pending, self.config.clip_norm);
        self.adam.step(&mut self.params, &self.pending, self.config.lr);
        self.counters.updates += 1;
        self.pending = GradMap::zeros_like(&self.params);
        self.pending_count = 0;
    }

    /// Train on one batch of sequences: forward and backward per segment,
    /// optimizer steps at the update cadence, a final flush at the
    /// sequence boundary. Returns mean loss per masked position.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<f64> {
        let total = batch.steps();
        if total == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let window = match self.config.mode {
            Mode::Bptt => total,
            _ => self.config.k_trunc,
        };
        let mut seq = SeqState::new(batch.batch_size(), self.config.n_hidden);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut t = 1;
        while t <= total {
            let t_end = (t + window - 1).min(total);
            let index = self.run_segment(&mut seq, batch, t, t_end)?;
            let back = self.backward_segment(&seq, index)?;
            {
                let seg = seq.segments[index].as_ref().unwrap();
                loss_sum += seg.loss_value();
                loss_count += back.mask_count;
                // Segments that can never be attended again are dropped.
                if self.config.mode != Mode::Sab || !seg.owns_micros() {
                    seq.segments[index] = None;
                }
            }
            for (id, g) in back.grads.iter() {
                self.pending.accumulate(id, g.data());
            }
            self.pending_count += back.mask_count;
            self.steps_since_update += t_end - t + 1;
            self.counters.timesteps += (t_end - t + 1) as u64;
            if self.steps_since_update >= self.config.update_every {
                self.apply_update();
            }
            if let Some(cap) = self.config.macrostate_capacity {
                let removed = seq.macrostate.evict_to(cap);
                if removed > 0 {
                    self.free_unreferenced(&mut seq);
                }
            }
            t = t_end + 1;
        }
        self.apply_update();
        self.counters.sequences += 1;
        Ok(loss_sum / loss_count.max(1) as f64)
    }

    fn free_unreferenced(&self, seq: &mut SeqState) {
        let mut alive = vec![false; seq.segments.len()];
        for m in seq.macrostate.iter() {
            alive[m.segment] = true;
        }
        for (i, slot) in seq.segments.iter_mut().enumerate() {
            if !alive[i] {
                *slot = None;
            }
        }
    }

    /// Evaluate on held-out batches through the inference path. For
    /// classification, `last_window` additionally reports metrics
    /// restricted to the final N steps of each sequence.
    pub fn evaluate(&self, batches: &[Batch], last_window: Option<usize>) -> Result<EvalMetrics> {
        evaluate(&self.params, &self.model, &self.config, batches, last_window)
    }

    /// One epoch over the source. `after_batch` runs at every sequence
    /// boundary (metrics, checkpoints); it sees the trainer read-only.
    pub fn train_epoch<F>(&mut self, source: &dyn BatchSource, mut after_batch: F) -> Result<f64>
    where
        F: FnMut(&Trainer, f64) -> Result<()>,
    {
        let epoch = self.counters.epoch;
        let mut loss_acc = 0.0;
        let mut batches = 0usize;
        for k in self.counters.batch_in_epoch..source.batches_per_epoch() as u64 {
            let batch = source.batch(epoch, k);
            let loss = self.train_batch(&batch)?;
            self.counters.batch_in_epoch = k + 1;
            loss_acc += loss;
            batches += 1;
            after_batch(self, loss)?;
        }
        self.counters.epoch += 1;
        self.counters.batch_in_epoch = 0;
        Ok(loss_acc / batches.max(1) as f64)
    }
}

/// Evaluation results; optional fields apply only to classification.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalMetrics {
    /// Mean cross-entropy in nats per masked position, or mean squared
    /// error for regression tasks.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub ce_last: Option<f64>,
    pub acc_last: Option<f64>,
    pub is_regression: bool,
}

/// Run held-out batches through the inference path and compute metrics.
pub fn evaluate(
    params: &ParamSet,
    model: &SabModel,
    config: &TrainConfig,
    batches: &[Batch],
    last_window: Option<usize>,
) -> Result<EvalMetrics> {
    let mut ce_acc = 0.0;
    let mut hit_acc = 0usize;
    let mut n_ce = 0usize;
    let mut ce_last_acc = 0.0;
    let mut hit_last_acc = 0usize;
    let mut n_last = 0usize;
    let mut mse_acc = 0.0;
    let mut n_mse = 0usize;
    let mut regression = false;

    for batch in batches {
        let b = batch.batch_size();
        let total = batch.steps();
        let mut state = crate::reference::InferState::new(b, config.n_hidden);
        let mut outputs: Vec<Tensor> = Vec::with_capacity(total);
        for x in &batch.inputs {
            let out = crate::reference::infer_step(params, model, &mut state, x, config.k_att);
            outputs.push(out.y);
        }
        match &batch.targets {
            Targets::Classes(classes) => {
                for (t, y) in outputs.iter().enumerate() {
                    for e in 0..b {
                        if !batch.loss_mask[t][e] {
                            continue;
                        }
                        let row = y.row(e);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
                        let ce = lse - row[classes[t][e]];
                        let mut best = 0;
                        for (cidx, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = cidx;
                            }
                        }
                        let hit = best == classes[t][e];
                        ce_acc += ce;
                        hit_acc += hit as usize;
                        n_ce += 1;
                        if let Some(w) = last_window {
                            if t + w >= total {
                                ce_last_acc += ce;
                                hit_last_acc += hit as usize;
                                n_last += 1;
                            }
                        }
                    }
                }
            }
            Targets::Regression(target) => {
                regression = true;
                for (t, y) in outputs.iter().enumerate() {
                    for e in 0..b {
                        if !batch.loss_mask[t][e] {
                            continue;
                        }
                        let d = y.at(e, 0) - target.at(e, 0);
                        mse_acc += d * d;
                        n_mse += 1;
                    }
                }
            }
        }
    }

    if regression {
        if n_mse == 0 {
            return Err(Error::Usage("evaluation saw no masked positions".into()));
        }
        return Ok(EvalMetrics {
            loss: mse_acc / n_mse as f64,
            accuracy: None,
            ce_last: None,
            acc_last: None,
            is_regression: true,
        });
    }
    if n_ce == 0 {
        return Err(Error::Usage("evaluation saw no masked positions".into()));
    }
    Ok(EvalMetrics {
        loss: ce_acc / n_ce as f64,
        accuracy: Some(100.0 * hit_acc as f64 / n_ce as f64),
        ce_last: (n_last > 0).then(|| ce_last_acc / n_last as f64),
        acc_last: (n_last > 0).then(|| 100.0 * hit_last_acc as f64 / n_last as f64),
        is_regression: false,
    })
}
