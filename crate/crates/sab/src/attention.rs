//! Sparse attention over stored hidden states.
//!
//! Every `k_att`-th hidden state is admitted to an append-only macrostate.
//! At each step the provisional hidden state is scored against all stored
//! microstates with a linear map, the scores are sparsified to the top
//! `k_top` (threshold subtracted, survivors strictly positive), the
//! selected microstates are summed into a summary that is added onto the
//! provisional hidden state, and the output head sees both the final
//! hidden state and the sparse weights.

use crate::error::Result;
use crate::nn::{lstm_step, ParamSet};
use crate::rng::Rng;
use crate::tensor::{ParamId, RowSelection, Tape, Tensor, Var};

/// A stored hidden state: one row per batch element, snapshotted at
/// creation and never recomputed. `segment` names the retained graph that
/// produced it; `id` is stable across evictions.
#[derive(Clone, Debug)]
pub struct Microstate {
    pub id: u64,
    pub value: Tensor, // [batch, n_hidden]
    pub timestep: usize,
    pub segment: usize,
}

/// Append-only store of microstates, ordered by strictly increasing
/// timestep. One per sequence-processing run.
#[derive(Clone, Debug, Default)]
pub struct Macrostate {
    micros: Vec<Microstate>,
}

impl Macrostate {
    pub fn new() -> Self {
        Macrostate::default()
    }

    pub fn push(&mut self, m: Microstate) {
        if let Some(last) = self.micros.last() {
            assert!(
                m.timestep > last.timestep,
                "microstate timesteps must be strictly increasing"
            );
        }
        self.micros.push(m);
    }

    pub fn len(&self) -> usize {
        self.micros.len()
    }

    pub fn is_empty(&self) -> bool {
        self.micros.is_empty()
    }

    pub fn get(&self, i: usize) -> &Microstate {
        &self.micros[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Microstate> {
        self.micros.iter()
    }

    /// Drop the oldest microstates down to `capacity`, returning the
    /// number removed from the front. Off by default; only used when a
    /// macrostate capacity bound is configured.
    pub fn evict_to(&mut self, capacity: usize) -> usize {
        if self.micros.len() <= capacity {
            return 0;
        }
        let n = self.micros.len() - capacity;
        self.micros.drain(..n);
        n
    }
}

/// True when the hidden state produced at step `t` (1-based) joins the
/// macrostate.
pub fn eligible(t: usize, k_att: usize) -> bool {
    debug_assert!(t >= 1 && k_att >= 1);
    t % k_att == 0
}

/// Attention parameter ids: the scoring map and the output head.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// Score weight over the stored microstate. [n_hidden]
    pub score_state: ParamId,
    /// Score weight over the provisional hidden state. [n_hidden]
    pub score_query: ParamId,
    /// Shared scalar score bias. [1]
    pub score_bias: ParamId,
    /// Output weight over the final hidden state. [n_out, n_hidden]
    pub out_state: ParamId,
    /// Output weight over the fixed-size sparse weight vector. [n_out, k_top]
    pub out_attn: ParamId,
    /// Output bias. [n_out]
    pub out_bias: ParamId,
}

impl AttentionParams {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut Rng,
        n_hidden: usize,
        n_out: usize,
        k_top: usize,
    ) -> Self {
        let bound = 1.0 / (n_hidden as f64).sqrt();
        let rand = |rng: &mut Rng, shape: Vec<usize>, b: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.range(-b, b)).collect())
        };
        // The score vectors start near silent: the summary injected into
        // the hidden state is then negligible until the scoring map has
        // learned something worth injecting. Selected entries pass
        // full-strength gradient regardless of the weight magnitude.
        let score_bound = 0.01;
        let score_state = params.register("attn.score_state", rand(rng, vec![n_hidden], score_bound));
        let score_query = params.register("attn.score_query", rand(rng, vec![n_hidden], score_bound));
        let score_bias = params.register("attn.score_bias", Tensor::zeros(vec![1]));
        let out_state = params.register("head.w_state", rand(rng, vec![n_out, n_hidden], bound));
        let attn_bound = if k_top > 0 {
            1.0 / (k_top as f64).sqrt()
        } else {
            0.0
        };
        let out_attn = params.register("head.w_attn", rand(rng, vec![n_out, k_top], attn_bound));
        let out_bias = params.register("head.bias", Tensor::zeros(vec![n_out]));
        AttentionParams {
            score_state,
            score_query,
            score_bias,
            out_state,
            out_attn,
            out_bias,
        }
    }
}

/// Per-segment handles to the parameters entered on the current tape.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub lstm_bias: Var,
    pub score_state: Var,
    pub score_query: Var,
    pub score_bias: Var,
    pub out_state: Var,
    pub out_attn: Var,
    pub out_bias: Var,
}

/// The microstate-dependent score component `w_state · micro_i[b]` per
/// candidate. It does not depend on the query, so each matvec is cached
/// in `score_cache` (aligned with `micro_vars`) and reused across the
/// steps of a segment.
fn score_columns(
    tape: &mut Tape,
    micro_vars: &[Var],
    score_cache: &mut Vec<Option<Var>>,
    w_state: Var,
) -> Result<Vec<Var>> {
    assert_eq!(micro_vars.len(), score_cache.len());
    let mut cols = Vec::with_capacity(micro_vars.len());
    for (i, &mv) in micro_vars.iter().enumerate() {
        let col = match score_cache[i] {
            Some(c) => c,
            None => {
                let c = tape.matvec(mv, w_state)?;
                score_cache[i] = Some(c);
                c
            }
        };
        cols.push(col);
    }
    Ok(cols)
}

/// Raw attention scores of every microstate against the query:
/// `a[b, i] = w_state · micro_i[b] + w_query · h_hat[b] + bias`.
pub fn score(
    tape: &mut Tape,
    micro_vars: &[Var],
    score_cache: &mut Vec<Option<Var>>,
    h_hat: Var,
    vars: &StepVars,
) -> Result<Var> {
    assert!(!micro_vars.is_empty(), "score: empty macrostate is the caller's case");
    let cols = score_columns(tape, micro_vars, score_cache, vars.score_state)?;
    let stacked = tape.stack_cols(&cols)?;
    let q = tape.matvec(h_hat, vars.score_query)?;
    let with_q = tape.add_col_broadcast(stacked, q)?;
    tape.add_scalar_var(with_q, vars.score_bias)
}

/// Sparsify raw scores to at most `k_top` strictly positive weights per
/// row. Returns the fixed `[batch, k_top]` weight tensor and the per-row
/// selections, or `None` when `k_top` is zero.
pub fn sparsify(
    tape: &mut Tape,
    scores: Var,
    k_top: usize,
) -> Result<Option<(Var, Vec<RowSelection>)>> {
    if k_top == 0 {
        return Ok(None);
    }
    tape.topk_select(scores, k_top).map(Some)
}

/// Weighted sum of the selected microstates; touches only selected rows.
pub fn summarize(
    tape: &mut Tape,
    weights: Var,
    selection: &[RowSelection],
    micro_vars: &[Var],
    n_hidden: usize,
) -> Result<Var> {
    let rows: Vec<Vec<(usize, Var)>> = selection
        .iter()
        .map(|sel| {
            sel.cols
                .iter()
                .enumerate()
                .map(|(slot, &col)| (slot, micro_vars[col]))
                .collect()
        })
        .collect();
    tape.attend_sum(weights, rows, n_hidden)
}

/// Final hidden state: the summary added onto the provisional state.
pub fn incorporate(tape: &mut Tape, h_hat: Var, summary: Var) -> Result<Var> {
    tape.add(h_hat, summary)
}

/// Output head `y = h·Wᵀ_state + ã·Wᵀ_attn + bias`; the attention term is
/// skipped entirely when there are no sparse weights.
pub fn output_head(
    tape: &mut Tape,
    h: Var,
    attn_weights: Option<Var>,
    vars: &StepVars,
) -> Result<Var> {
    let mut y = tape.matmul_nt(h, vars.out_state)?;
    if let Some(w) = attn_weights {
        let ya = tape.matmul_nt(w, vars.out_attn)?;
        y = tape.add(y, ya)?;
    }
    tape.add_row_broadcast(y, vars.out_bias)
}

/// What one step produced on the tape.
pub struct StepOutput {
    /// Final hidden state (post-incorporation).
    pub h: Var,
    /// Provisional hidden state, before the summary was added. This is
    /// what enters the macrostate: the LSTM bounds it to (-1, 1), so
    /// stored microstates can never feed their own growth through the
    /// summary path.
    pub h_hat: Var,
    pub c: Var,
    pub y: Var,
    /// Per-row selection; empty when no attention was applied this step.
    pub selection: Vec<RowSelection>,
    /// The fixed sparse-weight tensor, when attention ran.
    pub attn_weights: Option<Var>,
}

/// One full step: LSTM, then scoring, sparsification, summarization,
/// incorporation, and the output head. `micro_vars` holds one var per
/// macrostate entry, already resolved onto this tape; the caller appends
/// the returned `h` to the macrostate afterwards if the step is eligible.
#[allow(clippy::too_many_arguments)]
pub fn sab_step(
    tape: &mut Tape,
    vars: &StepVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    micro_vars: &[Var],
    score_cache: &mut Vec<Option<Var>>,
    k_top: usize,
) -> Result<StepOutput> {
    let (h_hat, c) = lstm_step(
        tape,
        vars.w_input,
        vars.w_hidden,
        vars.lstm_bias,
        x,
        h_prev,
        c_prev,
    )?;
    let n_hidden = tape.shape(h_hat)[1];

    if k_top == 0 || micro_vars.is_empty() {
        let y = output_head(tape, h_hat, None, vars)?;
        return Ok(StepOutput {
            h: h_hat,
            h_hat,
            c,
            y,
            selection: Vec::new(),
            attn_weights: None,
        });
    }

    // The query and bias terms offset every candidate of a row equally,
    // so the threshold subtraction cancels them out of the sparse weights
    // exactly: a_i - tau == w_state·(m_i - m_tau). Ranking on the
    // microstate component alone produces the same selections and the
    // same weights, and gives the query and bias their true (zero)
    // gradient instead of a phantom one through the frozen threshold.
    let cols = score_columns(tape, micro_vars, score_cache, vars.score_state)?;
    let state_scores = tape.stack_cols(&cols)?;
    let (weights, selection) = sparsify(tape, state_scores, k_top)?.expect("k_top > 0");
    let summary = summarize(tape, weights, &selection, micro_vars, n_hidden)?;
    let h = incorporate(tape, h_hat, summary)?;
    let y = output_head(tape, h, Some(weights), vars)?;
    Ok(StepOutput {
        h,
        h_hat,
        c,
        y,
        selection,
        attn_weights: Some(weights),
    })
}
