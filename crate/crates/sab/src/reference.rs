//! Plain-tensor forward pass, written independently of the tape.
//!
//! This is the evaluation path (no graph retention, state-sized memory)
//! and doubles as a second implementation the tape forward is checked
//! against. Everything here is straightforward loops over values.

use crate::model::SabModel;
use crate::nn::ParamSet;
use crate::tensor::{RowSelection, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// One LSTM cell step over a batch; gate blocks ordered (input, forget,
/// cell-candidate, output). Returns the provisional hidden state and the
/// new cell state.
pub fn lstm_cell(
    w_input: &Tensor,
    w_hidden: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> (Tensor, Tensor) {
    let batch = x.rows();
    let n_h = w_hidden.shape()[1];
    assert_eq!(w_input.shape()[0], 4 * n_h);
    let mut h_out = vec![0.0; batch * n_h];
    let mut c_out = vec![0.0; batch * n_h];
    for b in 0..batch {
        let xb = x.row(b);
        let hb = h_prev.row(b);
        let cb = c_prev.row(b);
        for j in 0..n_h {
            let gate = |block: usize| {
                let r = block * n_h + j;
                dot(w_input.row(r), xb) + dot(w_hidden.row(r), hb) + bias.data()[r]
            };
            let i = sigmoid(gate(0));
            let f = sigmoid(gate(1));
            let g = gate(2).tanh();
            let o = sigmoid(gate(3));
            let c = f * cb[j] + i * g;
            c_out[b * n_h + j] = c;
            h_out[b * n_h + j] = o * c.tanh();
        }
    }
    (
        Tensor::new(vec![batch, n_h], h_out),
        Tensor::new(vec![batch, n_h], c_out),
    )
}

/// Dense attention scores: every microstate against the query, one row
/// per batch element.
pub fn score_dense(
    w_state: &Tensor,
    w_query: &Tensor,
    bias: f64,
    micros: &[&Tensor],
    h_hat: &Tensor,
) -> Tensor {
    let batch = h_hat.rows();
    let m = micros.len();
    let mut out = vec![0.0; batch * m];
    for b in 0..batch {
        let q = dot(w_query.data(), h_hat.row(b)) + bias;
        for (i, micro) in micros.iter().enumerate() {
            out[b * m + i] = dot(w_state.data(), micro.row(b)) + q;
        }
    }
    Tensor::new(vec![batch, m], out)
}

/// Top-k selection per row, written as a full ascending sort: take the
/// last k entries (equal scores put the greater index later, so recency
/// wins), threshold at the value just below the block, keep entries
/// strictly above it.
pub fn select_rows(scores: &Tensor, k: usize) -> Vec<RowSelection> {
    let (batch, m) = (scores.rows(), scores.cols());
    (0..batch)
        .map(|b| {
            let row = scores.row(b);
            if k == 0 {
                return RowSelection {
                    cols: vec![],
                    tau: 0.0,
                };
            }
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&i, &j| row[i].total_cmp(&row[j]).then(i.cmp(&j)));
            let tau = if m > k {
                row[order[m - k - 1]]
            } else {
                row.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0
            };
            let mut cols: Vec<usize> = order[m.saturating_sub(k)..]
                .iter()
                .copied()
                .filter(|&c| row[c] - tau > 0.0)
                .collect();
            cols.sort_unstable();
            RowSelection { cols, tau }
        })
        .collect()
}

/// Sparse weighted sum of selected microstates plus the provisional
/// hidden state.
pub fn incorporate_dense(
    h_hat: &Tensor,
    scores: &Tensor,
    selection: &[RowSelection],
    micros: &[&Tensor],
) -> Tensor {
    let mut h = h_hat.clone();
    let n_h = h_hat.cols();
    let hd = h.data_mut();
    for (b, sel) in selection.iter().enumerate() {
        for &c in &sel.cols {
            let w = scores.at(b, c) - sel.tau;
            let mrow = micros[c].row(b);
            for j in 0..n_h {
                hd[b * n_h + j] += w * mrow[j];
            }
        }
    }
    h
}

/// Fixed-size sparse weight vector: selected weights ascending by
/// microstate index, zero-padded to `k_top`.
pub fn attn_fixed(scores: &Tensor, selection: &[RowSelection], k_top: usize) -> Tensor {
    let batch = selection.len();
    let mut out = vec![0.0; batch * k_top];
    for (b, sel) in selection.iter().enumerate() {
        for (slot, &c) in sel.cols.iter().enumerate() {
            out[b * k_top + slot] = scores.at(b, c) - sel.tau;
        }
    }
    Tensor::new(vec![batch, k_top], out)
}

/// Output head over the final hidden state and the sparse weights.
pub fn output_dense(
    w_state: &Tensor,
    w_attn: &Tensor,
    bias: &Tensor,
    h: &Tensor,
    attn: Option<&Tensor>,
) -> Tensor {
    let batch = h.rows();
    let n_out = w_state.shape()[0];
    let mut out = vec![0.0; batch * n_out];
    for b in 0..batch {
        for r in 0..n_out {
            let mut v = dot(w_state.row(r), h.row(b)) + bias.data()[r];
            if let Some(a) = attn {
                v += dot(w_attn.row(r), a.row(b));
            }
            out[b * n_out + r] = v;
        }
    }
    Tensor::new(vec![batch, n_out], out)
}

/// Running state of an inference pass: current hidden/cell values and the
/// stored microstate values.
#[derive(Clone, Debug)]
pub struct InferState {
    pub h: Tensor,
    pub c: Tensor,
    pub micros: Vec<Tensor>,
    pub micro_timesteps: Vec<usize>,
    pub t: usize,
}

impl InferState {
    pub fn new(batch: usize, n_hidden: usize) -> Self {
        InferState {
            h: Tensor::zeros(vec![batch, n_hidden]),
            c: Tensor::zeros(vec![batch, n_hidden]),
            micros: Vec::new(),
            micro_timesteps: Vec::new(),
            t: 0,
        }
    }
}

pub struct InferStepOut {
    pub y: Tensor,
    pub selection: Vec<RowSelection>,
    pub scores: Option<Tensor>,
}

/// Advance the inference state one step. With `k_top == 0` this is a
/// plain LSTM step plus the hidden-state output head.
pub fn infer_step(
    params: &ParamSet,
    model: &SabModel,
    state: &mut InferState,
    x: &Tensor,
    k_att: usize,
) -> InferStepOut {
    state.t += 1;
    let (h_hat, c) = lstm_cell(
        params.get(model.lstm.w_input),
        params.get(model.lstm.w_hidden),
        params.get(model.lstm.bias),
        x,
        &state.h,
        &state.c,
    );
    state.c = c;
    let stored = h_hat.clone();

    let mut out = if model.k_top == 0 || state.micros.is_empty() {
        state.h = h_hat;
        InferStepOut {
            y: output_dense(
                params.get(model.attn.out_state),
                params.get(model.attn.out_attn),
                params.get(model.attn.out_bias),
                &state.h,
                None,
            ),
            selection: Vec::new(),
            scores: None,
        }
    } else {
        let micro_refs: Vec<&Tensor> = state.micros.iter().collect();
        let scores = score_dense(
            params.get(model.attn.score_state),
            params.get(model.attn.score_query),
            params.get(model.attn.score_bias).data()[0],
            &micro_refs,
            &h_hat,
        );
        let selection = select_rows(&scores, model.k_top);
        let h = incorporate_dense(&h_hat, &scores, &selection, &micro_refs);
        let attn = attn_fixed(&scores, &selection, model.k_top);
        state.h = h;
        InferStepOut {
            y: output_dense(
                params.get(model.attn.out_state),
                params.get(model.attn.out_attn),
                params.get(model.attn.out_bias),
                &state.h,
                Some(&attn),
            ),
            selection,
            scores: Some(scores),
        }
    };

    if model.k_top > 0 && crate::attention::eligible(state.t, k_att) {
        state.micros.push(stored);
        state.micro_timesteps.push(state.t);
    }
    if out.scores.is_none() {
        out.scores = None;
    }
    out
}
