//! The full model: an LSTM cell plus the attention scoring map and the
//! output head, addressed through one parameter registry.

use crate::attention::{AttentionParams, StepVars};
use crate::nn::{LstmLayer, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug)]
pub struct SabModel {
    pub lstm: LstmLayer,
    pub attn: AttentionParams,
    pub n_input: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub k_top: usize,
}

impl SabModel {
    /// Register and initialize all parameters. The draw order is fixed
    /// (LSTM, scoring, head), so a seed fully determines every value.
    pub fn init(
        params: &mut ParamSet,
        seed: u64,
        n_input: usize,
        n_hidden: usize,
        n_out: usize,
        k_top: usize,
    ) -> Self {
        let mut rng = Rng::seeded(seed);
        let lstm = LstmLayer::init(params, &mut rng, n_input, n_hidden);
        let attn = AttentionParams::init(params, &mut rng, n_hidden, n_out, k_top);
        SabModel {
            lstm,
            attn,
            n_input,
            n_hidden,
            n_out,
            k_top,
        }
    }

    /// Snapshot the current parameter values onto a tape, one leaf per
    /// parameter, and hand back the per-segment handles.
    pub fn enter(&self, params: &ParamSet, tape: &mut Tape) -> StepVars {
        let mut enter = |id| tape.param(id, params.get(id).clone());
        StepVars {
            w_input: enter(self.lstm.w_input),
            w_hidden: enter(self.lstm.w_hidden),
            lstm_bias: enter(self.lstm.bias),
            score_state: enter(self.attn.score_state),
            score_query: enter(self.attn.score_query),
            score_bias: enter(self.attn.score_bias),
            out_state: enter(self.attn.out_state),
            out_attn: enter(self.attn.out_attn),
            out_bias: enter(self.attn.out_bias),
        }
    }
}
