//! Conventional neural-network pieces: parameter registry, initialization,
//! LSTM cell, affine layers, Adam, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Named trainable tensors. `ParamId` is the index into this registry and
/// stays valid for the life of the model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(self.entries[id.0].1.shape(), t.shape());
        self.entries[id.0].1 = t;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Enter every parameter's current value onto a tape, returning the
    /// vars aligned with `ParamId`.
    pub fn enter_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.iter()
            .map(|(id, _, t)| tape.param(id, t.clone()))
            .collect()
    }
}

/// Gradient accumulator aligned with a [`ParamSet`]. Parameters nothing
/// flowed into hold exact zeros.
#[derive(Clone, Debug)]
pub struct GradMap {
    grads: Vec<Tensor>,
}

impl GradMap {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradMap {
            grads: params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &[f64]) {
        let buf = self.grads[id.0].data_mut();
        assert_eq!(buf.len(), delta.len());
        for (b, &d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    pub fn add_from(&mut self, grads: &crate::tensor::Gradients) {
        for (id, g) in grads.params() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.grads {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. Gradients at or under the bound pass
/// through untouched, so direction and small values are preserved
/// bit-exactly.
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0);
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adam optimizer state: first/second moments per parameter and the step
/// counter for bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update with bias correction:
    /// m ← β1·m + (1−β1)·g; v ← β2·v + (1−β2)·g²;
    /// p ← p − lr·m̂/(√v̂ + ε).
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let gd = g.data();
            let md = self.m[id.0].data_mut();
            let vd = self.v[id.0].data_mut();
            let mut p = params.get(id).clone();
            let pd = p.data_mut();
            for i in 0..gd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            params.set(id, p);
        }
    }
}

fn uniform_tensor(rng: &mut Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.range(-bound, bound)).collect())
}

/// LSTM cell parameters. Gates are packed along the leading axis in the
/// fixed order (input, forget, cell-candidate, output), each block of
/// size `n_hidden`; checkpoints depend on this layout.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_input: ParamId,  // [4*n_hidden, n_input]
    pub w_hidden: ParamId, // [4*n_hidden, n_hidden]
    pub bias: ParamId,     // [4*n_hidden]
    pub n_input: usize,
    pub n_hidden: usize,
}

impl LstmLayer {
    /// Matrices uniform in (−1/√fan_in, +1/√fan_in); biases zero except
    /// the forget-gate block, which starts at 1.0 so the cell carries
    /// state early in training.
    pub fn init(params: &mut ParamSet, rng: &mut Rng, n_input: usize, n_hidden: usize) -> Self {
        assert!(n_input > 0 && n_hidden > 0);
        let w_input = params.register(
            "lstm.w_input",
            uniform_tensor(rng, vec![4 * n_hidden, n_input], 1.0 / (n_input as f64).sqrt()),
        );
        let w_hidden = params.register(
            "lstm.w_hidden",
            uniform_tensor(
                rng,
                vec![4 * n_hidden, n_hidden],
                1.0 / (n_hidden as f64).sqrt(),
            ),
        );
        let mut bias = Tensor::zeros(vec![4 * n_hidden]);
        bias.data_mut()[n_hidden..2 * n_hidden].fill(1.0);
        let bias = params.register("lstm.bias", bias);
        LstmLayer {
            w_input,
            w_hidden,
            bias,
            n_input,
            n_hidden,
        }
    }
}

/// One LSTM step on the tape for a whole batch.
///
/// `x` is `[batch, n_input]`, `h_prev`/`c_prev` are `[batch, n_hidden]`.
/// Returns the provisional hidden state and the new cell state.
pub fn lstm_step(
    tape: &mut Tape,
    w_input: Var,
    w_hidden: Var,
    bias: Var,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let n_h4 = tape.shape(w_input)[0];
    let n_h = n_h4 / 4;
    if tape.shape(h_prev) != [tape.shape(x)[0], n_h] {
        return Err(Error::Dim {
            op: "lstm_step",
            lhs: tape.shape(h_prev).to_vec(),
            rhs: vec![tape.shape(x)[0], n_h],
        });
    }
    let gx = tape.matmul_nt(x, w_input)?;
    let gh = tape.matmul_nt(h_prev, w_hidden)?;
    let pre = tape.add(gx, gh)?;
    let pre = tape.add_row_broadcast(pre, bias)?;

    let i_pre = tape.slice_cols(pre, 0, n_h)?;
    let f_pre = tape.slice_cols(pre, n_h, 2 * n_h)?;
    let g_pre = tape.slice_cols(pre, 2 * n_h, 3 * n_h)?;
    let o_pre = tape.slice_cols(pre, 3 * n_h, 4 * n_h)?;

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h_hat = tape.mul(o, tc)?;
    Ok((h_hat, c))
}

/// Affine layer `y = x · Wᵀ + b` with `W` stored `[n_out, n_in]`.
#[derive(Clone, Copy, Debug)]
pub struct AffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AffineLayer {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = params.register(
            format!("{name}.weight"),
            uniform_tensor(rng, vec![n_out, n_in], bound),
        );
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(vec![n_out]));
        AffineLayer { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, weight)?;
        tape.add_row_broadcast(y, bias)
    }
}
