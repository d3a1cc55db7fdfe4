//! Operation recording and reverse replay.
//!
//! A tape is single-owner: one logical thread builds it, runs backward on
//! it, and drops it. Backward visits each node at most once, in reverse
//! creation order, so parent handles always point at already-finished
//! nodes.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it. Ordered by creation so handle collections iterate
/// deterministically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Stable identity of a trainable parameter across tapes. Assigned by the
/// parameter registry; gradient maps are keyed by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Per-row outcome of a top-k selection: which score columns survived and
/// the threshold that was subtracted from them.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSelection {
    /// Selected column indices, ascending (= ascending microstate timestep).
    pub cols: Vec<usize>,
    /// Threshold subtracted from the selected raw scores. Constant in
    /// backward: no gradient flows through it.
    pub tau: f64,
}

enum Op {
    Leaf,
    /// Identity forward, zero gradient backward.
    Gate,
    /// C[m,n] = A[m,k] · B[k,n]
    Matmul {
        a: Var,
        b: Var,
    },
    /// C[m,n] = A[m,k] · B[n,k]ᵀ
    MatmulNt {
        a: Var,
        b: Var,
    },
    /// y[r] = M[r,c] · v[c]
    MatVec {
        m: Var,
        v: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Relu {
        x: Var,
    },
    AddScalar {
        x: Var,
    },
    /// out = x + s[0] where s is a single-element tensor (a learnable
    /// scalar offset applied to every element).
    AddScalarVar {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    /// out[r,c] = m[r,c] + v[c]  (bias over rows)
    AddRowBroadcast {
        m: Var,
        v: Var,
    },
    /// out[r,c] = m[r,c] + v[r]  (per-row offset over columns)
    AddColBroadcast {
        m: Var,
        v: Var,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    /// Columns [start, end) of a matrix (or elements of a vector).
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    /// k vectors of length r stacked as the columns of an [r,k] matrix.
    StackCols {
        parts: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    /// Per-row softmax cross-entropy against class indices, in nats.
    CeRows {
        logits: Var,
        targets: Vec<usize>,
    },
    /// Per-row sparse top-k: out[r, slot] = scores[r, cols[slot]] - tau,
    /// zero-padded on the right. The threshold and the selection are
    /// discrete decisions; backward routes only through selected slots.
    TopkSelect {
        scores: Var,
        rows: Vec<RowSelection>,
    },
    /// s[r, :] = Σ_slot w[r, slot] · value(rows[r][slot].1)[r, :]
    AttendSum {
        weights: Var,
        rows: Vec<Vec<(usize, Var)>>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records forward operations; replays them in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    /// How many microstate rows `attend_sum` touched; used by tests to
    /// assert the summary cost is proportional to the selection size.
    micro_touches: Cell<u64>,
    /// Deliberate skew injected into the tanh backward rule so the
    /// finite-difference harness can be shown to catch a broken rule.
    /// Zero in all real use.
    tanh_skew: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            micro_touches: Cell::new(0),
            tanh_skew: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn micro_touches(&self) -> u64 {
        self.micro_touches.get()
    }

    /// Corrupt the tanh backward rule by `skew`. Exists so a gradient
    /// check can demonstrate that it fails when a rule is wrong.
    pub fn set_tanh_backward_skew(&mut self, skew: f64) {
        self.tanh_skew = skew;
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Enter a value that should receive gradient but is not a parameter
    /// (inputs, microstate references).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Enter a plain constant; no gradient is ever computed for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Enter a parameter snapshot keyed by `id` for the gradient map.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, t, true);
        self.params.push((id, v));
        v
    }

    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Identity on the forward value; deposits exactly zero gradient
    /// into `src` on backward.
    pub fn stop_gradient(&mut self, src: Var) -> Var {
        let value = self.nodes[src.0].value.clone();
        // Nothing upstream of a gate can receive gradient through it.
        self.push(Op::Gate, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out), rg))
    }

    /// `a · bᵀ` where `b` is stored `[n, k]`; the usual layout for weight
    /// matrices declared `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dim {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatmulNt { a, b }, Tensor::new(vec![m, n], out), rg))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Dim {
                op: "matvec",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &md[i * c..(i + 1) * c];
            out[i] = dot(row, vd);
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Op::MatVec { m, v }, Tensor::vector(out), rg))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dim {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op(a, b), Tensor::new(sa, out), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(op, Tensor::new(shape, out), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    /// Add a single-element tensor to every element of `x`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dim {
                op: "add_scalar_var",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).data()[0];
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Op::AddScalarVar { x, s }, Tensor::new(shape, out), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    /// Add bias vector `v[c]` to every row of `m[r,c]`.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Dim {
                op: "add_row_broadcast",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = md[i * c + j] + vd[j];
            }
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Op::AddRowBroadcast { m, v }, Tensor::new(sm, out), rg))
    }

    /// Add `v[r]` to every column of `m[r,c]` (a per-row offset).
    pub fn add_col_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::Dim {
                op: "add_col_broadcast",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = md[i * c + j] + vd[i];
            }
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Op::AddColBroadcast { m, v }, Tensor::new(sm, out), rg))
    }

    /// Concatenate along `axis` (0 or 1). Vectors only support axis 0.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Dim {
            op: "concat",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(err());
        }
        for (d, (&x, &y)) in sa.iter().zip(&sb).enumerate() {
            if d != axis && x != y {
                return Err(err());
            }
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let (shape, out) = match (sa.len(), axis) {
            (1, 0) => {
                let mut out = Vec::with_capacity(ad.len() + bd.len());
                out.extend_from_slice(ad);
                out.extend_from_slice(bd);
                (vec![sa[0] + sb[0]], out)
            }
            (2, 0) => {
                let mut out = Vec::with_capacity(ad.len() + bd.len());
                out.extend_from_slice(ad);
                out.extend_from_slice(bd);
                (vec![sa[0] + sb[0], sa[1]], out)
            }
            (2, 1) => {
                let (r, ca, cb) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
                }
                (vec![r, ca + cb], out)
            }
            _ => return Err(err()),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat { a, b, axis }, Tensor::new(shape, out), rg))
    }

    /// Columns `[start, end)` of a matrix, or that element range of a
    /// vector.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if start > end || end > *sx.last().unwrap_or(&0) {
            return Err(Error::Dim {
                op: "slice_cols",
                lhs: sx,
                rhs: vec![start, end],
            });
        }
        let xd = self.value(x).data();
        let w = end - start;
        let (shape, out) = match sx.len() {
            1 => (vec![w], xd[start..end].to_vec()),
            2 => {
                let (r, c) = (sx[0], sx[1]);
                let mut out = Vec::with_capacity(r * w);
                for i in 0..r {
                    out.extend_from_slice(&xd[i * c + start..i * c + end]);
                }
                (vec![r, w], out)
            }
            _ => {
                return Err(Error::Dim {
                    op: "slice_cols",
                    lhs: sx,
                    rhs: vec![start, end],
                })
            }
        };
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start, end }, Tensor::new(shape, out), rg))
    }

    /// Stack k vectors of equal length r as columns of an [r, k] matrix.
    pub fn stack_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("stack_cols: empty input".into()));
        }
        let r = self.shape(parts[0]).to_vec();
        if r.len() != 1 {
            return Err(Error::Dim {
                op: "stack_cols",
                lhs: r,
                rhs: vec![],
            });
        }
        let rows = r[0];
        for &p in parts {
            if self.shape(p) != [rows] {
                return Err(Error::Dim {
                    op: "stack_cols",
                    lhs: vec![rows],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let k = parts.len();
        let mut out = vec![0.0; rows * k];
        for (j, &p) in parts.iter().enumerate() {
            let pd = self.value(p).data();
            for i in 0..rows {
                out[i * k + j] = pd[i];
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::StackCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, k], out),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Op::Mean { x }, Tensor::scalar(m), rg)
    }

    /// Softmax cross-entropy per row, in nats. `targets[r]` is the class
    /// index for row r.
    pub fn softmax_ce_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Dim {
                op: "softmax_ce_rows",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let classes = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Domain(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut out = vec![0.0; s[0]];
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * classes..(r + 1) * classes];
            out[r] = log_sum_exp(row) - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CeRows {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::vector(out),
            rg,
        ))
    }

    /// Mean squared error between two equal-shaped tensors.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let d = self.sub(prediction, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Per-row top-k sparsification of raw scores `[rows, m]`.
    ///
    /// For each row the `k` greatest scores are kept (ties broken toward
    /// the greater column index, i.e. the more recent microstate), the
    /// (k+1)-th greatest value — or min-1 when m <= k — is subtracted, and
    /// survivors are emitted ascending by column into a fixed `[rows, k]`
    /// output, zero-padded on the right. Requires `k >= 1`; a selection of
    /// zero is represented by not calling this at all.
    pub fn topk_select(&mut self, scores: Var, k: usize) -> Result<(Var, Vec<RowSelection>)> {
        if k == 0 {
            return Err(Error::Usage("topk_select: k must be >= 1".into()));
        }
        let s = self.shape(scores).to_vec();
        if s.len() != 2 {
            return Err(Error::Dim {
                op: "topk_select",
                lhs: s,
                rhs: vec![k],
            });
        }
        let (rows, m) = (s[0], s[1]);
        let sd = self.value(scores).data();
        let mut selections = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let row = &sd[r * m..(r + 1) * m];
            let sel = select_top_k(row, k);
            for (slot, &col) in sel.cols.iter().enumerate() {
                out[r * k + slot] = row[col] - sel.tau;
            }
            selections.push(sel);
        }
        let rg = self.rg(scores);
        let v = self.push(
            Op::TopkSelect {
                scores,
                rows: selections.clone(),
            },
            Tensor::new(vec![rows, k], out),
            rg,
        );
        Ok((v, selections))
    }

    /// Weighted sum of per-row selected microstates.
    ///
    /// `weights` is the `[rows, k]` output of [`Tape::topk_select`];
    /// `rows[r]` lists `(slot, microstate var)` pairs naming which
    /// microstate each occupied slot refers to. Every microstate var must
    /// be a `[rows, width]` tensor; row r of it is the microstate of batch
    /// element r. Cost is proportional to the number of occupied slots.
    pub fn attend_sum(
        &mut self,
        weights: Var,
        rows: Vec<Vec<(usize, Var)>>,
        width: usize,
    ) -> Result<Var> {
        let sw = self.shape(weights).to_vec();
        if sw.len() != 2 || sw[0] != rows.len() {
            return Err(Error::Dim {
                op: "attend_sum",
                lhs: sw,
                rhs: vec![rows.len(), width],
            });
        }
        let (n_rows, k) = (sw[0], sw[1]);
        let wd = self.value(weights).data();
        let mut out = vec![0.0; n_rows * width];
        let mut touched = 0u64;
        for (r, slots) in rows.iter().enumerate() {
            for &(slot, mv) in slots {
                if slot >= k {
                    return Err(Error::Internal(format!(
                        "attend_sum: slot {slot} out of range {k}"
                    )));
                }
                let m = self.value(mv);
                if m.shape() != [n_rows, width] {
                    return Err(Error::Dim {
                        op: "attend_sum",
                        lhs: m.shape().to_vec(),
                        rhs: vec![n_rows, width],
                    });
                }
                let w = wd[r * k + slot];
                let mrow = m.row(r);
                let orow = &mut out[r * width..(r + 1) * width];
                for (o, &x) in orow.iter_mut().zip(mrow) {
                    *o += w * x;
                }
                touched += 1;
            }
        }
        self.micro_touches.set(self.micro_touches.get() + touched);
        let rg = self.rg(weights) || rows.iter().flatten().any(|&(_, mv)| self.rg(mv));
        Ok(self.push(
            Op::AttendSum { weights, rows },
            Tensor::new(vec![n_rows, width], out),
            rg,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Errors if `loss` is not a single
    /// element.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep from externally supplied cotangents. Used to push
    /// gradient arriving from another segment's tape into this one.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut highest = 0usize;
        for (v, seed) in seeds {
            let node = &self.nodes[v.0];
            if seed.len() != node.value.len() {
                return Err(Error::Usage(format!(
                    "backward seed length {} does not match node shape {:?}",
                    seed.len(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads[v.0], seed);
            highest = highest.max(v.0);
        }

        for id in (0..=highest).rev() {
            let Some(go) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            // Keep the leaf/param gradient around for queries.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(go);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &go, &mut grads);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn deposit(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if self.nodes[v.0].requires_grad || matches!(self.nodes[v.0].op, Op::Leaf) {
            accumulate(&mut grads[v.0], delta);
        }
    }

    fn deposit_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        len: usize,
        fill: impl FnOnce(&mut [f64]),
    ) {
        if self.nodes[v.0].requires_grad || matches!(self.nodes[v.0].op, Op::Leaf) {
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            fill(buf);
        }
    }

    fn propagate(&self, node: &Node, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Gate => {
                // Truncation point: nothing flows upstream.
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[1];
                // dA += dC · Bᵀ
                self.deposit_with(grads, *a, m * k, |buf| {
                    gemm(m, n, k, go, false, self.value(*b).data(), true, 1.0, buf);
                });
                // dB += Aᵀ · dC
                self.deposit_with(grads, *b, k * n, |buf| {
                    gemm(k, m, n, self.value(*a).data(), true, go, false, 1.0, buf);
                });
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[0];
                // C = A·Bᵀ: dA += dC·B, dB += dCᵀ·A
                self.deposit_with(grads, *a, m * k, |buf| {
                    gemm(m, n, k, go, false, self.value(*b).data(), false, 1.0, buf);
                });
                self.deposit_with(grads, *b, n * k, |buf| {
                    gemm(n, m, k, go, true, self.value(*a).data(), false, 1.0, buf);
                });
            }
            Op::MatVec { m, v } => {
                let (r, c) = {
                    let s = self.shape(*m);
                    (s[0], s[1])
                };
                let vd = self.value(*v).data();
                self.deposit_with(grads, *m, r * c, |buf| {
                    for i in 0..r {
                        let g = go[i];
                        let row = &mut buf[i * c..(i + 1) * c];
                        for (x, &vv) in row.iter_mut().zip(vd) {
                            *x += g * vv;
                        }
                    }
                });
                let md = self.value(*m).data();
                self.deposit_with(grads, *v, c, |buf| {
                    for i in 0..r {
                        let g = go[i];
                        let row = &md[i * c..(i + 1) * c];
                        for (x, &mv) in buf.iter_mut().zip(row) {
                            *x += g * mv;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.deposit(grads, *a, go);
                self.deposit(grads, *b, go);
            }
            Op::Sub { a, b } => {
                self.deposit(grads, *a, go);
                self.deposit_with(grads, *b, go.len(), |buf| {
                    for (x, &g) in buf.iter_mut().zip(go) {
                        *x -= g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.deposit_with(grads, *a, go.len(), |buf| {
                    for i in 0..go.len() {
                        buf[i] += go[i] * bd[i];
                    }
                });
                self.deposit_with(grads, *b, go.len(), |buf| {
                    for i in 0..go.len() {
                        buf[i] += go[i] * ad[i];
                    }
                });
            }
            Op::Sigmoid { x } => {
                let s = node.value.data();
                self.deposit_with(grads, *x, go.len(), |buf| {
                    for i in 0..go.len() {
                        buf[i] += go[i] * s[i] * (1.0 - s[i]);
                    }
                });
            }
            Op::Tanh { x } => {
                let t = node.value.data();
                let skew = self.tanh_skew;
                self.deposit_with(grads, *x, go.len(), |buf| {
                    for i in 0..go.len() {
                        buf[i] += go[i] * (1.0 - t[i] * t[i] + skew);
                    }
                });
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                self.deposit_with(grads, *x, go.len(), |buf| {
                    for i in 0..go.len() {
                        if xd[i] > 0.0 {
                            buf[i] += go[i];
                        }
                    }
                });
            }
            Op::AddScalar { x } => {
                self.deposit(grads, *x, go);
            }
            Op::AddScalarVar { x, s } => {
                self.deposit(grads, *x, go);
                self.deposit_with(grads, *s, 1, |buf| {
                    buf[0] += go.iter().sum::<f64>();
                });
            }
            Op::Scale { x, c } => {
                self.deposit_with(grads, *x, go.len(), |buf| {
                    for i in 0..go.len() {
                        buf[i] += go[i] * c;
                    }
                });
            }
            Op::AddRowBroadcast { m, v } => {
                self.deposit(grads, *m, go);
                let c = self.shape(*v)[0];
                let r = go.len() / c;
                self.deposit_with(grads, *v, c, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += go[i * c + j];
                        }
                    }
                });
            }
            Op::AddColBroadcast { m, v } => {
                self.deposit(grads, *m, go);
                let r = self.shape(*v)[0];
                let c = go.len() / r;
                self.deposit_with(grads, *v, r, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i] += go[i * c + j];
                        }
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                match (sa.len(), axis) {
                    (1, 0) | (2, 0) => {
                        let na: usize = sa.iter().product();
                        self.deposit(grads, *a, &go[..na]);
                        self.deposit(grads, *b, &go[na..]);
                    }
                    (2, 1) => {
                        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
                        let ct = ca + cb;
                        self.deposit_with(grads, *a, r * ca, |buf| {
                            for i in 0..r {
                                for j in 0..ca {
                                    buf[i * ca + j] += go[i * ct + j];
                                }
                            }
                        });
                        self.deposit_with(grads, *b, r * cb, |buf| {
                            for i in 0..r {
                                for j in 0..cb {
                                    buf[i * cb + j] += go[i * ct + ca + j];
                                }
                            }
                        });
                    }
                    _ => unreachable!("concat axis validated at forward"),
                }
            }
            Op::SliceCols { x, start, end } => {
                let sx = self.shape(*x).to_vec();
                let w = end - start;
                match sx.len() {
                    1 => {
                        self.deposit_with(grads, *x, sx[0], |buf| {
                            for j in 0..w {
                                buf[start + j] += go[j];
                            }
                        });
                    }
                    2 => {
                        let (r, c) = (sx[0], sx[1]);
                        self.deposit_with(grads, *x, r * c, |buf| {
                            for i in 0..r {
                                for j in 0..w {
                                    buf[i * c + start + j] += go[i * w + j];
                                }
                            }
                        });
                    }
                    _ => unreachable!("slice rank validated at forward"),
                }
            }
            Op::StackCols { parts } => {
                let k = parts.len();
                let rows = go.len() / k;
                for (j, &p) in parts.iter().enumerate() {
                    // Columns the sparsifier zeroed carry no gradient at
                    // all; skipping them keeps non-selected paths
                    // structurally untouched instead of flooding them
                    // with explicit zeros.
                    if (0..rows).all(|i| go[i * k + j] == 0.0) {
                        continue;
                    }
                    self.deposit_with(grads, p, rows, |buf| {
                        for i in 0..rows {
                            buf[i] += go[i * k + j];
                        }
                    });
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                let g = go[0];
                self.deposit_with(grads, *x, n, |buf| {
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let g = go[0] / n as f64;
                self.deposit_with(grads, *x, n, |buf| {
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::CeRows { logits, targets } => {
                // d logits = go[r] * (softmax(logits[r]) - onehot(target r))
                let s = self.shape(*logits).to_vec();
                let (rows, classes) = (s[0], s[1]);
                let ld = self.value(*logits).data();
                self.deposit_with(grads, *logits, rows * classes, |buf| {
                    for r in 0..rows {
                        let g = go[r];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &ld[r * classes..(r + 1) * classes];
                        let lse = log_sum_exp(row);
                        let brow = &mut buf[r * classes..(r + 1) * classes];
                        for (j, (b, &l)) in brow.iter_mut().zip(row).enumerate() {
                            let p = (l - lse).exp();
                            let y = if j == targets[r] { 1.0 } else { 0.0 };
                            *b += g * (p - y);
                        }
                    }
                });
            }
            Op::TopkSelect { scores, rows } => {
                let m = self.shape(*scores)[1];
                let k = node.value.shape()[1];
                self.deposit_with(grads, *scores, rows.len() * m, |buf| {
                    for (r, sel) in rows.iter().enumerate() {
                        for (slot, &col) in sel.cols.iter().enumerate() {
                            buf[r * m + col] += go[r * k + slot];
                        }
                    }
                });
            }
            Op::AttendSum { weights, rows } => {
                let k = self.shape(*weights)[1];
                let width = node.value.shape()[1];
                let wd = self.value(*weights).data();
                for (r, slots) in rows.iter().enumerate() {
                    let gorow = &go[r * width..(r + 1) * width];
                    for &(slot, mv) in slots {
                        let mrow = self.value(mv).row(r).to_vec();
                        self.deposit_with(grads, *weights, rows.len() * k, |buf| {
                            buf[r * k + slot] += dot(gorow, &mrow);
                        });
                        let w = wd[r * k + slot];
                        let n_rows = rows.len();
                        self.deposit_with(grads, mv, n_rows * width, |buf| {
                            let brow = &mut buf[r * width..(r + 1) * width];
                            for (b, &g) in brow.iter_mut().zip(gorow) {
                                *b += w * g;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Result of a backward sweep, queryable by node handle or parameter id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient buffer for a node, if any gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients recorded on the originating tape. Parameters
    /// no gradient reached yield `None` and mean an exact zero.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }
}

/// Pure top-k selection used by the tape op: greatest `k` scores win, ties
/// broken toward the greater index, threshold is the next value down (or
/// min-1 when there is no next value). Entries not strictly above the
/// threshold are dropped.
pub(crate) fn select_top_k(scores: &[f64], k: usize) -> RowSelection {
    let m = scores.len();
    let mut order: Vec<usize> = (0..m).collect();
    // Descending score; greater index first among equals.
    order.sort_unstable_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(j.cmp(&i)));
    let tau = if m > k {
        scores[order[k]]
    } else {
        scores.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0
    };
    let mut cols: Vec<usize> = order
        .iter()
        .take(k)
        .copied()
        .filter(|&c| scores[c] - tau > 0.0)
        .collect();
    cols.sort_unstable();
    RowSelection { cols, tau }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, &d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// C[m,n] (+)= A·B with optional transposed storage for either operand.
/// `a_t` means `a` is stored `[k,m]` row-major, likewise `b_t` `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.5, 2.0, -1.0]));
        let c = tape.matmul_nt(a, b).unwrap();
        // b transposed is [[1,0.5],[0,2],[1,-1]]
        let expect = [
            1.0 + 3.0,
            0.5 + 4.0 - 3.0,
            4.0 + 6.0,
            2.0 + 10.0 - 6.0,
        ];
        for (got, want) in tape.value(c).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_and_sigmoid_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(vec![0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn concat_and_empty_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1.0, 2.0]));
        let b = tape.constant(t(vec![3.0]));
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let e = tape.constant(t(vec![]));
        let f = tape.constant(t(vec![5.0]));
        let g = tape.concat(e, f, 0).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0]);
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1.0, 2.0]));
        let b = tape.leaf(t(vec![3.0]));
        let c = tape.concat(a, b, 0).unwrap();
        let g = tape
            .backward_seeded(&[(c, vec![10.0, 20.0, 30.0])])
            .unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[10.0, 20.0]);
        assert_eq!(g.wrt(b).unwrap(), &[30.0]);
    }

    #[test]
    fn reduce_sum_and_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 6.0);
        let y = tape.leaf(t(vec![2.0, 4.0]));
        let m = tape.mean(y);
        assert_eq!(tape.value(m).item(), 3.0);

        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_logits_ce_is_ln_classes() {
        let mut tape = Tape::new();
        for classes in [2usize, 5, 9] {
            let logits = tape.constant(Tensor::matrix(1, classes, vec![0.3; classes]));
            let ce = tape.softmax_ce_rows(logits, &[classes - 1]).unwrap();
            let got = tape.value(ce).data()[0];
            assert!((got - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_rejects_bad_class_index() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]));
        let err = tape.softmax_ce_rows(logits, &[3]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn mse_of_equal_tensors_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![1.0, 2.0]));
        let y = tape.constant(t(vec![1.0, 2.0]));
        let l = tape.mse(p, y).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn stop_gradient_identity_forward_zero_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3.5]));
        let gx = tape.stop_gradient(x);
        assert_eq!(tape.value(gx).data(), tape.value(x).data());

        // loss = sum(stop_gradient(x)) -> grad x exactly absent/zero
        let l = tape.sum(gx);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn stop_gradient_product_rule_one_path_gated() {
        // loss = sum(stop_gradient(x) * x): grad x = value of x
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2.0, -3.0]));
        let xg = tape.stop_gradient(x);
        let p = tape.mul(xg, x).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, -3.0]);
    }

    #[test]
    fn linear_loss_gradient() {
        // loss = sum(2x), x = [1, 1] -> grad [2, 2]
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1.0, 1.0]));
        let y = tape.scale(x, 2.0);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn two_seeds_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, 4.0);
        let g = tape
            .backward_seeded(&[(a, vec![1.0]), (b, vec![1.0])])
            .unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn select_top_k_stated_case() {
        let sel = select_top_k(&[0.5, 2.0, 1.0, 3.0], 2);
        assert_eq!(sel.cols, vec![1, 3]);
        assert_eq!(sel.tau, 1.0);
    }

    #[test]
    fn select_top_k_fewer_candidates() {
        let sel = select_top_k(&[-0.3], 1);
        assert_eq!(sel.cols, vec![0]);
        assert_eq!(sel.tau, -1.3);
    }

    #[test]
    fn select_top_k_tie_handling() {
        // Two equal best scores and k = 1: the more recent column is ranked
        // first, the other tied value becomes the threshold, and the
        // subtraction leaves weight 0, which is dropped. Nothing survives.
        let sel = select_top_k(&[2.0, 2.0, 1.0], 1);
        assert_eq!(sel.tau, 2.0);
        assert!(sel.cols.is_empty());

        // Both tied values fit inside k: both survive with equal weight.
        let sel = select_top_k(&[2.0, 2.0, 0.5], 2);
        assert_eq!(sel.tau, 0.5);
        assert_eq!(sel.cols, vec![0, 1]);

        // Tie at the threshold below a clear winner: the tied candidate is
        // selected over its equal-valued earlier twin but still gets
        // weight 0 and is dropped.
        let sel = select_top_k(&[3.0, 2.0, 2.0, 1.0], 2);
        assert_eq!(sel.tau, 2.0);
        assert_eq!(sel.cols, vec![0]);
    }

    #[test]
    fn topk_select_weights_and_padding() {
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::matrix(1, 4, vec![0.5, 2.0, 1.0, 3.0]));
        let (w, sel) = tape.topk_select(scores, 2).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0, 2.0]); // cols 1 and 3, ascending
        assert_eq!(sel[0].cols, vec![1, 3]);

        // backward routes slot gradients to the selected columns only
        let g = tape.backward_seeded(&[(w, vec![10.0, 20.0])]).unwrap();
        assert_eq!(g.wrt(scores).unwrap(), &[0.0, 10.0, 0.0, 20.0]);
    }

    #[test]
    fn attend_sum_one_hot_returns_microstate() {
        let mut tape = Tape::new();
        let m0 = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let w = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let s = tape.attend_sum(w, vec![vec![(0, m0)]], 3).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0]);

        let g = tape
            .backward_seeded(&[(s, vec![1.0, 1.0, 1.0])])
            .unwrap();
        assert_eq!(g.wrt(m0).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.wrt(w).unwrap(), &[6.0, 0.0]);
    }

    #[test]
    fn backward_visits_are_linear_in_nodes() {
        // A long chain: backward must complete quickly and touch each node
        // once; mostly a smoke test for the reverse sweep structure.
        let mut tape = Tape::new();
        let mut x = tape.leaf(t(vec![1.0]));
        for _ in 0..10_000 {
            x = tape.scale(x, 1.0001);
        }
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(Var(0)).unwrap()[0] > 1.0);
    }
}
