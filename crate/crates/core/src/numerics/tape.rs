//! Reverse-mode differentiation over a linear record of vector operations.
//!
//! Every value on the tape is a flat `f64` vector (scalars have length 1).
//! Matrices only appear as parameters, referenced by [`ParamId`] so the
//! forward pass never copies weights.

use super::params::{GradientMap, ParamId, ParameterSet};
use super::tensor::{axpy, dot, matvec_acc, sigmoid, softmax};
use crate::error::{ensure_contract, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Embed {
        table: ParamId,
        row: usize,
    },
    /// `Σ_i W_i x_i + b`
    Affine {
        terms: Vec<(ParamId, Var)>,
        bias: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    /// `(1 - z) ⊙ h + z ⊙ c`
    GruMix {
        z: Var,
        h: Var,
        cand: Var,
    },
    Concat(Vec<Var>),
    Softmax(Var),
    /// `-log softmax(logits)[target]`; keeps the probabilities for backward.
    NegLogSoftmax {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    /// `Σ_{i ∈ indices} x[i]` as a scalar.
    SumAt {
        x: Var,
        indices: Vec<usize>,
    },
    /// `s_j = hᵀ W k_j`
    Bilinear {
        w: ParamId,
        h: Var,
        keys: Vec<Var>,
    },
    /// `Σ_j a[j] v_j`
    WeightedSum {
        weights: Var,
        values: Vec<Var>,
    },
    /// Sum of scalars.
    SumScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation against a fixed parameter set.
pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(vec![0.0; n])
    }

    pub fn embed(&mut self, table: ParamId, row: usize) -> Result<Var> {
        let t = self.params.value(table);
        ensure_contract!(
            t.rank() == 2 && row < t.rows(),
            "token id {row} out of range for embedding `{}` with {} rows",
            self.params.name(table),
            t.rows()
        );
        Ok(self.push(t.row(row).to_vec(), Op::Embed { table, row }, true))
    }

    /// `Σ_i W_i x_i + b` where each `W_i` is a rank-2 parameter.
    pub fn affine(&mut self, terms: &[(ParamId, Var)], bias: Option<ParamId>) -> Result<Var> {
        let rows = match (terms.first(), bias) {
            (Some((w, _)), _) => self.params.value(*w).shape()[0],
            (None, Some(b)) => self.params.value(b).len(),
            (None, None) => return Err(crate::Error::contract("affine needs at least one term")),
        };
        let mut out = match bias {
            Some(b) => {
                let bt = self.params.value(b);
                ensure_contract!(
                    bt.len() == rows,
                    "bias `{}` has {} entries, expected {rows}",
                    self.params.name(b),
                    bt.len()
                );
                bt.data().to_vec()
            }
            None => vec![0.0; rows],
        };
        for &(w, x) in terms {
            let wt = self.params.value(w);
            let xv = &self.nodes[x.0].value;
            ensure_contract!(
                wt.rank() == 2 && wt.shape()[0] == rows && wt.shape()[1] == xv.len(),
                "weight `{}` has shape {:?}, expected [{rows}, {}]",
                self.params.name(w),
                wt.shape(),
                xv.len()
            );
            matvec_acc(wt.data(), xv, &mut out);
        }
        Ok(self.push(
            out,
            Op::Affine {
                terms: terms.to_vec(),
                bias,
            },
            true,
        ))
    }

    fn same_dim(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure_contract!(
            self.dim(a) == self.dim(b),
            "{what}: operand lengths differ ({} vs {})",
            self.dim(a),
            self.dim(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dim(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dim(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dim(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), n))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        let n = self.needs(a);
        self.push(v, Op::Scale(a, k), n)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| 1.0 - x).collect();
        let n = self.needs(a);
        self.push(v, Op::OneMinus(a), n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let n = self.needs(a);
        self.push(v, Op::Sigmoid(a), n)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        let n = self.needs(a);
        self.push(v, Op::Tanh(a), n)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        let n = self.needs(a);
        self.push(v, Op::Ln(a), n)
    }

    pub fn gru_mix(&mut self, z: Var, h: Var, cand: Var) -> Result<Var> {
        self.same_dim(z, h, "gru update")?;
        self.same_dim(z, cand, "gru update")?;
        let (zv, hv, cv) = (self.value(z), self.value(h), self.value(cand));
        let v = (0..zv.len()).map(|i| (1.0 - zv[i]) * hv[i] + zv[i] * cv[i]).collect();
        let n = self.needs(z) || self.needs(h) || self.needs(cand);
        Ok(self.push(v, Op::GruMix { z, h, cand }, n))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.dim(p)).sum();
        let mut v = Vec::with_capacity(total);
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        let n = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::Concat(parts.to_vec()), n)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        let n = self.needs(a);
        self.push(v, Op::Softmax(a), n)
    }

    /// Cross-entropy of `softmax(logits)` against `target`, as a scalar.
    pub fn neg_log_softmax(&mut self, logits: Var, target: usize) -> Result<Var> {
        let probs = softmax(self.value(logits));
        ensure_contract!(
            target < probs.len(),
            "target id {target} out of range for {} logits",
            probs.len()
        );
        let loss = -probs[target].ln();
        let n = self.needs(logits);
        Ok(self.push(vec![loss], Op::NegLogSoftmax { logits, target, probs }, n))
    }

    pub fn sum_at(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        ensure_contract!(indices.iter().all(|&i| i < xv.len()), "index out of range in sum_at");
        let s = indices.iter().map(|&i| xv[i]).sum();
        let n = self.needs(x);
        Ok(self.push(
            vec![s],
            Op::SumAt {
                x,
                indices: indices.to_vec(),
            },
            n,
        ))
    }

    pub fn bilinear(&mut self, w: ParamId, h: Var, keys: &[Var]) -> Result<Var> {
        let wt = self.params.value(w);
        let hv = self.value(h);
        ensure_contract!(
            wt.rank() == 2 && wt.shape()[0] == hv.len(),
            "bilinear weight `{}` has shape {:?}, query has {}",
            self.params.name(w),
            wt.shape(),
            hv.len()
        );
        // u = Wᵀ h, then s_j = u · k_j
        let cols = wt.shape()[1];
        let mut u = vec![0.0; cols];
        for (i, &hi) in hv.iter().enumerate() {
            axpy(hi, wt.row(i), &mut u);
        }
        let mut scores = Vec::with_capacity(keys.len());
        for &k in keys {
            let kv = self.value(k);
            ensure_contract!(
                kv.len() == cols,
                "bilinear key has {} entries, expected {cols}",
                kv.len()
            );
            scores.push(dot(&u, kv));
        }
        Ok(self.push(
            scores,
            Op::Bilinear {
                w,
                h,
                keys: keys.to_vec(),
            },
            true,
        ))
    }

    pub fn weighted_sum(&mut self, weights: Var, values: &[Var]) -> Result<Var> {
        ensure_contract!(
            self.dim(weights) == values.len() && !values.is_empty(),
            "weighted sum needs one weight per value"
        );
        let d = self.dim(values[0]);
        let mut out = vec![0.0; d];
        for (j, &v) in values.iter().enumerate() {
            ensure_contract!(self.dim(v) == d, "weighted sum values differ in length");
            let a = self.nodes[weights.0].value[j];
            axpy(a, &self.nodes[v.0].value, &mut out);
        }
        let n = self.needs(weights) || values.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                values: values.to_vec(),
            },
            n,
        ))
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        ensure_contract!(
            xs.iter().all(|&x| self.dim(x) == 1),
            "sum_scalars expects scalar operands"
        );
        let s = xs.iter().map(|&x| self.scalar(x)).sum();
        let n = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(vec![s], Op::SumScalars(xs.to_vec()), n))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let mut grads = GradientMap::for_params(self.params);
        self.backward_into(loss, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `seed · ∂loss/∂θ` into `grads`.
    pub fn backward_into(&self, loss: Var, seed: f64, grads: &mut GradientMap) -> Result<()> {
        ensure_contract!(
            self.dim(loss) == 1,
            "backward needs a scalar loss, got length {}",
            self.dim(loss)
        );
        ensure_contract!(
            grads.len() == self.params.len(),
            "gradient map does not belong to this parameter set"
        );
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Embed { table, row } => {
                    let cols = g.len();
                    let buf = grads.buffer(*table);
                    axpy(1.0, &g, &mut buf[row * cols..(row + 1) * cols]);
                }
                Op::Affine { terms, bias } => {
                    if let Some(b) = bias {
                        axpy(1.0, &g, grads.buffer(*b));
                    }
                    for &(w, x) in terms {
                        let wt = self.params.value(w);
                        let xv = &self.nodes[x.0].value;
                        let cols = xv.len();
                        {
                            let gw = grads.buffer(w);
                            for (i, &gi) in g.iter().enumerate() {
                                if gi != 0.0 {
                                    axpy(gi, xv, &mut gw[i * cols..(i + 1) * cols]);
                                }
                            }
                        }
                        if self.needs(x) {
                            let gx = acc_slot(&mut adj, x, cols);
                            for (i, &gi) in g.iter().enumerate() {
                                if gi != 0.0 {
                                    axpy(gi, wt.row(i), gx);
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, &g);
                    self.acc(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *a, &g);
                    if self.needs(*b) {
                        let gb = acc_slot(&mut adj, *b, g.len());
                        axpy(-1.0, &g, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.needs(*a) {
                        let ga = acc_slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if self.needs(*b) {
                        let gb = acc_slot(&mut adj, *b, g.len());
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale(a, k) => {
                    if self.needs(*a) {
                        axpy(*k, &g, acc_slot(&mut adj, *a, g.len()));
                    }
                }
                Op::OneMinus(a) => {
                    if self.needs(*a) {
                        axpy(-1.0, &g, acc_slot(&mut adj, *a, g.len()));
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let ga = acc_slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let ga = acc_slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                }
                Op::Ln(a) => {
                    if self.needs(*a) {
                        let x = &self.nodes[a.0].value;
                        let ga = acc_slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] / x[i];
                        }
                    }
                }
                Op::GruMix { z, h, cand } => {
                    let zv = &self.nodes[z.0].value;
                    let hv = &self.nodes[h.0].value;
                    let cv = &self.nodes[cand.0].value;
                    if self.needs(*z) {
                        let gz = acc_slot(&mut adj, *z, g.len());
                        for i in 0..g.len() {
                            gz[i] += g[i] * (cv[i] - hv[i]);
                        }
                    }
                    if self.needs(*h) {
                        let gh = acc_slot(&mut adj, *h, g.len());
                        for i in 0..g.len() {
                            gh[i] += g[i] * (1.0 - zv[i]);
                        }
                    }
                    if self.needs(*cand) {
                        let gc = acc_slot(&mut adj, *cand, g.len());
                        for i in 0..g.len() {
                            gc[i] += g[i] * zv[i];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let d = self.dim(p);
                        if self.needs(p) {
                            axpy(1.0, &g[off..off + d], acc_slot(&mut adj, p, d));
                        }
                        off += d;
                    }
                }
                Op::Softmax(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let inner = dot(&g, y);
                        let ga = acc_slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += y[i] * (g[i] - inner);
                        }
                    }
                }
                Op::NegLogSoftmax { logits, target, probs } => {
                    if self.needs(*logits) {
                        let gl = acc_slot(&mut adj, *logits, probs.len());
                        axpy(g[0], probs, gl);
                        gl[*target] -= g[0];
                    }
                }
                Op::SumAt { x, indices } => {
                    if self.needs(*x) {
                        let gx = acc_slot(&mut adj, *x, self.dim(*x));
                        for &i in indices {
                            gx[i] += g[0];
                        }
                    }
                }
                Op::Bilinear { w, h, keys } => {
                    let wt = self.params.value(*w);
                    let hv = &self.nodes[h.0].value;
                    let cols = wt.shape()[1];
                    // dL/dW = Σ_j g_j h k_jᵀ ; dL/dh = W Σ_j g_j k_j ; dL/dk_j = g_j Wᵀ h
                    let mut kbar = vec![0.0; cols];
                    for (j, &k) in keys.iter().enumerate() {
                        axpy(g[j], &self.nodes[k.0].value, &mut kbar);
                    }
                    {
                        let gw = grads.buffer(*w);
                        for (i, &hi) in hv.iter().enumerate() {
                            if hi != 0.0 {
                                axpy(hi, &kbar, &mut gw[i * cols..(i + 1) * cols]);
                            }
                        }
                    }
                    if self.needs(*h) {
                        let gh = acc_slot(&mut adj, *h, hv.len());
                        for (i, ghi) in gh.iter_mut().enumerate() {
                            *ghi += dot(wt.row(i), &kbar);
                        }
                    }
                    if keys.iter().any(|&k| self.needs(k)) {
                        let mut u = vec![0.0; cols];
                        for (i, &hi) in hv.iter().enumerate() {
                            axpy(hi, wt.row(i), &mut u);
                        }
                        for (j, &k) in keys.iter().enumerate() {
                            if self.needs(k) {
                                axpy(g[j], &u, acc_slot(&mut adj, k, cols));
                            }
                        }
                    }
                }
                Op::WeightedSum { weights, values } => {
                    let wv = &self.nodes[weights.0].value;
                    if self.needs(*weights) {
                        let gw: Vec<f64> = values.iter().map(|&v| dot(&g, &self.nodes[v.0].value)).collect();
                        axpy(1.0, &gw, acc_slot(&mut adj, *weights, gw.len()));
                    }
                    for (j, &v) in values.iter().enumerate() {
                        if self.needs(v) {
                            axpy(wv[j], &g, acc_slot(&mut adj, v, g.len()));
                        }
                    }
                }
                Op::SumScalars(xs) => {
                    for &x in xs {
                        if self.needs(x) {
                            acc_slot(&mut adj, x, 1)[0] += g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.needs(v) {
            axpy(1.0, g, acc_slot(adj, v, g.len()));
        }
    }
}

fn acc_slot(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}
