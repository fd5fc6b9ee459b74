//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A `Tape` records primitive operations in execution order; `backward`
//! walks the record in reverse, accumulating gradients by summation.
//! Parameter tensors are registered as borrowed leaves so that a tape can
//! be rebuilt every mini-batch without copying the model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_into, matmul_ta_into, matmul_tb_into, real, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Whether a forward pass is a training pass (dropout active, masks drawn
/// from the supplied generator) or an evaluation pass (dropout disabled).
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Eval,
}

enum Value<'p, F: Real> {
    Borrowed(&'p Tensor<F>),
    Owned(Tensor<F>),
}

impl<'p, F: Real> Value<'p, F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulTB(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Mul(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Dropout(Var, Vec<F>),
    LookupRows(Var, Vec<usize>),
    MaskedSoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Tensor<F>,
    },
    Scale(Var, F),
}

struct Node<'p, F: Real> {
    value: Value<'p, F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Records a computation and produces gradients for its leaves.
pub struct Tape<'p, F: Real> {
    nodes: Vec<Node<'p, F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<'p, F: Real> Default for Tape<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register a borrowed leaf (a model parameter, when `requires_grad`).
    pub fn leaf(&mut self, t: &'p Tensor<F>, requires_grad: bool) -> Var {
        self.push(Value::Borrowed(t), requires_grad, Op::Leaf)
    }

    /// Register an owned constant (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Value::Owned(t), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0].value.get()
    }

    /// Value of a 1x1 node as `f64`.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.shape() != (1, 1) {
            return Err(Error::LossNotScalar {
                rows: t.rows(),
                cols: t.cols(),
            });
        }
        Ok(t.data()[0].to_f64().unwrap())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Value<'p, F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        let detail = vars
            .iter()
            .map(|v| self.value(*v).shape_str())
            .collect::<Vec<_>>()
            .join(", ");
        Error::Shape { op, detail }
    }

    // ---- primitives -----------------------------------------------------

    /// a @ b
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        matmul_into(ta, tb, &mut out, F::zero());
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Value::Owned(out), rg, Op::MatMul(a, b)))
    }

    /// a @ b^T, with b stored as an `n x k` matrix.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(self.shape_err("matmul_tb", &[a, b]));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        matmul_tb_into(ta, tb, &mut out, F::zero());
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Value::Owned(out), rg, Op::MatMulTB(a, b)))
    }

    /// Elementwise a + b.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("add", &[a, b]));
        }
        let mut out = ta.clone();
        out.add_scaled(tb, F::one());
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Value::Owned(out), rg, Op::Add(a, b)))
    }

    /// Add a 1 x c bias row to every row of a.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || ta.cols() != tb.cols() {
            return Err(self.shape_err("add_row_bias", &[a, bias]));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tb.row(0)) {
                *o = *o + b;
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(Value::Owned(out), rg, Op::AddRowBias(a, bias)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let v = x.to_f64().unwrap();
            real(1.0 / (1.0 + (-v).exp()))
        });
        let rg = self.requires(a);
        self.push(Value::Owned(out), rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| real(x.to_f64().unwrap().tanh()));
        let rg = self.requires(a);
        self.push(Value::Owned(out), rg, Op::Tanh(a))
    }

    /// Elementwise a * b.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("mul", &[a, b]));
        }
        let mut out = ta.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o = *o * x;
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Value::Owned(out), rg, Op::Mul(a, b)))
    }

    /// Horizontal concatenation: rows of a followed by rows of b.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(self.shape_err("concat_cols", &[a, b]));
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
        for r in 0..ta.rows() {
            let orow = out.row_mut(r);
            orow[..ta.cols()].copy_from_slice(ta.row(r));
            orow[ta.cols()..].copy_from_slice(tb.row(r));
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Value::Owned(out), rg, Op::ConcatCols(a, b)))
    }

    /// Columns `from..to` of a.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let ta = self.value(a);
        if from >= to || to > ta.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("columns {from}..{to} of {}", ta.shape_str()),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), to - from);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[from..to]);
        }
        let rg = self.requires(a);
        Ok(self.push(Value::Owned(out), rg, Op::SliceCols(a, from)))
    }

    /// Inverted dropout at rate `p`: in training mode each element is zeroed
    /// with probability `p` and survivors are scaled by `1/(1-p)`; in eval
    /// mode this is the identity. `p == 0` is a no-op in both modes.
    pub fn dropout(&mut self, a: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let rng = match mode {
            Mode::Eval => return Ok(a),
            Mode::Train(rng) => rng,
        };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = real::<F>(1.0 / (1.0 - p));
        let ta = self.value(a);
        let mask: Vec<F> = (0..ta.len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let mut out = ta.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        let rg = self.requires(a);
        Ok(self.push(Value::Owned(out), rg, Op::Dropout(a, mask)))
    }

    /// Gather rows of `table` by index; output row r is `table[ids[r]]`.
    pub fn lookup_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(Error::Shape {
                op: "lookup_rows",
                detail: format!("row {bad} of {}", tt.shape_str()),
            });
        }
        let mut out = Tensor::zeros(ids.len(), tt.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tt.row(id));
        }
        let rg = self.requires(table);
        Ok(self.push(Value::Owned(out), rg, Op::LookupRows(table, ids.to_vec())))
    }

    /// Sum over active rows of the softmax cross-entropy against `targets`.
    /// Inactive rows contribute nothing to the value or the gradient.
    /// Output is 1x1.
    pub fn masked_softmax_xent(
        &mut self,
        logits: Var,
        targets: &[usize],
        active: &[bool],
    ) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.rows() || active.len() != tl.rows() {
            return Err(Error::Shape {
                op: "masked_softmax_xent",
                detail: format!(
                    "{} logit rows, {} targets, {} mask entries",
                    tl.rows(),
                    targets.len(),
                    active.len()
                ),
            });
        }
        if let Some((r, &t)) = targets
            .iter()
            .enumerate()
            .find(|&(r, &t)| active[r] && t >= tl.cols())
        {
            return Err(Error::Shape {
                op: "masked_softmax_xent",
                detail: format!("target class {t} in row {r} of {}", tl.shape_str()),
            });
        }
        let mut probs = Tensor::zeros(tl.rows(), tl.cols());
        let mut total = 0.0f64;
        for r in 0..tl.rows() {
            let row = tl.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = 0.0f64;
            for &x in row {
                denom += (x - max).to_f64().unwrap().exp();
            }
            for (o, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *o = real((x - max).to_f64().unwrap().exp() / denom);
            }
            if active[r] {
                total += denom.ln() - (row[targets[r]] - max).to_f64().unwrap();
            }
        }
        let out = Tensor::from_elem(1, 1, real(total));
        let rg = self.requires(logits);
        Ok(self.push(
            Value::Owned(out),
            rg,
            Op::MaskedSoftmaxXent {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
            },
        ))
    }

    /// a * c for a scalar constant c.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.requires(a);
        self.push(Value::Owned(out), rg, Op::Scale(a, c))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulate gradients of `loss` (a 1x1 node) with respect to every
    /// `requires_grad` node. Gradients sum across all uses of a tensor;
    /// leaves that did not participate simply receive no entry.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::LossNotScalar {
                rows: lt.rows(),
                cols: lt.cols(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_elem(1, 1, F::one()));

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                if !self.nodes[i].requires_grad {
                    grads[i] = None;
                }
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep the accumulated gradient for retrieval
            }
            let g = grads[i].take().expect("gradient present");
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let one = F::one();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    matmul_tb_into(g, self.value(*b), ga, one);
                }
                if self.requires(*b) {
                    let (r, c) = self.value(*b).shape();
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    matmul_ta_into(self.value(*a), g, gb, one);
                }
            }
            Op::MatMulTB(a, b) => {
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    matmul_into(g, self.value(*b), ga, one);
                }
                if self.requires(*b) {
                    let (r, c) = self.value(*b).shape();
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    matmul_ta_into(g, self.value(*a), gb, one);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires(*v) {
                        let (r, c) = self.value(*v).shape();
                        let gv = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
                        gv.add_scaled(g, one);
                    }
                }
            }
            Op::AddRowBias(a, bias) => {
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    ga.add_scaled(g, one);
                }
                if self.requires(*bias) {
                    let (r, c) = self.value(*bias).shape();
                    let gb = grads[bias.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for row in 0..g.rows() {
                        for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(row)) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(*a) {
                    let y = self.value(Var(i));
                    let (r, c) = y.shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for ((o, &gy), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o = *o + gy * yv * (one - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.requires(*a) {
                    let y = self.value(Var(i));
                    let (r, c) = y.shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for ((o, &gy), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o = *o + gy * (one - yv * yv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let other = self.value(*b);
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for ((o, &gy), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(other.data())
                    {
                        *o = *o + gy * bv;
                    }
                }
                if self.requires(*b) {
                    let (r, c) = self.value(*b).shape();
                    let other = self.value(*a);
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for ((o, &gy), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(other.data())
                    {
                        *o = *o + gy * av;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for row in 0..g.rows() {
                        for (o, &x) in ga.row_mut(row).iter_mut().zip(&g.row(row)[..ca]) {
                            *o = *o + x;
                        }
                    }
                }
                if self.requires(*b) {
                    let (r, c) = self.value(*b).shape();
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for row in 0..g.rows() {
                        for (o, &x) in gb.row_mut(row).iter_mut().zip(&g.row(row)[ca..]) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::SliceCols(a, from) => {
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for row in 0..g.rows() {
                        let dst = &mut ga.row_mut(row)[*from..*from + g.cols()];
                        for (o, &x) in dst.iter_mut().zip(g.row(row)) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for ((o, &gy), &m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o = *o + gy * m;
                    }
                }
            }
            Op::LookupRows(table, ids) => {
                if self.requires(*table) {
                    let (r, c) = self.value(*table).shape();
                    let gt = grads[table.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for (row, &id) in ids.iter().enumerate() {
                        for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(row)) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::MaskedSoftmaxXent {
                logits,
                targets,
                active,
                probs,
            } => {
                if self.requires(*logits) {
                    let s = g.data()[0];
                    let (r, c) = probs.shape();
                    let gl = grads[logits.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for row in 0..r {
                        if !active[row] {
                            continue;
                        }
                        for (o, &p) in gl.row_mut(row).iter_mut().zip(probs.row(row)) {
                            *o = *o + s * p;
                        }
                        let t = targets[row];
                        let cur = gl.at(row, t);
                        gl.set(row, t, cur - s);
                    }
                }
            }
            Op::Scale(a, cst) => {
                if self.requires(*a) {
                    let (r, c) = self.value(*a).shape();
                    let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    ga.add_scaled(g, *cst);
                }
            }
        }
    }

    /// Gradient accumulated for `v` by the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient for `v`, materializing zeros when the node did not
    /// participate in the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<F> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scalar_tensor(v: f64) -> Tensor<f64> {
        Tensor::from_elem(1, 1, v)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::zeros(2, 2);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, false);
        let y = tape.sigmoid(v);
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn uniform_logits_xent_is_ln2() {
        let logits = Tensor::zeros(1, 2);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&logits, false);
        let l = tape.masked_softmax_xent(v, &[0], &[true]).unwrap();
        assert!((tape.scalar(l).unwrap() - (2.0f64).ln()).abs() < 1e-12);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&logits, false);
        let l = tape.masked_softmax_xent(v, &[1], &[true]).unwrap();
        assert!((tape.scalar(l).unwrap() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_shift_invariance_and_stability() {
        let logits = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let shifted = logits.map(|x| x + 1000.0);
        let mut t1: Tape<f64> = Tape::new();
        let v1 = t1.leaf(&logits, false);
        let l1 = t1.masked_softmax_xent(v1, &[2], &[true]).unwrap();
        let mut t2: Tape<f64> = Tape::new();
        let v2 = t2.leaf(&shifted, false);
        let l2 = t2.masked_softmax_xent(v2, &[2], &[true]).unwrap();
        let (a, b) = (t1.scalar(l1).unwrap(), t2.scalar(l2).unwrap());
        assert!(a.is_finite() && b.is_finite());
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let logits = Tensor::from_vec(2, 2, vec![0.0, 0.0, 50.0, -50.0]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&logits, true);
        let l = tape
            .masked_softmax_xent(v, &[0, 1], &[true, false])
            .unwrap();
        assert!((tape.scalar(l).unwrap() - (2.0f64).ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        assert_eq!(g.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        // sum(x) written as ones-row @ x @ ones-col
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, true);
        let left = tape.constant(Tensor::from_elem(1, 2, 1.0));
        let right = tape.constant(Tensor::from_elem(3, 1, 1.0));
        let partial = tape.matmul(left, v).unwrap();
        let s = tape.matmul(partial, right).unwrap();
        assert!((tape.scalar(s).unwrap() - 21.0).abs() < 1e-12);
        tape.backward(s).unwrap();
        let g = tape.grad(v).unwrap();
        assert!(g.data().iter().all(|&e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn quadratic_gradient() {
        // y = x * x at x = 3 -> dy/dx = 6
        let x = scalar_tensor(3.0);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, true);
        let y = tape.mul(v, v).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(v).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // y = x + x -> dy/dx = 2
        let x = scalar_tensor(1.5);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, true);
        let y = tape.add(v, v).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(v).unwrap().data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nonparticipating_leaf_gets_zero() {
        let x = scalar_tensor(2.0);
        let unused = Tensor::zeros(3, 4);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, true);
        let u = tape.leaf(&unused, true);
        let y = tape.mul(v, v).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(u).is_none());
        let z = tape.grad_or_zeros(u);
        assert_eq!(z.shape(), (3, 4));
        assert!(z.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(2, 2);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, true);
        assert!(matches!(
            tape.backward(v),
            Err(Error::LossNotScalar { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 3);
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(&a, false);
        let vb = tape.leaf(&b, false);
        let err = tape.matmul(va, vb).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn dropout_identity_in_eval_and_scaling_in_train() {
        let x = Tensor::from_elem(4, 4, 2.0);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, true);
        let e = tape.dropout(v, 0.5, &mut Mode::Eval).unwrap();
        assert_eq!(e, v); // identity: same node

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = tape.dropout(v, 0.5, &mut Mode::Train(&mut rng)).unwrap();
        for &y in tape.value(t).data() {
            assert!(y == 0.0 || (y - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_gradient_equals_mask() {
        // With y = dropout(x), dy/dx per element is y/x for x != 0.
        let x = Tensor::from_elem(3, 3, 2.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(&x, true);
        let y = tape.dropout(v, 0.4, &mut Mode::Train(&mut rng)).unwrap();
        let ones_l = tape.constant(Tensor::from_elem(1, 3, 1.0));
        let ones_r = tape.constant(Tensor::from_elem(3, 1, 1.0));
        let p = tape.matmul(ones_l, y).unwrap();
        let s = tape.matmul(p, ones_r).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(v).unwrap().clone();
        let yv = tape.value(y).clone();
        for (gi, yi) in g.data().iter().zip(yv.data()) {
            assert!((gi - yi / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        // Sample mean over >= 1e4 draws within 3 standard errors.
        let p = 0.3;
        let val = 1.7;
        let x = Tensor::from_elem(1, 1, val);
        let n = 20_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut sum = 0.0;
        for _ in 0..n {
            let mut tape: Tape<f64> = Tape::new();
            let v = tape.leaf(&x, false);
            let y = tape.dropout(v, p, &mut Mode::Train(&mut rng)).unwrap();
            sum += tape.value(y).data()[0];
        }
        let mean = sum / n as f64;
        let q = 1.0 - p;
        let var = val * val * (1.0 - q) / q;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - val).abs() < 3.0 * se,
            "mean {mean} not within 3 SE ({se}) of {val}"
        );
    }

    #[test]
    fn lookup_rows_gathers_and_scatters() {
        let table = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.leaf(&table, true);
        let y = tape.lookup_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(y).row(0), &[5.0, 6.0]);
        assert_eq!(tape.value(y).row(1), &[1.0, 2.0]);
        let l = tape.constant(Tensor::from_elem(1, 3, 1.0));
        let r = tape.constant(Tensor::from_elem(2, 1, 1.0));
        let s1 = tape.matmul(l, y).unwrap();
        let s = tape.matmul(s1, r).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(t).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(g.row(0), &[1.0, 1.0]);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert_eq!(g.row(2), &[2.0, 2.0]);
    }
}
