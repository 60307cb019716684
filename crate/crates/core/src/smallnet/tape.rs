//! Reverse-mode gradient tape.
//!
//! The tape supports exactly the primitive set the training objectives in
//! this crate are built from: dense layers, tanh/relu, matrix products,
//! concatenation/slicing, row-wise cosine similarity and normalization,
//! absolute value, square, sums/means, a stabilized off-diagonal
//! log-sum-exp, batched cross-entropy, and KL divergence against a constant
//! target distribution.
//!
//! Values are computed eagerly as nodes are pushed, so the node list is
//! already a topological order; `backward` walks it once in reverse. A tape
//! is built, differentiated, and dropped within a single training step —
//! nothing is shared between threads.

use crate::error::{Error, Result};
use crate::smallnet::matrix::Matrix;
use crate::smallnet::params::{Activation, DenseParams, MlpLayer, MlpParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Dense { x: usize, w: usize, b: usize },
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Abs { a: usize },
    Square { a: usize },
    ConcatCols { a: usize, b: usize },
    SliceCols { a: usize, from: usize, to: usize },
    RowsUnit { a: usize },
    CosineRows { a: usize, b: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    LogSumExpOffDiagRows { a: usize },
    CrossEntropyMean { logits: usize, labels: Vec<usize> },
    KlTeacherMean { teacher: usize, logits: usize },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes that did not
/// influence the loss have no entry and read back as zeros.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, zeros if unreached.
    pub fn get(&self, tape: &Tape, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(var);
                Matrix::zeros(v.rows(), v.cols())
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input node (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x W + b` with `b` a `1 x out` row broadcast over the batch.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let bias = self.value(b);
        if bias.rows() != 1 || bias.cols() != self.value(w).cols() {
            return Err(Error::Shape(format!(
                "dense: bias {}x{} does not match weight {}x{}",
                bias.rows(),
                bias.cols(),
                self.value(w).rows(),
                self.value(w).cols()
            )));
        }
        let mut out = self.value(x).matmul(self.value(w))?;
        let bias = self.value(b).row(0).to_vec();
        for i in 0..out.rows() {
            for (v, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::Dense { x: x.0, w: w.0, b: b.0 }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `A B^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNT { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale { a: a.0, c })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddConst { a: a.0 })
    }

    pub fn activation(&mut self, a: Var, activation: Activation) -> Var {
        match activation {
            Activation::Identity => a,
            Activation::Tanh => {
                let out = self.value(a).map(f64::tanh);
                self.push(out, Op::Tanh { a: a.0 })
            }
            Activation::Relu => {
                let out = self.value(a).map(|v| v.max(0.0));
                self.push(out, Op::Relu { a: a.0 })
            }
        }
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs { a: a.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square { a: a.0 })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(out, Op::ConcatCols { a: a.0, b: b.0 }))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(from, to)?;
        Ok(self.push(out, Op::SliceCols { a: a.0, from, to }))
    }

    /// Normalizes every row to unit length. Errors on a zero-norm row.
    pub fn rows_unit(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let n = norm(x.row(i));
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("rows_unit row {i}")));
            }
            for (o, &v) in out.row_mut(i).iter_mut().zip(x.row(i)) {
                *o = v / n;
            }
        }
        Ok(self.push(out, Op::RowsUnit { a: a.0 }))
    }

    /// Cosine similarity of corresponding rows, as a `B x 1` column.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.rows() != xb.rows() || xa.cols() != xb.cols() {
            return Err(Error::Shape(format!(
                "cosine_rows: {}x{} vs {}x{}",
                xa.rows(),
                xa.cols(),
                xb.rows(),
                xb.cols()
            )));
        }
        let mut out = Matrix::zeros(xa.rows(), 1);
        for i in 0..xa.rows() {
            let (na, nb) = (norm(xa.row(i)), norm(xb.row(i)));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm(format!("cosine_rows row {i}")));
            }
            out.set(i, 0, dot(xa.row(i), xb.row(i)) / (na * nb));
        }
        Ok(self.push(out, Op::CosineRows { a: a.0, b: b.0 }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(
            Matrix::from_vec(1, 1, vec![s]).expect("1x1"),
            Op::SumAll { a: a.0 },
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let n = (v.rows() * v.cols()) as f64;
        self.push(
            Matrix::from_vec(1, 1, vec![s / n]).expect("1x1"),
            Op::MeanAll { a: a.0 },
        )
    }

    /// Row-wise `log sum_{k != j} exp(x_jk)` of a square matrix, with
    /// max-subtraction for stability. Needs at least two rows.
    pub fn log_sum_exp_off_diag_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != x.cols() {
            return Err(Error::Shape(format!(
                "log_sum_exp_off_diag_rows: {}x{} is not square",
                x.rows(),
                x.cols()
            )));
        }
        if x.rows() < 2 {
            return Err(Error::BatchTooSmall(x.rows()));
        }
        let b = x.rows();
        let mut out = Matrix::zeros(b, 1);
        for j in 0..b {
            let row = x.row(j);
            let m = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .map(|(_, &v)| (v - m).exp())
                .sum();
            out.set(j, 0, m + s.ln());
        }
        Ok(self.push(out, Op::LogSumExpOffDiagRows { a: a.0 }))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.rows() {
            return Err(Error::Shape(format!(
                "cross_entropy_mean: {} labels for {} rows",
                labels.len(),
                x.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= x.cols()) {
            return Err(Error::Shape(format!(
                "cross_entropy_mean: label {bad} out of range for {} classes",
                x.cols()
            )));
        }
        let b = x.rows();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row(i);
            let lse = log_sum_exp(row);
            total -= row[y] - lse;
        }
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![total / b as f64]).expect("1x1"),
            Op::CrossEntropyMean {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean row-wise `KL(teacher || softmax(logits))` where `teacher` holds
    /// probability rows and receives no gradient (a stop-gradient target).
    pub fn kl_teacher_mean(&mut self, teacher: Var, logits: Var) -> Result<Var> {
        let (p, x) = (self.value(teacher), self.value(logits));
        if p.rows() != x.rows() || p.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "kl_teacher_mean: {}x{} vs {}x{}",
                p.rows(),
                p.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let b = x.rows();
        let mut total = 0.0;
        for i in 0..b {
            let lse = log_sum_exp(x.row(i));
            for (pv, xv) in p.row(i).iter().zip(x.row(i)) {
                if *pv > 0.0 {
                    total += pv * (pv.ln() - (xv - lse));
                }
            }
        }
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![total / b as f64]).expect("1x1"),
            Op::KlTeacherMean {
                teacher: teacher.0,
                logits: logits.0,
            },
        ))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every node
    /// that influenced the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a 1x1 loss node, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.push_grad(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn push_grad(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, contrib: Matrix| {
            match &mut grads[i] {
                Some(existing) => existing
                    .scaled_add_assign(&contrib, 1.0)
                    .expect("gradient shape"),
                slot @ None => *slot = Some(contrib),
            };
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                acc(*x, g.matmul_nt(val(*w))?);
                acc(*w, val(*x).matmul_tn(g)?);
                acc(*b, Matrix::from_vec(1, g.cols(), g.col_sums())?);
            }
            Op::MatMul { a, b } => {
                acc(*a, g.matmul_nt(val(*b))?);
                acc(*b, val(*a).matmul_tn(g)?);
            }
            Op::MatMulNT { a, b } => {
                acc(*a, g.matmul(val(*b))?);
                acc(*b, g.matmul_tn(val(*a))?);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Scale { a, c } => acc(*a, g.scale(*c)),
            Op::AddConst { a } => acc(*a, g.clone()),
            Op::Tanh { a } => {
                let y = &self.nodes[id].value;
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= 1.0 - yv * yv;
                }
                acc(*a, d);
            }
            Op::Relu { a } => {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(*a, d);
            }
            Op::Abs { a } => {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= if *xv > 0.0 {
                        1.0
                    } else if *xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                acc(*a, d);
            }
            Op::Square { a } => {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= 2.0 * xv;
                }
                acc(*a, d);
            }
            Op::ConcatCols { a, b } => {
                let ca = val(*a).cols();
                acc(*a, g.slice_cols(0, ca)?);
                acc(*b, g.slice_cols(ca, g.cols())?);
            }
            Op::SliceCols { a, from, to } => {
                let parent = val(*a);
                let mut d = Matrix::zeros(parent.rows(), parent.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*from..*to].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::RowsUnit { a } => {
                let x = val(*a);
                let y = &self.nodes[id].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = norm(x.row(i));
                    let gy = dot(g.row(i), y.row(i));
                    for ((dv, &gv), &yv) in
                        d.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i))
                    {
                        *dv = (gv - gy * yv) / n;
                    }
                }
                acc(*a, d);
            }
            Op::CosineRows { a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                let c = &self.nodes[id].value;
                let mut da = Matrix::zeros(xa.rows(), xa.cols());
                let mut db = Matrix::zeros(xb.rows(), xb.cols());
                for i in 0..xa.rows() {
                    let gi = g.get(i, 0);
                    let ci = c.get(i, 0);
                    let (na, nb) = (norm(xa.row(i)), norm(xb.row(i)));
                    for j in 0..xa.cols() {
                        let (av, bv) = (xa.get(i, j), xb.get(i, j));
                        da.set(i, j, gi * (bv / (na * nb) - ci * av / (na * na)));
                        db.set(i, j, gi * (av / (na * nb) - ci * bv / (nb * nb)));
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SumAll { a } => {
                let parent = val(*a);
                acc(
                    *a,
                    Matrix::from_fn(parent.rows(), parent.cols(), |_, _| g.scalar()),
                );
            }
            Op::MeanAll { a } => {
                let parent = val(*a);
                let n = (parent.rows() * parent.cols()) as f64;
                acc(
                    *a,
                    Matrix::from_fn(parent.rows(), parent.cols(), |_, _| g.scalar() / n),
                );
            }
            Op::LogSumExpOffDiagRows { a } => {
                let x = val(*a);
                let y = &self.nodes[id].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for j in 0..x.rows() {
                    let gj = g.get(j, 0);
                    let yj = y.get(j, 0);
                    for k in 0..x.cols() {
                        if k != j {
                            d.set(j, k, gj * (x.get(j, k) - yj).exp());
                        }
                    }
                }
                acc(*a, d);
            }
            Op::CrossEntropyMean { logits, labels } => {
                let x = val(*logits);
                let b = x.rows() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (i, &y) in labels.iter().enumerate() {
                    let row = x.row(i);
                    let lse = log_sum_exp(row);
                    for (c, &xv) in row.iter().enumerate() {
                        let q = (xv - lse).exp();
                        let target = if c == y { 1.0 } else { 0.0 };
                        d.set(i, c, g.scalar() * (q - target) / b);
                    }
                }
                acc(*logits, d);
            }
            Op::KlTeacherMean { teacher, logits } => {
                let (p, x) = (val(*teacher), val(*logits));
                let b = x.rows() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let lse = log_sum_exp(x.row(i));
                    let psum: f64 = p.row(i).iter().sum();
                    for c in 0..x.cols() {
                        let q = (x.get(i, c) - lse).exp();
                        d.set(i, c, g.scalar() * (q * psum - p.get(i, c)) / b);
                    }
                }
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// An MLP's parameters registered as tape leaves.
pub struct TapeMlp {
    pub layers: Vec<(Var, Var, Activation)>,
}

pub fn register_mlp(tape: &mut Tape, params: &MlpParams) -> TapeMlp {
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let w = tape.leaf(l.params.weight.clone());
            let b = tape.leaf(
                Matrix::from_vec(1, l.params.bias.len(), l.params.bias.clone()).expect("bias row"),
            );
            (w, b, l.activation)
        })
        .collect();
    TapeMlp { layers }
}

pub fn mlp_forward_tape(tape: &mut Tape, mlp: &TapeMlp, x: Var) -> Result<Var> {
    let mut cur = x;
    for (idx, &(w, b, activation)) in mlp.layers.iter().enumerate() {
        if tape.value(cur).cols() != tape.value(w).rows() {
            return Err(Error::Shape(format!(
                "mlp layer {idx}: input has {} columns, layer expects {}",
                tape.value(cur).cols(),
                tape.value(w).rows()
            )));
        }
        cur = tape.dense(cur, w, b)?;
        cur = tape.activation(cur, activation);
    }
    Ok(cur)
}

/// Collects an MLP's gradients back into parameter-shaped storage.
pub fn mlp_grads(grads: &Gradients, tape: &Tape, mlp: &TapeMlp) -> MlpParams {
    let layers = mlp
        .layers
        .iter()
        .map(|&(w, b, activation)| {
            let gw = grads.get(tape, w);
            let gb = grads.get(tape, b);
            MlpLayer {
                params: DenseParams {
                    weight: gw,
                    bias: gb.data().to_vec(),
                },
                activation,
            }
        })
        .collect();
    MlpParams { layers }
}
