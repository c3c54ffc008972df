//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as it runs; [`Var::backward`] walks the
//! records in reverse and accumulates adjoints. Tapes are rebuilt per forward
//! pass, which keeps variable-sized query groups simple, and are strictly
//! single-threaded.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;

/// Lower clamp for probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    /// Add a 1 x m row vector to every row of an n x m matrix.
    AddRow(usize, usize),
    /// Multiply every row of an n x m matrix elementwise by a 1 x m row vector.
    MulRow(usize, usize),
    ConcatCols(Vec<usize>),
    Sigmoid(usize),
    Elu(usize, f64),
    /// Row-wise (x - mean) / sqrt(var + eps), before gain and bias.
    NormalizeRows(usize, f64),
    /// Softmax down a single column (input must be n x 1), max-subtracted.
    SoftmaxCol(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Records operations for one forward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A value on a tape. Cloning is cheap; both clones refer to the same node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node { op, value });
        Var { tape: self.clone(), idx }
    }

    /// A differentiable leaf (a parameter or anything gradients are read for).
    pub fn input(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A non-parameter leaf. Gradients flow through but are normally unread.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, idx: usize) -> Tensor {
        self.inner.borrow().nodes[idx].value.clone()
    }

    fn shape_of(&self, idx: usize) -> (usize, usize) {
        self.inner.borrow().nodes[idx].value.shape()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    /// The tape this variable lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.idx)
    }

    /// Value of a scalar (1x1) variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, op: Op, value: Tensor) -> Var {
        self.tape.push(op, value)
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "operands come from different tapes"
        );
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.same_tape(other);
        let value = self.value().matmul(&other.value());
        self.tape.push(Op::MatMul(self.idx, other.idx), value)
    }

    pub fn transpose(&self) -> Var {
        self.unary(Op::Transpose(self.idx), self.value().transposed())
    }

    pub fn add(&self, other: &Var) -> Var {
        self.same_tape(other);
        let value = self.value().add(&other.value());
        self.tape.push(Op::Add(self.idx, other.idx), value)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.same_tape(other);
        let value = self.value().sub(&other.value());
        self.tape.push(Op::Sub(self.idx, other.idx), value)
    }

    pub fn hadamard(&self, other: &Var) -> Var {
        self.same_tape(other);
        let value = self.value().hadamard(&other.value());
        self.tape.push(Op::Hadamard(self.idx, other.idx), value)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(Op::Scale(self.idx, c), self.value().scale(c))
    }

    /// Broadcast-add a 1 x m row vector to each row.
    pub fn add_row(&self, row: &Var) -> Var {
        self.same_tape(row);
        let a = self.value();
        let b = row.value();
        assert_eq!(
            (1, a.cols()),
            b.shape(),
            "add_row shape mismatch: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
        let value = Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(0, j));
        self.tape.push(Op::AddRow(self.idx, row.idx), value)
    }

    /// Broadcast-multiply each row elementwise by a 1 x m row vector.
    pub fn mul_row(&self, row: &Var) -> Var {
        self.same_tape(row);
        let a = self.value();
        let b = row.value();
        assert_eq!(
            (1, a.cols()),
            b.shape(),
            "mul_row shape mismatch: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
        let value = Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(0, j));
        self.tape.push(Op::MulRow(self.idx, row.idx), value)
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of zero vars");
        let tape = parts[0].tape.clone();
        for p in parts {
            parts[0].same_tape(p);
        }
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let value = Tensor::concat_cols(&refs);
        tape.push(Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), value)
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(stable_sigmoid);
        self.unary(Op::Sigmoid(self.idx), value)
    }

    pub fn elu(&self, alpha: f64) -> Var {
        let value = self.value().map(|x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) });
        self.unary(Op::Elu(self.idx, alpha), value)
    }

    /// Row-wise normalization to zero mean and unit variance (biased variance,
    /// +eps inside the square root). Gain and bias are applied separately via
    /// [`Var::mul_row`] and [`Var::add_row`].
    pub fn normalize_rows(&self, eps: f64) -> Var {
        let a = self.value();
        let m = a.cols() as f64;
        let value = Tensor::from_fn(a.rows(), a.cols(), |i, j| {
            let row = a.row(i);
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
            (a.get(i, j) - mean) / (var + eps).sqrt()
        });
        self.unary(Op::NormalizeRows(self.idx, eps), value)
    }

    /// Softmax over an n x 1 column, computed with max subtraction.
    pub fn softmax_col(&self) -> Var {
        let a = self.value();
        assert_eq!(a.cols(), 1, "softmax_col expects an n x 1 column, got {}x{}", a.rows(), a.cols());
        let max = a.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = a.data().iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let value = Tensor::new(a.rows(), 1, exps.into_iter().map(|e| e / z).collect());
        self.unary(Op::SoftmaxCol(self.idx), value)
    }

    pub fn ln(&self) -> Var {
        let value = self.value().map(f64::ln);
        self.unary(Op::Ln(self.idx), value)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().map(|x| x.clamp(lo, hi));
        self.unary(Op::Clamp(self.idx, lo, hi), value)
    }

    /// Sum of all entries, as a 1x1 scalar.
    pub fn sum_all(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        self.unary(Op::SumAll(self.idx), value)
    }

    /// Backpropagate from this scalar through everything recorded before it.
    pub fn backward(&self) -> Gradients {
        let inner = self.tape.inner.borrow();
        let nodes = &inner.nodes;
        assert_eq!(
            nodes[self.idx].value.shape(),
            (1, 1),
            "backward() must start from a scalar, got {}x{}",
            nodes[self.idx].value.shape().0,
            nodes[self.idx].value.shape().1
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=self.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&nodes[*b].value.transposed());
                    let gb = nodes[*a].value.transposed().matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transposed()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(&nodes[*b].value);
                    let gb = g.hadamard(&nodes[*a].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.col_sums());
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let ga = Tensor::from_fn(av.rows(), av.cols(), |i, j| g.get(i, j) * bv.get(0, j));
                    accumulate(&mut grads, *b, g.hadamard(av).col_sums());
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = nodes[p].value.shape();
                        let gp = Tensor::from_fn(rows, cols, |i, j| g.get(i, offset + j));
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[idx].value;
                    let ga = Tensor::from_fn(y.rows(), y.cols(), |i, j| {
                        let s = y.get(i, j);
                        g.get(i, j) * s * (1.0 - s)
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Elu(a, alpha) => {
                    let x = &nodes[*a].value;
                    let y = &nodes[idx].value;
                    let ga = Tensor::from_fn(x.rows(), x.cols(), |i, j| {
                        let d = if x.get(i, j) > 0.0 { 1.0 } else { y.get(i, j) + alpha };
                        g.get(i, j) * d
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = &nodes[*a].value;
                    let y = &nodes[idx].value;
                    let m = x.cols() as f64;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let xr = x.row(i);
                        let mean = xr.iter().sum::<f64>() / m;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                        let s = (var + eps).sqrt();
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let g_mean = gr.iter().sum::<f64>() / m;
                        let gy_mean = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum::<f64>() / m;
                        for j in 0..x.cols() {
                            ga.set(i, j, (gr[j] - g_mean - yr[j] * gy_mean) / s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxCol(a) => {
                    let y = &nodes[idx].value;
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).sum();
                    let ga = Tensor::from_fn(y.rows(), 1, |i, _| y.get(i, 0) * (g.get(i, 0) - dot));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let x = &nodes[*a].value;
                    let ga = Tensor::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j) / x.get(i, j));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[*a].value;
                    let ga = Tensor::from_fn(x.rows(), x.cols(), |i, j| {
                        let v = x.get(i, j);
                        if v >= *lo && v <= *hi {
                            g.get(i, j)
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.item()));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Adjoints produced by one [`Var::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, zero-shaped if nothing flowed into it.
    pub fn wrt(&self, var: &Var) -> Tensor {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn elu_matches_direct_evaluation() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(-1.0));
        assert_close(x.elu(1.0).item(), (-1.0f64).exp() - 1.0, 1e-15);
        let y = tape.input(Tensor::scalar(2.5));
        assert_eq!(y.elu(1.0).item(), 2.5);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        for c in [-3.0, 0.0, 41.5] {
            let tape = Tape::new();
            let x = tape.input(Tensor::column(&[c, c, c]));
            let p = x.softmax_col().value();
            for &v in p.data() {
                assert_close(v, 1.0 / 3.0, 1e-15);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let vals = [0.3, -1.2, 2.4, 0.0, 5.5];
        let tape = Tape::new();
        let p = tape.input(Tensor::column(&vals)).softmax_col().value();
        assert_close(p.data().iter().sum::<f64>(), 1.0, 1e-12);
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.0).collect();
        let q = tape.input(Tensor::column(&shifted)).softmax_col().value();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert_close(*a, *b, 1e-9);
        }
    }

    #[test]
    fn normalize_rows_zero_mean_unit_variance() {
        let tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[
            vec![7.0, -3.0, 12.0, 0.5, -9.0],
            vec![100.0, 40.0, -25.0, 3.0, 8.0],
        ]));
        let y = x.normalize_rows(1e-5).value();
        for i in 0..2 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn backward_square_function() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = x.hadamard(&x).sum_all();
        let grads = y.backward();
        assert_eq!(grads.wrt(&x).item(), 6.0);
    }

    #[test]
    fn backward_matmul_trace_rule() {
        // d tr((AB)^T C) / dA = C B^T, against the closed form.
        let a = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.7]]);
        let b = Tensor::from_rows(&[vec![1.5, 0.2], vec![-0.4, 1.1]]);
        let c = Tensor::from_rows(&[vec![0.9, -0.3], vec![0.1, 2.2]]);
        let tape = Tape::new();
        let va = tape.input(a);
        let vb = tape.constant(b.clone());
        let vc = tape.constant(c.clone());
        let loss = va.matmul(&vb).hadamard(&vc).sum_all();
        let grads = loss.backward();
        let expected = c.matmul(&b.transposed());
        let got = grads.wrt(&va);
        for (x, y) in got.data().iter().zip(expected.data()) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn backward_reused_node_accumulates() {
        // f(x) = x*x + x -> f'(x) = 2x + 1
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(4.0));
        let y = x.hadamard(&x).add(&x).sum_all();
        assert_eq!(y.backward().wrt(&x).item(), 9.0);
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let tape = Tape::new();
        let x = tape.input(Tensor::column(&[0.5, 2.0, -1.0]));
        let y = x.clamp(0.0, 1.0).sum_all();
        let g = y.backward().wrt(&x);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "different tapes")]
    fn cross_tape_operands_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.input(Tensor::scalar(1.0));
        let b = t2.input(Tensor::scalar(2.0));
        a.add(&b);
    }
}
