//! Minimal reverse-mode differentiation over `f64` matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and returns gradients for the parameter
//! leaves. Nodes that do not depend on a parameter carry no gradient.

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Cols(Var, usize),
    Rows(Var, usize),
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => self.nodes[a.0].grad || self.nodes[b.0].grad,
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::Cols(a, _)
            | Op::Rows(a, _)
            | Op::Sum(a) => self.nodes[a.0].grad,
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.iter().any(|x| self.nodes[x.0].grad),
        };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, index: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    /// `a (n×d) + row (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a (n×d) ∘ row (1×d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// `a (n×d) ∘ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut r in v.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            r.mapv_inplace(|x| (x - m).exp());
            let s = r.sum();
            r /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("matching row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Cols(a, start))
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::Rows(a, start))
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Gradients of the 1×1 node `loss` for `n_params` parameter slots;
    /// slots never used on this tape stay `None`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Array2<f64>>> = vec![None; n_params];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        fn acc(grads: &mut [Option<Array2<f64>>], i: usize, g: Array2<f64>) {
            match &mut grads[i] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let val = |v: &Var| &self.nodes[v.0].value;
            let wants = |v: &Var| self.nodes[v.0].grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    match &mut out[*p] {
                        Some(x) => *x += &g,
                        slot => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    if wants(a) {
                        acc(&mut grads, a.0, g.dot(&val(b).t()));
                    }
                    if wants(b) {
                        acc(&mut grads, b.0, val(a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        acc(&mut grads, a.0, g.clone());
                    }
                    if wants(b) {
                        acc(&mut grads, b.0, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(a) {
                        acc(&mut grads, a.0, g.clone());
                    }
                    if wants(b) {
                        acc(&mut grads, b.0, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        acc(&mut grads, a.0, &g * val(b));
                    }
                    if wants(b) {
                        acc(&mut grads, b.0, &g * val(a));
                    }
                }
                Op::Div(a, b) => {
                    if wants(a) {
                        acc(&mut grads, a.0, &g / val(b));
                    }
                    if wants(b) {
                        let bv = val(b);
                        acc(&mut grads, b.0, -(&g * val(a)) / &(bv * bv));
                    }
                }
                Op::AddRow(a, r) => {
                    if wants(r) {
                        acc(&mut grads, r.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(a) {
                        acc(&mut grads, a.0, g);
                    }
                }
                Op::MulRow(a, r) => {
                    if wants(r) {
                        acc(&mut grads, r.0, (&g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(a) {
                        acc(&mut grads, a.0, &g * val(r));
                    }
                }
                Op::MulCol(a, c) => {
                    if wants(c) {
                        acc(&mut grads, c.0, (&g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    if wants(a) {
                        acc(&mut grads, a.0, &g * val(c));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, a.0, g * *k),
                Op::AddScalar(a) => acc(&mut grads, a.0, g),
                Op::Tanh(a) => acc(&mut grads, a.0, &g * &node.value.mapv(|y| 1.0 - y * y)),
                Op::Sqrt(a) => acc(&mut grads, a.0, &g / &(&node.value * 2.0)),
                Op::Square(a) => acc(&mut grads, a.0, &g * &(val(a) * 2.0)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, a.0, gy - &(y * &dots));
                }
                Op::Transpose(a) => acc(&mut grads, a.0, g.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = val(p).nrows();
                        if wants(p) {
                            acc(&mut grads, p.0, g.slice(s![at..at + n, ..]).to_owned());
                        }
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = val(p).ncols();
                        if wants(p) {
                            acc(&mut grads, p.0, g.slice(s![.., at..at + n]).to_owned());
                        }
                        at += n;
                    }
                }
                Op::Cols(a, start) => {
                    let mut full = Array2::zeros(val(a).dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, a.0, full);
                }
                Op::Rows(a, start) => {
                    let mut full = Array2::zeros(val(a).dim());
                    full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, a.0, full);
                }
                Op::Sum(a) => acc(&mut grads, a.0, Array2::from_elem(val(a).dim(), g[[0, 0]])),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `params`.
    fn numeric(params: &[Array2<f64>], f: &dyn Fn(&[Array2<f64>]) -> f64) -> Vec<Array2<f64>> {
        let h = 1e-6;
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Array2::from_shape_fn(p.dim(), |idx| {
                    let mut up = params.to_vec();
                    up[i][idx] += h;
                    let mut dn = params.to_vec();
                    dn[i][idx] -= h;
                    (f(&up) - f(&dn)) / (2.0 * h)
                })
            })
            .collect()
    }

    fn build(t: &mut Tape, p: &[Array2<f64>]) -> Var {
        let a = t.param(0, &p[0]);
        let b = t.param(1, &p[1]);
        let r = t.param(2, &p[2]);
        let c = t.constant(array![[0.5], [-1.0], [2.0]]);
        let ab = t.matmul(a, b);
        let h = t.add_row(ab, r);
        let h = t.tanh(h);
        let h = t.mul_col(h, c);
        let sm = t.softmax_rows(h);
        let tr = t.transpose(sm);
        let m = t.matmul(sm, tr);
        let top = t.rows(m, 0, 2);
        let left = t.cols(top, 1, 2);
        let sq = t.square(left);
        let k = t.add_scalar(sq, 1.0);
        let root = t.sqrt(k);
        let d = t.div(root, k);
        let rr = t.mul_row(d, r);
        let cat = t.concat_cols(&[rr, d]);
        let cat = t.concat_rows(&[cat, cat]);
        let mean = t.rows(cat, 1, 2);
        let e = t.sub(mean, mean);
        let mix = t.mul(mean, mean);
        let mix = t.add(mix, e);
        let s = t.sum(mix);
        t.scale(s, 0.7)
    }

    #[test]
    fn gradients_match_central_differences() {
        let p = vec![
            array![[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]],
            array![[0.7, -0.1], [0.2, 0.9]],
            array![[0.05, -0.3]],
        ];
        let mut t = Tape::new();
        let loss = build(&mut t, &p);
        let g = t.backward(loss, 3);
        let f = |q: &[Array2<f64>]| {
            let mut t = Tape::new();
            let l = build(&mut t, q);
            t.scalar(l)
        };
        let n = numeric(&p, &f);
        for (a, b) in g.iter().zip(&n) {
            let a = a.as_ref().unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn unused_parameters_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(0, &array![[1.0]]);
        let s = t.sum(a);
        let g = t.backward(s, 2);
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }
}
