//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints.
//! Nodes only ever refer to earlier nodes, so the tape order is already a
//! topological order.
//!
//! Shape errors inside a graph are programming errors and panic; the
//! fallible, user-facing entry points live in [`super::forward_backward`].

use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Reinterpret `rows x cols` values starting at `offset` of a flat source.
    View {
        src: Var,
        offset: usize,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.same_shape(b) || (b.rows() == 1 && b.cols() == a.cols())
}

/// Elementwise binary op where `b` may be a single row broadcast over `a`'s rows.
fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert!(
        broadcast_ok(a, b),
        "binary op shape mismatch: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
    if a.same_shape(b) {
        return a.zip_map(b, f);
    }
    let cols = a.cols();
    let brow = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, brow[i % cols]))
        .collect();
    Tensor::new(vec![a.rows(), cols], data).expect("broadcast shape")
}

/// Reduce a gradient computed at `a`'s shape back to `b`'s (possibly row-broadcast) shape.
fn unbroadcast(grad: Tensor, b: &Tensor) -> Tensor {
    if grad.same_shape(b) {
        return grad;
    }
    let cols = b.cols();
    let mut out = vec![0.0; cols];
    for (i, g) in grad.data().iter().enumerate() {
        out[i % cols] += g;
    }
    Tensor::row(out)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf node: a parameter or a constant input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant_row(&mut self, data: Vec<f64>) -> Var {
        self.leaf(Tensor::row(data))
    }

    /// `rows x cols` window of a flat source beginning at `offset`.
    pub fn view(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let s = self.value(src).data();
        assert!(offset + rows * cols <= s.len(), "view out of range");
        let t = Tensor::new(vec![rows, cols], s[offset..offset + rows * cols].to_vec())
            .expect("view shape");
        self.push(t, Op::View { src, offset })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul shape mismatch");
        self.push(t, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(t, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Column means: `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = (v.rows(), v.cols());
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::row(out), Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat row mismatch");
        let n = va.rows();
        let mut data = Vec::with_capacity(n * (va.cols() + vb.cols()));
        for r in 0..n {
            data.extend_from_slice(va.row_slice(r));
            data.extend_from_slice(vb.row_slice(r));
        }
        let t = Tensor::new(vec![n, va.cols() + vb.cols()], data).expect("concat");
        self.push(t, Op::ConcatCols(a, b))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        assert!(start < end && end <= v.cols(), "slice out of range");
        let n = v.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&v.row_slice(r)[start..end]);
        }
        let t = Tensor::new(vec![n, end - start], data).expect("slice");
        self.push(t, Op::SliceCols(a, start))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            let row = v.row_slice(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::new(vec![n, m], data).expect("log_softmax");
        self.push(t, Op::LogSoftmax(a))
    }

    /// Gather `a[i, idx[i]]` into an `n x 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.rows(), idx.len(), "pick length mismatch");
        let data = idx.iter().enumerate().map(|(r, &c)| v.at(r, c)).collect();
        let t = Tensor::new(vec![idx.len(), 1], data).expect("pick");
        self.push(t, Op::Pick(a, idx.to_vec()))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their gradient; interior adjoints are dropped once propagated.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::View { src, offset } => {
                    let s = self.value(*src);
                    let mut g = Tensor::zeros(s.rows(), s.cols());
                    g.data_mut()[*offset..*offset + gout.len()].copy_from_slice(gout.data());
                    acc(&mut grads, *src, g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, gout.matmul_t(vb));
                    acc(&mut grads, *b, va.t_matmul(&gout));
                }
                Op::Add(a, b) => {
                    let vb = self.value(*b);
                    acc(&mut grads, *b, unbroadcast(gout.clone(), vb));
                    acc(&mut grads, *a, gout);
                }
                Op::Sub(a, b) => {
                    let vb = self.value(*b);
                    acc(&mut grads, *b, unbroadcast(gout.map(|g| -g), vb));
                    acc(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = binary(&gout, vb, |g, y| g * y);
                    let gb = unbroadcast(gout.zip_map(va, |g, x| g * x), vb);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    let ga = binary(&gout, vb, |g, d| g / d);
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = gout.zip_map(y, |g, q| g * q);
                    let gb = unbroadcast(binary(&gy, vb, |gq, d| -gq / d), vb);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gout.map(|g| g * c)),
                Op::Offset(a) => acc(&mut grads, *a, gout),
                Op::Tanh(a) => acc(&mut grads, *a, gout.zip_map(y, |g, t| g * (1.0 - t * t))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, gout.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, gout.zip_map(x, |g, x| g * sigmoid(x)));
                }
                Op::Exp(a) => acc(&mut grads, *a, gout.zip_map(y, |g, e| g * e)),
                Op::Ln(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, gout.zip_map(x, |g, x| g / x));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, gout.zip_map(x, |g, x| 2.0 * g * x));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        gout.zip_map(x, |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
                    );
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(x.rows(), x.cols(), gout.item()));
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let (n, m) = (x.rows(), x.cols());
                    let inv = 1.0 / n as f64;
                    let mut g = Vec::with_capacity(n * m);
                    for _ in 0..n {
                        g.extend(gout.data().iter().map(|v| v * inv));
                    }
                    acc(&mut grads, *a, Tensor::new(vec![n, m], g).expect("mean grad"));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let n = gout.rows();
                    let mut ga = Vec::with_capacity(n * ca);
                    let mut gb = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let row = gout.row_slice(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut grads, *a, Tensor::new(vec![n, ca], ga).expect("concat grad"));
                    acc(&mut grads, *b, Tensor::new(vec![n, cb], gb).expect("concat grad"));
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let (n, m) = (x.rows(), x.cols());
                    let w = gout.cols();
                    let mut g = vec![0.0; n * m];
                    for r in 0..n {
                        g[r * m + start..r * m + start + w].copy_from_slice(gout.row_slice(r));
                    }
                    acc(&mut grads, *a, Tensor::new(vec![n, m], g).expect("slice grad"));
                }
                Op::LogSoftmax(a) => {
                    let (n, m) = (y.rows(), y.cols());
                    let mut g = Vec::with_capacity(n * m);
                    for r in 0..n {
                        let gr = gout.row_slice(r);
                        let s: f64 = gr.iter().sum();
                        g.extend(y.row_slice(r).iter().zip(gr).map(|(ls, gi)| gi - ls.exp() * s));
                    }
                    acc(&mut grads, *a, Tensor::new(vec![n, m], g).expect("lsm grad"));
                }
                Op::Pick(a, idx) => {
                    let x = self.value(*a);
                    let m = x.cols();
                    let mut g = vec![0.0; x.len()];
                    for (r, &c) in idx.iter().enumerate() {
                        g[r * m + c] += gout.data()[r];
                    }
                    acc(&mut grads, *a, Tensor::new(vec![x.rows(), m], g).expect("pick grad"));
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    /// Builds sum(w * op(x)) for a given unary builder and checks its gradient.
    fn check_unary(build: impl Fn(&mut Graph, Var) -> Var, xs: &[f64]) {
        let weights: Vec<f64> = (0..xs.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let v = g.leaf(Tensor::row(x.to_vec()));
            let w = g.constant_row(weights.clone());
            let y = build(&mut g, v);
            let p = g.mul(y, w);
            let s = g.sum(p);
            (g.value(s).item(), g.backward(s).get(v).unwrap().data().to_vec())
        };
        let (_, analytic) = eval(xs);
        let numeric = numeric_grad(|x| eval(x).0, xs);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn unary_ops_match_numeric_gradients() {
        let xs = [-1.3, -0.2, 0.4, 1.7];
        check_unary(|g, v| g.tanh(v), &xs);
        check_unary(|g, v| g.softplus(v), &xs);
        check_unary(|g, v| g.exp(v), &xs);
        check_unary(|g, v| g.square(v), &xs);
        check_unary(|g, v| g.scale(v, -2.5), &xs);
        check_unary(|g, v| g.offset(v, 3.0), &xs);
        check_unary(|g, v| g.relu(v), &xs);
        check_unary(|g, v| g.clamp(v, -1.0, 1.0), &xs);
        check_unary(|g, v| g.log_softmax(v), &xs);
        check_unary(
            |g, v| {
                let e = g.exp(v);
                g.ln(e)
            },
            &xs,
        );
    }

    #[test]
    fn broadcast_binary_ops_match_numeric_gradients() {
        // a: 3x2 fixed, b: 1x2 row differentiated.
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.7], vec![2.2, -1.1]]).unwrap();
        for kind in 0..4 {
            let eval = |b: &[f64]| {
                let mut g = Graph::new();
                let va = g.leaf(a.clone());
                let vb = g.leaf(Tensor::row(b.to_vec()));
                let y = match kind {
                    0 => g.add(va, vb),
                    1 => g.sub(va, vb),
                    2 => g.mul(va, vb),
                    _ => g.div(va, vb),
                };
                let sq = g.square(y);
                let s = g.sum(sq);
                (g.value(s).item(), g.backward(s).get(vb).unwrap().data().to_vec())
            };
            let b = [0.8, -1.4];
            let (_, analytic) = eval(&b);
            let numeric = numeric_grad(|x| eval(x).0, &b);
            for (x, n) in analytic.iter().zip(&numeric) {
                assert!((x - n).abs() < 1e-5, "op {kind}: {x} vs {n}");
            }
        }
    }

    #[test]
    fn matmul_view_concat_slice_pick_compose() {
        // flat params -> 2x3 weight view; loss = -mean log_softmax(concat(x,x) @ W')[label]
        let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.25]]).unwrap();
        let labels = [2usize, 0];
        let eval = |p: &[f64]| {
            let mut g = Graph::new();
            let flat = g.leaf(Tensor::row(p.to_vec()));
            let w = g.view(flat, 2, 4, 3);
            let vx = g.leaf(x.clone());
            let cat = g.concat_cols(vx, vx);
            let h = g.matmul(cat, w);
            let h2 = g.slice_cols(h, 0, 3);
            let ls = g.log_softmax(h2);
            let picked = g.pick(ls, &labels);
            let m = g.mean_rows(picked);
            let loss = g.scale(m, -1.0);
            (g.value(loss).item(), g.backward(loss).get(flat).unwrap().data().to_vec())
        };
        let p: Vec<f64> = (0..14).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let (_, analytic) = eval(&p);
        let numeric = numeric_grad(|q| eval(q).0, &p);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
        // The first two entries are outside the view and get zero gradient.
        assert_eq!(&analytic[..2], &[0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }
}
