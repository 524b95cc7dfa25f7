//! A small reverse-mode automatic differentiation tape over dense `f64` matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the node list
//! is a valid topological order for backpropagation. Every value is a 2-D matrix;
//! scalars are `1 × 1`.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    MulConst(Var, Mat),
    Sum(Var),
    RowDot(Var, Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    AvgPool2(Var),
    ColMax(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    SoftmaxCrossEntropy(Var, Vec<usize>, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar w.r.t. every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameters, or anything a gradient is wanted for).
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`: the pairwise inner-product (Gram) matrix of the rows of `a` and `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the `1 × m` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(bias), (1, m), "add_row: bias shape");
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// `log(1 + e^x)`, evaluated without overflow. `-log σ(z) = softplus(-z)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    /// Elementwise product with a constant matrix (masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let value = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `out[i] = <a[i], b[i]>`, shape `n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot: shape mismatch");
        let value = (self.value(a) * self.value(b))
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowDot(a, b), rg)
    }

    /// `out[i] = a[idx[i]]`. Indices may repeat; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (o, &i) in idx.iter().enumerate() {
            value.row_mut(o).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts), rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts), rg)
    }

    /// Mean of consecutive row pairs; the row count must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let src = self.value(a);
        assert!(src.nrows() % 2 == 0, "avg_pool2: odd row count");
        let value = (&src.slice(s![0..;2, ..]) + &src.slice(s![1..;2, ..])) * 0.5;
        let rg = self.rg(a);
        self.push(value, Op::AvgPool2(a), rg)
    }

    /// Per-column maximum over rows (temporal max-pooling), shape `1 × m`.
    /// Ties resolve to the earliest row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (n, m) = src.dim();
        assert!(n > 0, "col_max: empty input");
        let mut arg = vec![0usize; m];
        let mut value = Mat::zeros((1, m));
        for j in 0..m {
            let mut best = src[[0, j]];
            for i in 1..n {
                if src[[i, j]] > best {
                    best = src[[i, j]];
                    arg[j] = i;
                }
            }
            value[[0, j]] = best;
        }
        let rg = self.rg(a);
        self.push(value, Op::ColMax(a, arg), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let norms: Vec<f64> = src
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut value = src.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        let rg = self.rg(a);
        self.push(value, Op::L2NormalizeRows(a, norms), rg)
    }

    /// Mean per-row softmax cross-entropy of `logits` against class `targets`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let z = self.value(logits);
        let (n, a) = z.dim();
        assert_eq!(targets.len(), n, "softmax_cross_entropy: target count");
        let mut probs = Mat::zeros((n, a));
        let mut total = 0.0;
        for i in 0..n {
            let row = z.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..a {
                probs[[i, j]] = (row[j] - lse).exp();
            }
            total += lse - row[targets[i]];
        }
        let value = Mat::from_elem((1, 1), total / n.max(1) as f64);
        let rg = self.rg(logits);
        self.push(value, Op::SoftmaxCrossEntropy(logits, targets, probs), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be 1x1");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    acc(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= sigmoid(x));
                    acc(&mut grads, *a, d);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g * c),
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, Mat::from_elem(shape, g[[0, 0]]));
                }
                Op::RowDot(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, self.value(*b) * &g);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a) * &g);
                    }
                }
                Op::GatherRows(a, gather) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (o, &i) in gather.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(o);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::AvgPool2(a) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    let half = &g * 0.5;
                    d.slice_mut(s![0..;2, ..]).assign(&half);
                    d.slice_mut(s![1..;2, ..]).assign(&half);
                    acc(&mut grads, *a, d);
                }
                Op::ColMax(a, arg) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (j, &i) in arg.iter().enumerate() {
                        d[[i, j]] = g[[0, j]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for (i, &n) in norms.iter().enumerate() {
                        let gy = g.row(i).dot(&y.row(i));
                        let mut row = d.row_mut(i);
                        row.zip_mut_with(&y.row(i), |dv, &yv| *dv = (*dv - yv * gy) / n);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxCrossEntropy(a, targets, probs) => {
                    let n = targets.len().max(1) as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    acc(&mut grads, *a, d * (g[[0, 0]] / n));
                }
            }
        }
        Gradients { grads }
    }
}

/// Central finite differences of `f` at `x`: `(f(x+h) - f(x-h)) / 2h` per entry.
pub fn numerical_gradient(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut grad = Mat::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let fp = f(&probe);
        probe[idx] = orig - h;
        let fm = f(&probe);
        probe[idx] = orig;
        *g = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max over entries of `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat, floor: f64) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
