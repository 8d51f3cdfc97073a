//! Eager reverse-mode differentiation tape over row-major f64 matrices.
//!
//! Values are computed at node creation; `backward` replays the tape in
//! reverse, accumulating vector-Jacobian products. The op set is exactly what
//! the fixed architectures in this crate need, not a general autodiff.
//! Rows are batch elements, columns are features; scalars are `[1, 1]`.

use ndarray::{s, Array2};

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Debug)]
#[allow(dead_code)] // some payloads exist only for Debug output
enum Op {
    /// Input node; `grad` marks parameters (constants do not accumulate).
    Leaf { grad: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a `[1, C]` row vector over the rows of a `[B, C]` matrix.
    AddRowVec(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Exp(Var),
    MaxConst(Var, f64),
    MinConst(Var, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    /// Softmax within consecutive column groups of the given width.
    GroupedSoftmax(Var, usize),
    GroupedLogSoftmax(Var, usize),
    StopGrad(Var),
    /// Row-wise sum, `[B, C] -> [B, 1]`.
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Grads {
    adjoints: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `v`. Zero if the node
    /// was never reached.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match &self.adjoints[v.0] {
            Some(a) => a.clone(),
            None => Array2::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Parameter leaf: participates in gradient accumulation.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { grad: true }, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { grad: false }, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul inner dims {}x{} . {}x{}", ar, ac, br, bc);
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let mut v = self.nodes[a.0].value.clone();
        v.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x = f(*x, y));
        let g = self.needs(a) || self.needs(b);
        self.push(v, op(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, ac), "bias shape");
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let g = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRowVec(a, row), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        let g = self.needs(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value + k;
        let g = self.needs(a);
        self.push(v, Op::AddScalar(a, k), g)
    }

    fn unary(&mut self, a: Var, op: fn(Var) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.nodes[a.0].value.mapv(f);
        let g = self.needs(a);
        self.push(v, op(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu, |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus, softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        let g = self.needs(a);
        self.push(v, Op::MaxConst(a, c), g)
    }

    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.min(c));
        let g = self.needs(a);
        self.push(v, Op::MinConst(a, c), g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat rows");
        let mut v = Array2::zeros((ar, ac + bc));
        v.slice_mut(s![.., ..ac]).assign(&self.nodes[a.0].value);
        v.slice_mut(s![.., ac..]).assign(&self.nodes[b.0].value);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, ac) = self.shape(a);
        assert!(start < end && end <= ac, "slice range");
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        let g = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), g)
    }

    pub fn grouped_softmax(&mut self, a: Var, group: usize) -> Var {
        let (_, ac) = self.shape(a);
        assert!(group >= 1 && ac % group == 0, "group width must divide cols");
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            for gi in 0..(ac / group) {
                let mut seg = row.slice_mut(s![gi * group..(gi + 1) * group]);
                let m = seg.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                seg.mapv_inplace(|x| (x - m).exp());
                let sum: f64 = seg.sum();
                seg.mapv_inplace(|x| x / sum);
            }
        }
        let g = self.needs(a);
        self.push(v, Op::GroupedSoftmax(a, group), g)
    }

    pub fn grouped_log_softmax(&mut self, a: Var, group: usize) -> Var {
        let (_, ac) = self.shape(a);
        assert!(group >= 1 && ac % group == 0, "group width must divide cols");
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            for gi in 0..(ac / group) {
                let mut seg = row.slice_mut(s![gi * group..(gi + 1) * group]);
                let m = seg.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                let lse = m + seg.fold(0.0, |acc, &x| acc + (x - m).exp()).ln();
                seg.mapv_inplace(|x| x - lse);
            }
        }
        let g = self.needs(a);
        self.push(v, Op::GroupedLogSoftmax(a, group), g)
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::StopGrad(a), false)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (ar, _) = self.shape(a);
        let sums = self.nodes[a.0].value.sum_axis(ndarray::Axis(1));
        let v = sums.into_shape_with_order((ar, 1)).expect("reshape");
        let g = self.needs(a);
        self.push(v, Op::SumCols(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let g = self.needs(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        let g = self.needs(a);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Straight-through estimator: forward value is `hard`, gradient flows
    /// into `soft` unchanged. `hard` must have the same shape as `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: &Array2<f64>) -> Var {
        assert_eq!(self.shape(soft), hard.dim(), "straight_through shape");
        let delta = hard - self.value(soft);
        let c = self.constant(delta);
        self.add(soft, c)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Grads { adjoints: adj }
    }

    fn bump(&self, adj: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(a) => *a += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        match self.nodes[i].op {
            Op::Leaf { .. } | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let d = g.dot(&self.nodes[b.0].value.t());
                    self.bump(adj, a, d);
                }
                if self.needs(b) {
                    let d = self.nodes[a.0].value.t().dot(g);
                    self.bump(adj, b, d);
                }
            }
            Op::Add(a, b) => {
                self.bump(adj, a, g.clone());
                self.bump(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.bump(adj, a, g.clone());
                self.bump(adj, b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.bump(adj, a, g * &self.nodes[b.0].value);
                }
                if self.needs(b) {
                    self.bump(adj, b, g * &self.nodes[a.0].value);
                }
            }
            Op::AddRowVec(a, row) => {
                self.bump(adj, a, g.clone());
                if self.needs(row) {
                    let (_, c) = g.dim();
                    let summed = g.sum_axis(ndarray::Axis(0)).into_shape_with_order((1, c)).expect("reshape");
                    self.bump(adj, row, summed);
                }
            }
            Op::Scale(a, k) => self.bump(adj, a, g * k),
            Op::AddScalar(a, _) => self.bump(adj, a, g.clone()),
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.bump(adj, a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.bump(adj, a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Silu(a) => {
                let x = &self.nodes[a.0].value;
                let d = x.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                self.bump(adj, a, g * &d);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                self.bump(adj, a, g * &x.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                self.bump(adj, a, g * &x.mapv(sigmoid));
            }
            Op::Square(a) => {
                let x = &self.nodes[a.0].value;
                self.bump(adj, a, g * &x.mapv(|x| 2.0 * x));
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                self.bump(adj, a, g * y);
            }
            Op::MaxConst(a, c) => {
                let x = &self.nodes[a.0].value;
                self.bump(adj, a, g * &x.mapv(|x| if x > c { 1.0 } else { 0.0 }));
            }
            Op::MinConst(a, c) => {
                let x = &self.nodes[a.0].value;
                self.bump(adj, a, g * &x.mapv(|x| if x < c { 1.0 } else { 0.0 }));
            }
            Op::ConcatCols(a, b) => {
                let (_, ac) = self.shape(a);
                if self.needs(a) {
                    self.bump(adj, a, g.slice(s![.., ..ac]).to_owned());
                }
                if self.needs(b) {
                    self.bump(adj, b, g.slice(s![.., ac..]).to_owned());
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.shape(a));
                d.slice_mut(s![.., start..end]).assign(g);
                self.bump(adj, a, d);
            }
            Op::GroupedSoftmax(a, group) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = y.dim();
                let mut d = Array2::zeros((rows, cols));
                for r in 0..rows {
                    for gi in 0..(cols / group) {
                        let lo = gi * group;
                        let hi = lo + group;
                        let dot: f64 = (lo..hi).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in lo..hi {
                            d[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                }
                self.bump(adj, a, d);
            }
            Op::GroupedLogSoftmax(a, group) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = y.dim();
                let mut d = Array2::zeros((rows, cols));
                for r in 0..rows {
                    for gi in 0..(cols / group) {
                        let lo = gi * group;
                        let hi = lo + group;
                        let gsum: f64 = (lo..hi).map(|c| g[[r, c]]).sum();
                        for c in lo..hi {
                            d[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gsum;
                        }
                    }
                }
                self.bump(adj, a, d);
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.shape(a);
                let mut d = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let gr = g[[r, 0]];
                    for c in 0..cols {
                        d[[r, c]] = gr;
                    }
                }
                self.bump(adj, a, d);
            }
            Op::SumAll(a) => {
                let d = Array2::from_elem(self.shape(a), g[[0, 0]]);
                self.bump(adj, a, d);
            }
            Op::MeanAll(a) => {
                let (rows, cols) = self.shape(a);
                let d = Array2::from_elem((rows, cols), g[[0, 0]] / (rows * cols) as f64);
                self.bump(adj, a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let eps = 1e-6;
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0]]);
        let w = t.leaf(array![[0.3, -0.1], [0.5, 0.7]]);
        let y = t.matmul(x, w);
        let s = t.tanh(y);
        let loss = t.sum_all(s);
        let grads = t.backward(loss);
        let gw = grads.wrt(w, (2, 2));

        // dL/dw[0][0] with everything else fixed.
        let f = |w00: f64| {
            let y0: f64 = 1.0 * w00 + 2.0 * 0.5;
            let y1: f64 = 1.0 * (-0.1) + 2.0 * 0.7;
            y0.tanh() + y1.tanh()
        };
        let num = fd_scalar(f, 0.3);
        assert!((gw[[0, 0]] - num).abs() < 1e-8, "{} vs {}", gw[[0, 0]], num);
    }

    #[test]
    fn grouped_softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]]);
        let p = t.grouped_softmax(x, 3);
        let v = t.value(p);
        let s0: f64 = (0..3).map(|c| v[[0, c]]).sum();
        let s1: f64 = (3..6).map(|c| v[[0, c]]).sum();
        assert!((s0 - 1.0).abs() < 1e-12);
        assert!((s1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut t = Tape::new();
        let w = t.leaf(array![[2.0]]);
        let sq = t.square(w);
        let blocked = t.stop_grad(sq);
        let live = t.square(w);
        let out = t.add(blocked, live);
        let loss = t.sum_all(out);
        let grads = t.backward(loss);
        // Only the live branch contributes: d(w^2)/dw = 2w = 4.
        assert_eq!(grads.wrt(w, (1, 1))[[0, 0]], 4.0);
    }

    #[test]
    fn straight_through_passes_identity_gradient() {
        let mut t = Tape::new();
        let logits = t.leaf(array![[0.2, -0.4, 0.9]]);
        let probs = t.grouped_softmax(logits, 3);
        let hard = array![[0.0, 0.0, 1.0]];
        let st = t.straight_through(probs, &hard);
        assert_eq!(t.value(st), &hard);
        let picked = t.sum_all(st);
        let g_st = t.backward(picked);

        let mut t2 = Tape::new();
        let logits2 = t2.leaf(array![[0.2, -0.4, 0.9]]);
        let probs2 = t2.grouped_softmax(logits2, 3);
        let s2 = t2.sum_all(probs2);
        let g_soft = t2.backward(s2);

        let a = g_st.wrt(logits, (1, 3));
        let b = g_soft.wrt(logits2, (1, 3));
        for c in 0..3 {
            assert!((a[[0, c]] - b[[0, c]]).abs() < 1e-15);
        }
    }
}
