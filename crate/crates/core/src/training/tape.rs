//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Values are recorded on a [`Tape`] as the forward pass runs; [`Tape::backward`]
//! walks the recorded nodes once in reverse order. Broadcasting binary ops
//! accept a right operand of shape 1×1, 1×n or m×1.

use std::cell::RefCell;

use nalgebra::DMatrix;

type Mat = DMatrix<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Powf(usize, f64),
    Sum(usize),
    RowSum(usize),
    ColSum(usize),
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    Slice(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    SegmentSoftmax(usize, Vec<usize>),
    SegmentMax(usize, Vec<usize>),
    GatherElems(usize, Vec<(usize, usize)>),
    LogNormRows(usize, usize),
    LogNormCols(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the leaf `v`; zeros when `v` does not influence the
    /// output. Interior nodes are not retained.
    pub fn wrt(&self, v: &Var<'_>) -> Mat {
        self.grads[v.idx]
            .clone()
            .unwrap_or_else(|| Mat::zeros(self.shapes[v.idx].0, self.shapes[v.idx].1))
    }
}

fn broadcast_reduce(g: &Mat, shape: (usize, usize)) -> Mat {
    match shape {
        s if s == g.shape() => g.clone(),
        (1, 1) => Mat::from_element(1, 1, g.sum()),
        (1, n) if n == g.ncols() => col_sums(g),
        (m, 1) if m == g.nrows() => row_sums(g),
        s => panic!("cannot reduce gradient {:?} to {:?}", g.shape(), s),
    }
}

fn row_sums(a: &Mat) -> Mat {
    Mat::from_fn(a.nrows(), 1, |i, _| a.row(i).sum())
}

fn col_sums(a: &Mat) -> Mat {
    Mat::from_fn(1, a.ncols(), |_, j| a.column(j).sum())
}

fn broadcast_get(b: &Mat, i: usize, j: usize) -> f64 {
    let r = if b.nrows() == 1 { 0 } else { i };
    let c = if b.ncols() == 1 { 0 } else { j };
    b[(r, c)]
}

fn broadcast_ok(a: &Mat, b: &Mat) -> bool {
    (b.nrows() == a.nrows() || b.nrows() == 1) && (b.ncols() == a.ncols() || b.ncols() == 1)
}

fn broadcast_zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert!(
        broadcast_ok(a, b),
        "shape {:?} does not broadcast onto {:?}",
        b.shape(),
        a.shape()
    );
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| f(a[(i, j)], broadcast_get(b, i, j)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp<'a>(it: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, v))
    }

    /// Branch taken by every non-smooth op recorded so far: the sign of each
    /// leaky-ReLU input and the winning row of each segment maximum. Two
    /// recordings of the same function with equal patterns lie on the same
    /// smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match &node.op {
                Op::LeakyRelu(a, _) => out.extend(nodes[*a].value.iter().map(|&v| usize::from(v > 0.0))),
                Op::SegmentMax(a, seg) => {
                    let input = &nodes[*a].value;
                    let (groups, cols) = node.value.shape();
                    let mut best = vec![usize::MAX; groups * cols];
                    for (k, &g) in seg.iter().enumerate() {
                        for j in 0..cols {
                            let b = &mut best[g * cols + j];
                            if *b == usize::MAX || input[(k, j)] > input[(*b, j)] {
                                *b = k;
                            }
                        }
                    }
                    out.extend(best);
                }
                _ => {}
            }
        }
        out
    }

    /// Back-propagates from the 1×1 node `out`.
    pub fn backward(&self, out: &Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.idx].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[out.idx] = Some(Mat::from_element(1, 1, 1.0));
        let val = |i: usize| &nodes[i].value;
        for idx in (0..=out.idx).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |i: usize, d: Mat| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => *existing += d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, &g * val(*b).transpose());
                    acc(*b, val(*a).transpose() * &g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, broadcast_reduce(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -broadcast_reduce(&g, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, broadcast_zip(&g, vb, |x, y| x * y));
                    let gb = g.component_mul(va);
                    acc(*b, broadcast_reduce(&gb, vb.shape()));
                }
                Op::Scale(a, c) => acc(*a, &g * *c),
                Op::AddConst(a) => acc(*a, g.clone()),
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Exp(a) => acc(*a, g.component_mul(&node.value)),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
                Op::LeakyRelu(a, slope) => {
                    acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { x * slope }))
                }
                Op::Powf(a, p) => acc(*a, g.zip_map(val(*a), |x, y| x * p * y.powf(p - 1.0))),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::ColSum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::HCat(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.columns(c0, w).into_owned());
                        c0 += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        acc(p, g.rows(r0, h).into_owned());
                        r0 += h;
                    }
                }
                Op::Slice(a, r0, c0) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    d.view_mut((*r0, *c0), g.shape()).copy_from(&g);
                    acc(*a, d);
                }
                Op::GatherRows(a, idxs) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for (k, &i) in idxs.iter().enumerate() {
                        for j in 0..c {
                            d[(i, j)] += g[(k, j)];
                        }
                    }
                    acc(*a, d);
                }
                Op::ScatterAddRows(a, idxs) => {
                    let c = g.ncols();
                    acc(*a, Mat::from_fn(idxs.len(), c, |k, j| g[(idxs[k], j)]));
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = &node.value;
                    let nseg = seg.iter().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; nseg];
                    for (k, &s) in seg.iter().enumerate() {
                        dot[s] += g[(k, 0)] * y[(k, 0)];
                    }
                    acc(*a, Mat::from_fn(seg.len(), 1, |k, _| y[(k, 0)] * (g[(k, 0)] - dot[seg[k]])));
                }
                Op::SegmentMax(a, seg) => {
                    let x = val(*a);
                    let mut d = Mat::zeros(x.nrows(), x.ncols());
                    let mut arg = vec![usize::MAX; g.nrows() * x.ncols()];
                    for (k, &s) in seg.iter().enumerate() {
                        for j in 0..x.ncols() {
                            let slot = &mut arg[s * x.ncols() + j];
                            if *slot == usize::MAX || x[(k, j)] > x[(*slot, j)] {
                                *slot = k;
                            }
                        }
                    }
                    for s in 0..g.nrows() {
                        for j in 0..x.ncols() {
                            let k = arg[s * x.ncols() + j];
                            if k != usize::MAX {
                                d[(k, j)] += g[(s, j)];
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::GatherElems(a, cells) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for (k, &(i, j)) in cells.iter().enumerate() {
                        d[(i, j)] += g[(k, 0)];
                    }
                    acc(*a, d);
                }
                Op::LogNormRows(a, active) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for i in 0..*active {
                        let gs: f64 = g.row(i).sum();
                        for j in 0..y.ncols() {
                            d[(i, j)] -= y[(i, j)].exp() * gs;
                        }
                    }
                    acc(*a, d);
                }
                Op::LogNormCols(a, active) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for j in 0..*active {
                        let gs: f64 = g.column(j).sum();
                        for i in 0..y.nrows() {
                            d[(i, j)] -= y[(i, j)].exp() * gs;
                        }
                    }
                    acc(*a, d);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        drop(nodes);
        Gradients { grads, shapes }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Mat {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Reads the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|v| v.shape())
    }

    pub fn scalar(&self) -> f64 {
        self.with_value(|v| v[(0, 0)])
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn rg(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Mat) -> Mat) -> Var<'t> {
        let value = self.with_value(f);
        self.tape.push(value, op, self.rg())
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl FnOnce(&Mat, &Mat) -> Mat) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.idx].value, &nodes[other.idx].value)
        };
        let rg = self.rg() || other.rg();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.idx, other.idx), |a, b| {
            assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
            a * b
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.idx, other.idx), |a, b| broadcast_zip(a, b, |x, y| x + y))
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.idx, other.idx), |a, b| broadcast_zip(a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.idx, other.idx), |a, b| broadcast_zip(a, b, |x, y| x * y))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |a| a * c)
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.idx), |a| a.add_scalar(c))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.idx), |a| a.transpose())
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), |a| a.map(f64::exp))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.idx), |a| a.map(f64::ln))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), |a| a.map(sigmoid))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.idx, slope), |a| a.map(|x| if x > 0.0 { x } else { slope * x }))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.idx, p), |a| a.map(|x| x.powf(p)))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.idx), |a| Mat::from_element(1, 1, a.sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with_value(|v| v.len()).max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums each row into an m×1 column.
    pub fn row_sum(&self) -> Var<'t> {
        self.unary(Op::RowSum(self.idx), row_sums)
    }

    /// Sums each column into a 1×n row.
    pub fn col_sum(&self) -> Var<'t> {
        self.unary(Op::ColSum(self.idx), col_sums)
    }

    pub fn hcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Mat> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            let rows = vals[0].nrows();
            assert!(vals.iter().all(|v| v.nrows() == rows), "hcat row mismatch");
            let cols = vals.iter().map(|v| v.ncols()).sum();
            let mut out = Mat::zeros(rows, cols);
            let mut c0 = 0;
            for v in vals {
                out.columns_mut(c0, v.ncols()).copy_from(v);
                c0 += v.ncols();
            }
            out
        };
        let rg = parts.iter().any(|p| p.rg());
        tape.push(value, Op::HCat(parts.iter().map(|p| p.idx).collect()), rg)
    }

    pub fn vcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Mat> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            let cols = vals[0].ncols();
            assert!(vals.iter().all(|v| v.ncols() == cols), "vcat column mismatch");
            let rows = vals.iter().map(|v| v.nrows()).sum();
            let mut out = Mat::zeros(rows, cols);
            let mut r0 = 0;
            for v in vals {
                out.rows_mut(r0, v.nrows()).copy_from(v);
                r0 += v.nrows();
            }
            out
        };
        let rg = parts.iter().any(|p| p.rg());
        tape.push(value, Op::VCat(parts.iter().map(|p| p.idx).collect()), rg)
    }

    pub fn slice(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Var<'t> {
        self.unary(Op::Slice(self.idx, r0, c0), |a| a.view((r0, c0), (nr, nc)).into_owned())
    }

    /// Row `k` of the output is row `idx[k]` of the input.
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        self.unary(Op::GatherRows(self.idx, idx.to_vec()), |a| a.select_rows(idx))
    }

    /// Output row `idx[k]` accumulates input row `k`.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Var<'t> {
        self.unary(Op::ScatterAddRows(self.idx, idx.to_vec()), |a| {
            let mut out = Mat::zeros(rows, a.ncols());
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..a.ncols() {
                    out[(i, j)] += a[(k, j)];
                }
            }
            out
        })
    }

    /// Softmax of an E×1 column within the groups given by `seg`.
    pub fn segment_softmax(&self, seg: &[usize]) -> Var<'t> {
        self.unary(Op::SegmentSoftmax(self.idx, seg.to_vec()), |a| {
            assert_eq!(a.shape(), (seg.len(), 1), "segment_softmax expects an E×1 column");
            let nseg = seg.iter().max().map_or(0, |m| m + 1);
            let mut mx = vec![f64::NEG_INFINITY; nseg];
            for (k, &s) in seg.iter().enumerate() {
                mx[s] = mx[s].max(a[(k, 0)]);
            }
            let e: Vec<f64> = seg.iter().enumerate().map(|(k, &s)| (a[(k, 0)] - mx[s]).exp()).collect();
            let mut z = vec![0.0; nseg];
            for (k, &s) in seg.iter().enumerate() {
                z[s] += e[k];
            }
            Mat::from_fn(seg.len(), 1, |k, _| e[k] / z[seg[k]])
        })
    }

    /// Column-wise maximum of the rows in each group; groups without rows
    /// give zeros. Gradients route to the first maximizing row.
    pub fn segment_max(&self, seg: &[usize], groups: usize) -> Var<'t> {
        self.unary(Op::SegmentMax(self.idx, seg.to_vec()), |a| {
            assert_eq!(a.nrows(), seg.len(), "segment_max expects one id per row");
            let mut out = Mat::from_element(groups, a.ncols(), f64::NEG_INFINITY);
            for (k, &s) in seg.iter().enumerate() {
                for j in 0..a.ncols() {
                    if a[(k, j)] > out[(s, j)] {
                        out[(s, j)] = a[(k, j)];
                    }
                }
            }
            out.map(|v| if v == f64::NEG_INFINITY { 0.0 } else { v })
        })
    }

    /// Column of the listed cells.
    pub fn gather_elems(&self, cells: &[(usize, usize)]) -> Var<'t> {
        self.unary(Op::GatherElems(self.idx, cells.to_vec()), |a| {
            Mat::from_fn(cells.len(), 1, |k, _| a[cells[k]])
        })
    }

    /// Subtracts each row's log-sum-exp from the first `active` rows.
    pub fn log_normalize_rows(&self, active: usize) -> Var<'t> {
        self.unary(Op::LogNormRows(self.idx, active), |a| {
            let mut out = a.clone();
            for i in 0..active {
                let row = a.row(i);
                let lse = logsumexp(row.iter());
                for j in 0..a.ncols() {
                    out[(i, j)] -= lse;
                }
            }
            out
        })
    }

    /// Subtracts each column's log-sum-exp from the first `active` columns.
    pub fn log_normalize_cols(&self, active: usize) -> Var<'t> {
        self.unary(Op::LogNormCols(self.idx, active), |a| {
            let mut out = a.clone();
            for j in 0..active {
                let col = a.column(j);
                let lse = logsumexp(col.iter());
                for i in 0..a.nrows() {
                    out[(i, j)] -= lse;
                }
            }
            out
        })
    }
}
