//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records a straight-line program over row-major 2-D blocks of
//! `f64`. Every recorded node is one of a fixed set of primitives (the [`Op`]
//! enum is closed, so an unregistered primitive cannot be constructed). A
//! reverse sweep from any scalar node yields exact gradients for every node
//! that depends on a gradient-carrying leaf.
//!
//! Discrete selections (nearest neighbours, argmins) enter the tape only as
//! index lists of [`Tape::gather`], so the selection itself is detached while
//! the gathered values stay differentiable.
//!
//! All reductions run in index order, which makes a sweep bit-reproducible.

use ndarray::{Array2, Axis};

use super::eig;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Slice { src: Var, offset: usize },
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    Affine { src: Var, scale: f64 },
    Softplus(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Relu(Var),
    Recip(Var),
    Gather { src: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SegmentMean { src: Var, segment: Vec<usize>, counts: Vec<usize> },
    RowSum(Var),
    RowDot(Var, Var),
    Cross(Var, Var),
    Outer(Var),
    Sum(Var),
    SymEigMin(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Slice { .. } => "slice",
            Op::MatMulT(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MulCol(..) => "mul_col",
            Op::Affine { .. } => "affine",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Recip(..) => "recip",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SegmentMean { .. } => "segment_mean",
            Op::RowSum(..) => "row_sum",
            Op::RowDot(..) => "row_dot",
            Op::Cross(..) => "cross",
            Op::Outer(..) => "outer",
            Op::Sum(..) => "sum",
            Op::SymEigMin(..) => "sym_eig_min",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recording of a differentiable computation.
///
/// One tape belongs to one evaluation; it is not shared between threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` when the output does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    /// Returns an error if any recorded primitive produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(primitive) => Err(Error::NonFinite { primitive }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        if self.non_finite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Slice { src, .. }
            | Op::Affine { src, .. }
            | Op::Gather { src, .. }
            | Op::SegmentMean { src, .. } => vec![*src],
            Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Recip(a)
            | Op::RowSum(a)
            | Op::Outer(a)
            | Op::Sum(a)
            | Op::SymEigMin(a) => vec![*a],
            Op::MatMulT(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulCol(a, b)
            | Op::RowDot(a, b)
            | Op::Cross(a, b) => vec![*a, *b],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }

    /// Gradient-carrying input.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Copies the current value of `v` into a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Contiguous row-major range of `src` viewed as a `rows x cols` block.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let s = self.value(src);
        let len = s.len();
        if offset + rows * cols > len {
            return Err(shape_err(
                "slice",
                format!("range {offset}+{} exceeds {len}", rows * cols),
            ));
        }
        let flat: Vec<f64> = s.iter().skip(offset).take(rows * cols).copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("slice shape");
        Ok(self.push(value, Op::Slice { src, offset }))
    }

    /// `a · wᵀ` for `a: r x k`, `w: m x k`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        if av.ncols() != wv.ncols() {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?}ᵀ", av.dim(), wv.dim()),
            ));
        }
        let value = av.dot(&wv.t());
        Ok(self.push(value, Op::MatMulT(a, w)))
    }

    /// Adds the `1 x m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", av.dim(), bv.dim())));
        }
        let value = av + bv;
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a) / self.value(b);
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Mul(a, a))
    }

    /// Scales row `i` of `a` by `s[i]`, with `s: r x 1`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.ncols() != 1 || sv.nrows() != av.nrows() {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", av.dim(), sv.dim())));
        }
        let value = av * sv;
        Ok(self.push(value, Op::MulCol(a, s)))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        self.push(value, Op::Affine { src: a, scale })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    /// Row `i` of the result is row `rows[i]` of `src`. The index list is a
    /// detached selection.
    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = rows.iter().find(|&&r| r >= sv.nrows()) {
            return Err(shape_err(
                "gather",
                format!("row {bad} out of {}", sv.nrows()),
            ));
        }
        let value = sv.select(Axis(0), &rows);
        Ok(self.push(value, Op::Gather { src, rows }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| shape_err("concat_rows", e.to_string()))?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err("concat_cols", e.to_string()))?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean of the rows of `src` assigned to each of `segments` groups;
    /// `segment[i]` is the group of row `i`. Empty groups yield zero rows.
    pub fn segment_mean(&mut self, src: Var, segment: Vec<usize>, segments: usize) -> Result<Var> {
        let sv = self.value(src);
        if segment.len() != sv.nrows() {
            return Err(shape_err(
                "segment_mean",
                format!("{} labels for {} rows", segment.len(), sv.nrows()),
            ));
        }
        let mut counts = vec![0usize; segments];
        let mut value = Array2::zeros((segments, sv.ncols()));
        for (i, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(shape_err("segment_mean", format!("label {s} >= {segments}")));
            }
            counts[s] += 1;
            let mut row = value.row_mut(s);
            row += &sv.row(i);
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                value.row_mut(s).mapv_inplace(|x| x / c as f64);
            }
        }
        Ok(self.push(value, Op::SegmentMean { src, segment, counts }))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Array2::zeros((av.nrows(), 1));
        for (i, row) in av.rows().into_iter().enumerate() {
            value[[i, 0]] = row.iter().fold(0.0, |acc, x| acc + x);
        }
        self.push(value, Op::RowSum(a))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Array2::zeros((av.nrows(), 1));
        for i in 0..av.nrows() {
            let mut acc = 0.0;
            for j in 0..av.ncols() {
                acc += av[[i, j]] * bv[[i, j]];
            }
            value[[i, 0]] = acc;
        }
        Ok(self.push(value, Op::RowDot(a, b)))
    }

    /// Row-wise cross product of two `r x 3` blocks.
    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cross", a, b)?;
        if self.shape(a).1 != 3 {
            return Err(shape_err("cross", format!("{:?}", self.shape(a))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Array2::zeros(av.dim());
        for i in 0..av.nrows() {
            let c = cross3(
                [av[[i, 0]], av[[i, 1]], av[[i, 2]]],
                [bv[[i, 0]], bv[[i, 1]], bv[[i, 2]]],
            );
            for j in 0..3 {
                value[[i, j]] = c[j];
            }
        }
        Ok(self.push(value, Op::Cross(a, b)))
    }

    /// Row-wise outer product `x xᵀ` of an `r x 3` block, flattened to `r x 9`.
    pub fn outer(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).1 != 3 {
            return Err(shape_err("outer", format!("{:?}", self.shape(a))));
        }
        let av = self.value(a);
        let mut value = Array2::zeros((av.nrows(), 9));
        for i in 0..av.nrows() {
            for p in 0..3 {
                for q in 0..3 {
                    value[[i, 3 * p + q]] = av[[i, p]] * av[[i, q]];
                }
            }
        }
        Ok(self.push(value, Op::Outer(a)))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(0.0, |acc, x| acc + x);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Unit eigenvector for the smallest eigenvalue of each row of `c`
    /// (`r x 9`, a row-major 3x3 matrix per row, symmetrized before use).
    ///
    /// The gradient of a row is zero when its eigen-gap `λ_mid − λ_min` is
    /// below [`eig::GAP_THRESHOLD`].
    pub fn sym_eig_min(&mut self, c: Var) -> Result<Var> {
        if self.shape(c).1 != 9 {
            return Err(shape_err("sym_eig_min", format!("{:?}", self.shape(c))));
        }
        let cv = self.value(c);
        let mut value = Array2::zeros((cv.nrows(), 3));
        for i in 0..cv.nrows() {
            let m = row_to_sym(cv.row(i).as_slice().expect("contiguous row"));
            let e = eig::smallest_eigenvector(&m);
            for j in 0..3 {
                value[[i, j]] = e.vector[j];
            }
        }
        Ok(self.push(value, Op::SymEigMin(c)))
    }

    /// Reverse sweep seeded with `d output = 1`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_finite()?;
        let grads = self.backward_unchecked(output)?;
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        primitive: self.nodes[i].op.name(),
                    });
                }
            }
        }
        Ok(grads)
    }

    /// Reverse sweep without finiteness checks, for locating the source of a
    /// non-finite gradient.
    pub fn backward_unchecked(&self, output: Var) -> Result<Gradients> {
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, v: Var) -> Array2<f64> {
        Array2::zeros(self.shape(v))
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Slice { src, offset } => {
                if self.wants(*src) {
                    let mut d = self.zeros_like(*src);
                    for (slot, x) in d.iter_mut().skip(*offset).zip(g.iter()) {
                        *slot = *x;
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::MatMulT(a, w) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*w)));
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, g.t().dot(self.value(*a)));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let mut d = Array2::zeros((1, g.ncols()));
                    for row in g.rows() {
                        for (j, x) in row.iter().enumerate() {
                            d[[0, j]] += x;
                        }
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if a == b {
                    let d = g * self.value(*a) * 2.0;
                    self.accumulate(grads, *a, d);
                } else {
                    self.accumulate(grads, *a, g * self.value(*b));
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.accumulate(grads, *a, g / bv);
                if self.wants(*b) {
                    let d = -(g * &node.value) / bv;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MulCol(a, s) => {
                let sv = self.value(*s);
                self.accumulate(grads, *a, g * sv);
                if self.wants(*s) {
                    let av = self.value(*a);
                    let mut d = Array2::zeros(sv.dim());
                    for i in 0..av.nrows() {
                        let mut acc = 0.0;
                        for j in 0..av.ncols() {
                            acc += g[[i, j]] * av[[i, j]];
                        }
                        d[[i, 0]] = acc;
                    }
                    self.accumulate(grads, *s, d);
                }
            }
            Op::Affine { src, scale } => {
                self.accumulate(grads, *src, g * *scale);
            }
            Op::Softplus(a) => {
                let d = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|g, x| g * sigmoid(*x));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = ndarray::Zip::from(g)
                    .and(&node.value)
                    .map_collect(|g, s| g * s * (1.0 - s));
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = ndarray::Zip::from(g)
                    .and(&node.value)
                    .map_collect(|g, y| if *y > 0.0 { g / (2.0 * y) } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|g, x| if *x > 0.0 { *g } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Recip(a) => {
                let d = ndarray::Zip::from(g)
                    .and(&node.value)
                    .map_collect(|g, y| -g * y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Gather { src, rows } => {
                if self.wants(*src) {
                    let mut d = self.zeros_like(*src);
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(i);
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    if self.wants(*p) {
                        let d = g.slice(ndarray::s![start..start + n, ..]).to_owned();
                        self.accumulate(grads, *p, d);
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    if self.wants(*p) {
                        let d = g.slice(ndarray::s![.., start..start + n]).to_owned();
                        self.accumulate(grads, *p, d);
                    }
                    start += n;
                }
            }
            Op::SegmentMean {
                src,
                segment,
                counts,
            } => {
                if self.wants(*src) {
                    let mut d = self.zeros_like(*src);
                    for (i, &s) in segment.iter().enumerate() {
                        let c = counts[s] as f64;
                        for j in 0..d.ncols() {
                            d[[i, j]] = g[[s, j]] / c;
                        }
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::RowSum(a) => {
                let mut d = self.zeros_like(*a);
                for i in 0..d.nrows() {
                    for j in 0..d.ncols() {
                        d[[i, j]] = g[[i, 0]];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowDot(a, b) => {
                if a == b {
                    let d = self.value(*a) * g * 2.0;
                    self.accumulate(grads, *a, d);
                } else {
                    self.accumulate(grads, *a, self.value(*b) * g);
                    self.accumulate(grads, *b, self.value(*a) * g);
                }
            }
            Op::Cross(a, b) => {
                // d(a×b) = da×b + a×db  =>  ā = b×ḡ, b̄ = ḡ×a
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = self.zeros_like(*a);
                let mut db = self.zeros_like(*b);
                for i in 0..g.nrows() {
                    let gi = [g[[i, 0]], g[[i, 1]], g[[i, 2]]];
                    let ai = [av[[i, 0]], av[[i, 1]], av[[i, 2]]];
                    let bi = [bv[[i, 0]], bv[[i, 1]], bv[[i, 2]]];
                    let x = cross3(bi, gi);
                    let y = cross3(gi, ai);
                    for j in 0..3 {
                        da[[i, j]] = x[j];
                        db[[i, j]] = y[j];
                    }
                }
                if a == b {
                    self.accumulate(grads, *a, da + db);
                } else {
                    self.accumulate(grads, *a, da);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Outer(a) => {
                let av = self.value(*a);
                let mut d = self.zeros_like(*a);
                for i in 0..av.nrows() {
                    for p in 0..3 {
                        let mut acc = 0.0;
                        for q in 0..3 {
                            acc += (g[[i, 3 * p + q]] + g[[i, 3 * q + p]]) * av[[i, q]];
                        }
                        d[[i, p]] = acc;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::SymEigMin(c) => {
                let cv = self.value(*c);
                let mut d = self.zeros_like(*c);
                for i in 0..cv.nrows() {
                    let m = row_to_sym(cv.row(i).as_slice().expect("contiguous row"));
                    let v = [node.value[[i, 0]], node.value[[i, 1]], node.value[[i, 2]]];
                    let gv = [g[[i, 0]], g[[i, 1]], g[[i, 2]]];
                    let dm = eig::smallest_eigenvector_vjp(&m, v, gv);
                    for p in 0..3 {
                        for q in 0..3 {
                            d[[i, 3 * p + q]] = dm[p][q];
                        }
                    }
                }
                self.accumulate(grads, *c, d);
            }
        }
    }
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn row_to_sym(r: &[f64]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            m[p][q] = 0.5 * (r[3 * p + q] + r[3 * q + p]);
        }
    }
    m
}
