//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records primitive operations over column vectors and small
//! matrices; [`Tape::backward`] replays them in reverse to accumulate
//! gradients of a scalar output. One tape per training step; tapes are never
//! shared across workers. Gradients are bitwise deterministic: nodes live in
//! a `Vec` and accumulation order is fixed by construction order.

use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("backward requires a scalar output, got shape {0}x{1}")]
    NonScalarOutput(usize, usize),
}

/// Dense row-major shape. Vectors are `(n, 1)`, scalars `(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }
    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, F),
    AddConst(usize, F),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Softplus(usize),
    Clamp(usize, F, F),
    Max(usize, usize),
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    MatMul(usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    StRound(usize),
    AddCol(usize, usize),
    RowConcat(Vec<usize>),
    RowSlice(usize, usize),
    Reshape(usize),
    StackCols(Vec<usize>),
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    shape: Shape,
    data: Vec<F>,
}

/// Append-only record of primitive operations; inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, shape: Shape, data: Vec<F>) -> Value {
        debug_assert_eq!(shape.len(), data.len());
        self.nodes.push(Node { op, shape, data });
        Value(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or data) node.
    pub fn leaf(&mut self, data: &[F], shape: Shape) -> Value {
        assert_eq!(shape.len(), data.len(), "leaf data does not match shape");
        self.push(Op::Leaf, shape, data.to_vec())
    }

    pub fn scalar(&mut self, x: F) -> Value {
        self.push(Op::Leaf, Shape::scalar(), vec![x])
    }

    pub fn shape(&self, v: Value) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Value) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Value) -> F {
        debug_assert!(self.nodes[v.0].shape.is_scalar());
        self.nodes[v.0].data[0]
    }

    fn same_shape(&self, a: Value, b: Value) -> Shape {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "elementwise op on mismatched shapes");
        sa
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let s = self.same_shape(a, b);
        let data = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), s, data)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let s = self.same_shape(a, b);
        let data = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), s, data)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let s = self.same_shape(a, b);
        let data = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), s, data)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let data = self.map(a, |x| -x);
        self.push(Op::Neg(a.0), s, data)
    }

    pub fn scale(&mut self, a: Value, c: F) -> Value {
        let s = self.shape(a);
        let data = self.map(a, |x| x * c);
        self.push(Op::Scale(a.0, c), s, data)
    }

    pub fn add_const(&mut self, a: Value, c: F) -> Value {
        let s = self.shape(a);
        let data = self.map(a, |x| x + c);
        self.push(Op::AddConst(a.0, c), s, data)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let data = self.map(a, sigmoid_scalar);
        self.push(Op::Sigmoid(a.0), s, data)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let data = self.map(a, |x| x.tanh());
        self.push(Op::Tanh(a.0), s, data)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let data = self.map(a, |x| x.exp());
        self.push(Op::Exp(a.0), s, data)
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let data = self.map(a, |x| x.ln());
        self.push(Op::Ln(a.0), s, data)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let data = self.map(a, |x| x.abs());
        self.push(Op::Abs(a.0), s, data)
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let data = self.map(a, softplus_scalar);
        self.push(Op::Softplus(a.0), s, data)
    }

    /// Clamp to `[lo, hi]`; gradient passes through exactly where the input
    /// was left unchanged.
    pub fn clamp(&mut self, a: Value, lo: F, hi: F) -> Value {
        assert!(lo <= hi);
        let s = self.shape(a);
        let data = self.map(a, |x| if x < lo { lo } else if x > hi { hi } else { x });
        self.push(Op::Clamp(a.0, lo, hi), s, data)
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn max(&mut self, a: Value, b: Value) -> Value {
        let s = self.same_shape(a, b);
        let data = self.zip(a, b, |x, y| if x >= y { x } else { y });
        self.push(Op::Max(a.0, b.0), s, data)
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let mut acc = F::zero();
        for &x in self.value(a) {
            acc = acc + x;
        }
        self.push(Op::Sum(a.0), Shape::scalar(), vec![acc])
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let n = F::of(self.shape(a).len() as f64);
        let mut acc = F::zero();
        for &x in self.value(a) {
            acc = acc + x;
        }
        self.push(Op::Mean(a.0), Shape::scalar(), vec![acc / n])
    }

    pub fn dot(&mut self, a: Value, b: Value) -> Value {
        let s = self.same_shape(a, b);
        assert_eq!(s.cols, 1, "dot expects column vectors");
        let mut acc = F::zero();
        for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
            acc = acc + x * y;
        }
        self.push(Op::Dot(a.0, b.0), Shape::scalar(), vec![acc])
    }

    /// `(m, k) x (k, n) -> (m, n)`; column vectors are `(k, 1)`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut data = vec![F::zero(); m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == F::zero() {
                        continue;
                    }
                    for j in 0..n {
                        data[i * n + j] = data[i * n + j] + aip * bv[p * n + j];
                    }
                }
            }
        }
        self.push(Op::MatMul(a.0, b.0), Shape::matrix(m, n), data)
    }

    /// Concatenate column vectors.
    pub fn concat(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).cols, 1, "concat expects column vectors");
            data.extend_from_slice(self.value(p));
        }
        let n = data.len();
        self.push(
            Op::Concat(parts.iter().map(|v| v.0).collect()),
            Shape::vector(n),
            data,
        )
    }

    /// Contiguous sub-vector `[start, start + len)` of a column vector.
    pub fn slice(&mut self, a: Value, start: usize, len: usize) -> Value {
        let s = self.shape(a);
        assert_eq!(s.cols, 1, "slice expects a column vector");
        assert!(start + len <= s.rows, "slice out of bounds");
        let data = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice(a.0, start), Shape::vector(len), data)
    }

    /// Straight-through rounding: hard 0/1 forward, identity gradient.
    pub fn st_round(&mut self, a: Value) -> Value {
        let s = self.shape(a);
        let half = F::of(0.5);
        let data = self.map(a, |x| if x > half { F::one() } else { F::zero() });
        self.push(Op::StRound(a.0), s, data)
    }

    /// Broadcast-add a column vector to every column of a matrix.
    pub fn add_col(&mut self, m: Value, col: Value) -> Value {
        let (sm, sc) = (self.shape(m), self.shape(col));
        assert_eq!(sc.cols, 1, "add_col expects a column vector");
        assert_eq!(sm.rows, sc.rows, "add_col row mismatch");
        let (rows, cols) = (sm.rows, sm.cols);
        let mut data = self.value(m).to_vec();
        {
            let cv = self.value(col);
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] = data[r * cols + c] + cv[r];
                }
            }
        }
        self.push(Op::AddCol(m.0, col.0), sm, data)
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn row_concat(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.cols, cols, "row_concat column mismatch");
            rows += s.rows;
            data.extend_from_slice(self.value(p));
        }
        self.push(
            Op::RowConcat(parts.iter().map(|v| v.0).collect()),
            Shape::matrix(rows, cols),
            data,
        )
    }

    /// Contiguous row range `[start, start + len)` of a matrix.
    pub fn row_slice(&mut self, a: Value, start: usize, len: usize) -> Value {
        let s = self.shape(a);
        assert!(start + len <= s.rows, "row_slice out of bounds");
        let data = self.value(a)[start * s.cols..(start + len) * s.cols].to_vec();
        self.push(Op::RowSlice(a.0, start), Shape::matrix(len, s.cols), data)
    }

    /// Reinterpret the payload under a new shape of the same length.
    pub fn reshape(&mut self, a: Value, shape: Shape) -> Value {
        assert_eq!(self.shape(a).len(), shape.len(), "reshape length mismatch");
        let data = self.value(a).to_vec();
        self.push(Op::Reshape(a.0), shape, data)
    }

    /// Stack equal-length column vectors side by side into an `(n, k)` matrix.
    pub fn stack_cols(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).rows;
        let k = parts.len();
        let mut data = vec![F::zero(); n * k];
        for (c, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            assert_eq!(s.cols, 1, "stack_cols expects column vectors");
            assert_eq!(s.rows, n, "stack_cols length mismatch");
            for (r, &v) in self.value(p).iter().enumerate() {
                data[r * k + c] = v;
            }
        }
        self.push(
            Op::StackCols(parts.iter().map(|v| v.0).collect()),
            Shape::matrix(n, k),
            data,
        )
    }

    fn map(&self, a: Value, f: impl Fn(F) -> F) -> Vec<F> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    fn zip(&self, a: Value, b: Value, f: impl Fn(F, F) -> F) -> Vec<F> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// Gradients of a scalar `output` with respect to each value in `wrt`.
    /// Values not on the path to the output get zero gradients.
    pub fn backward(&self, output: Value, wrt: &[Value]) -> Result<Vec<Vec<F>>, GradError> {
        let out_shape = self.shape(output);
        if !out_shape.is_scalar() {
            return Err(GradError::NonScalarOutput(out_shape.rows, out_shape.cols));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![F::one()]);

        for idx in (0..=output.0).rev() {
            let (before, rest) = grads.split_at_mut(idx);
            let g = match rest[0].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            fn acc<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
                slot.get_or_insert_with(|| vec![F::zero(); len])
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = acc(&mut before[*a], g.len());
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                    let gb = acc(&mut before[*b], g.len());
                    for (o, &gi) in gb.iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                }
                Op::Sub(a, b) => {
                    let ga = acc(&mut before[*a], g.len());
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                    let gb = acc(&mut before[*b], g.len());
                    for (o, &gi) in gb.iter_mut().zip(&g) {
                        *o = *o - gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &y) in ga.iter_mut().zip(&g).zip(bv) {
                        *o = *o + gi * y;
                    }
                    let gb = acc(&mut before[*b], g.len());
                    for ((o, &gi), &x) in gb.iter_mut().zip(&g).zip(av) {
                        *o = *o + gi * x;
                    }
                }
                Op::Neg(a) => {
                    let ga = acc(&mut before[*a], g.len());
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o = *o - gi;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut before[*a], g.len());
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o = *o + gi * *c;
                    }
                }
                Op::AddConst(a, _) => {
                    let ga = acc(&mut before[*a], g.len());
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &y) in ga.iter_mut().zip(&g).zip(&node.data) {
                        *o = *o + gi * y * (F::one() - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &y) in ga.iter_mut().zip(&g).zip(&node.data) {
                        *o = *o + gi * (F::one() - y * y);
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &y) in ga.iter_mut().zip(&g).zip(&node.data) {
                        *o = *o + gi * y;
                    }
                }
                Op::Ln(a) => {
                    let av = &self.nodes[*a].data;
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                        *o = *o + gi / x;
                    }
                }
                Op::Abs(a) => {
                    let av = &self.nodes[*a].data;
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                        let s = if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        *o = *o + gi * s;
                    }
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[*a].data;
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                        *o = *o + gi * sigmoid_scalar(x);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[*a].data;
                    let ga = acc(&mut before[*a], g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                        if x >= *lo && x <= *hi {
                            *o = *o + gi;
                        }
                    }
                }
                Op::Max(a, b) => {
                    let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    let ga = acc(&mut before[*a], g.len());
                    for (((o, &gi), &x), &y) in ga.iter_mut().zip(&g).zip(av).zip(bv) {
                        if x >= y {
                            *o = *o + gi;
                        }
                    }
                    let gb = acc(&mut before[*b], g.len());
                    for (((o, &gi), &x), &y) in gb.iter_mut().zip(&g).zip(av).zip(bv) {
                        if x < y {
                            *o = *o + gi;
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[*a].shape.len();
                    let ga = acc(&mut before[*a], len);
                    for o in ga.iter_mut() {
                        *o = *o + g[0];
                    }
                }
                Op::Mean(a) => {
                    let len = self.nodes[*a].shape.len();
                    let gi = g[0] / F::of(len as f64);
                    let ga = acc(&mut before[*a], len);
                    for o in ga.iter_mut() {
                        *o = *o + gi;
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    let ga = acc(&mut before[*a], av.len());
                    for (o, &y) in ga.iter_mut().zip(bv) {
                        *o = *o + g[0] * y;
                    }
                    let gb = acc(&mut before[*b], bv.len());
                    for (o, &x) in gb.iter_mut().zip(av) {
                        *o = *o + g[0] * x;
                    }
                }
                Op::MatMul(a, b) => {
                    let sa = self.nodes[*a].shape;
                    let sb = self.nodes[*b].shape;
                    let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                    let av = &self.nodes[*a].data;
                    let bv = &self.nodes[*b].data;
                    {
                        let ga = acc(&mut before[*a], m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = F::zero();
                                for j in 0..n {
                                    s = s + g[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] = ga[i * k + p] + s;
                            }
                        }
                    }
                    {
                        let gb = acc(&mut before[*b], k * n);
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = F::zero();
                                for i in 0..m {
                                    s = s + av[i * k + p] * g[i * n + j];
                                }
                                gb[p * n + j] = gb[p * n + j] + s;
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].shape.len();
                        let gp = acc(&mut before[p], len);
                        for (o, &gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *o = *o + gi;
                        }
                        offset += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.nodes[*a].shape.len();
                    let ga = acc(&mut before[*a], len);
                    for (o, &gi) in ga[*start..*start + g.len()].iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                }
                Op::StRound(a) => {
                    let ga = acc(&mut before[*a], g.len());
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                }
                Op::AddCol(m, col) => {
                    let sm = self.nodes[*m].shape;
                    {
                        let gm = acc(&mut before[*m], g.len());
                        for (o, &gi) in gm.iter_mut().zip(&g) {
                            *o = *o + gi;
                        }
                    }
                    {
                        let gc = acc(&mut before[*col], sm.rows);
                        for r in 0..sm.rows {
                            let mut s = F::zero();
                            for c in 0..sm.cols {
                                s = s + g[r * sm.cols + c];
                            }
                            gc[r] = gc[r] + s;
                        }
                    }
                }
                Op::RowConcat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].shape.len();
                        let gp = acc(&mut before[p], len);
                        for (o, &gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *o = *o + gi;
                        }
                        offset += len;
                    }
                }
                Op::RowSlice(a, start) => {
                    let sa = self.nodes[*a].shape;
                    let ga = acc(&mut before[*a], sa.len());
                    let from = start * sa.cols;
                    for (o, &gi) in ga[from..from + g.len()].iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                }
                Op::Reshape(a) => {
                    let ga = acc(&mut before[*a], g.len());
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o = *o + gi;
                    }
                }
                Op::StackCols(parts) => {
                    let k = parts.len();
                    for (c, &p) in parts.iter().enumerate() {
                        let n = self.nodes[p].shape.rows;
                        let gp = acc(&mut before[p], n);
                        for (r, o) in gp.iter_mut().enumerate() {
                            *o = *o + g[r * k + c];
                        }
                    }
                }
            }
            rest[0] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![F::zero(); self.nodes[v.0].shape.len()])
            })
            .collect())
    }
}

#[inline]
fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn softplus_scalar<F: Real>(x: F) -> F {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    let m = if x > F::zero() { x } else { F::zero() };
    m + (F::one() + (-x.abs()).exp()).ln()
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// (input index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub pass: bool,
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// (step 1e-5) for every coordinate of every input. `f` must be
/// deterministic; any sampling has to be frozen into the inputs.
pub fn grad_check<F: Real>(
    f: &dyn Fn(&mut Tape<F>, &[Value]) -> Value,
    inputs: &[(Vec<F>, Shape)],
    tolerance: f64,
) -> Result<GradCheckReport, GradError> {
    let eval = |points: &[Vec<F>]| -> (F, Vec<Vec<F>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Value> = points
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| tape.leaf(data, *shape))
            .collect();
        let out = f(&mut tape, &leaves);
        let grads = tape.backward(out, &leaves).expect("scalar output");
        (tape.scalar_value(out), grads)
    };

    let base: Vec<Vec<F>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let (_, analytic) = eval(&base);

    let h = F::of(1e-5);
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    for (i, (data, _)) in inputs.iter().enumerate() {
        for c in 0..data.len() {
            let mut plus = base.clone();
            plus[i][c] = plus[i][c] + h;
            let mut minus = base.clone();
            minus[i][c] = minus[i][c] - h;
            let fp = {
                let mut tape = Tape::new();
                let leaves: Vec<Value> = plus
                    .iter()
                    .zip(inputs)
                    .map(|(d, (_, s))| tape.leaf(d, *s))
                    .collect();
                let out = f(&mut tape, &leaves);
                tape.scalar_value(out)
            };
            let fm = {
                let mut tape = Tape::new();
                let leaves: Vec<Value> = minus
                    .iter()
                    .zip(inputs)
                    .map(|(d, (_, s))| tape.leaf(d, *s))
                    .collect();
                let out = f(&mut tape, &leaves);
                tape.scalar_value(out)
            };
            let fd = (fp - fm).as_f64() / (2.0 * h.as_f64());
            let a = analytic[i][c].as_f64();
            let rel = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (i, c);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        worst,
        pass: max_rel_err < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::<f64>::new();
        let w = tape.scalar(3.0);
        let y = tape.mul(w, w);
        let g = tape.backward(y, &[w]).unwrap();
        assert_eq!(g[0], vec![6.0]);
    }

    #[test]
    fn sigmoid_at_zero_has_gradient_quarter() {
        let mut tape = Tape::<f64>::new();
        let w = tape.scalar(0.0);
        let y = tape.sigmoid(w);
        let g = tape.backward(y, &[w]).unwrap();
        assert!((g[0][0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(&[1.0, 2.0], Shape::vector(2));
        let y = tape.scale(v, 2.0);
        assert!(matches!(
            tape.backward(y, &[v]),
            Err(GradError::NonScalarOutput(2, 1))
        ));
    }

    #[test]
    fn off_path_parameters_get_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.scalar(2.0);
        let unused = tape.leaf(&[1.0, 1.0, 1.0], Shape::vector(3));
        let y = tape.mul(w, w);
        let g = tape.backward(y, &[w, unused]).unwrap();
        assert_eq!(g[1], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn linearity_of_backward_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let grad_of = |coef_f: f64, coef_g: f64, xs: &[f64]| -> Vec<f64> {
                let mut tape = Tape::<f64>::new();
                let v = tape.leaf(xs, Shape::vector(4));
                let f = tape.sum(v); // f = sum(x)
                let sq = tape.mul(v, v);
                let g = tape.mean(sq); // g = mean(x^2)
                let sf = tape.scale(f, coef_f);
                let sg = tape.scale(g, coef_g);
                let y = tape.add(sf, sg);
                tape.backward(y, &[v]).unwrap().remove(0)
            };
            let combined = grad_of(a, b, &xs);
            let gf = grad_of(1.0, 0.0, &xs);
            let gg = grad_of(0.0, 1.0, &xs);
            for i in 0..4 {
                assert_eq!(combined[i], a * gf[i] + b * gg[i]);
            }
        }
    }

    #[test]
    fn identical_tapes_give_bitwise_identical_gradients() {
        let build = || {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(&[0.3, -1.7, 2.9], Shape::vector(3));
            let s = tape.sigmoid(v);
            let t = tape.tanh(s);
            let e = tape.exp(t);
            let m = tape.mean(e);
            tape.backward(m, &[v]).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
    }

    #[test]
    fn matmul_matches_by_hand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Shape::matrix(2, 3));
        let x = tape.leaf(&[1.0, 0.5, -1.0], Shape::vector(3));
        let y = tape.matmul(a, x);
        assert_eq!(tape.value(y), &[1.0 + 1.0 - 3.0, 4.0 + 2.5 - 6.0]);
        let s = tape.sum(y);
        let g = tape.backward(s, &[a, x]).unwrap();
        // d sum(A x) / dA = [x; x], d/dx = column sums of A
        assert_eq!(g[0], vec![1.0, 0.5, -1.0, 1.0, 0.5, -1.0]);
        assert_eq!(g[1], vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&[1.0, 2.0], Shape::vector(2));
        let b = tape.leaf(&[3.0], Shape::vector(1));
        let c = tape.concat(&[a, b]);
        let sl = tape.slice(c, 1, 2);
        let s = tape.sum(sl);
        let g = tape.backward(s, &[a, b]).unwrap();
        assert_eq!(g[0], vec![0.0, 1.0]);
        assert_eq!(g[1], vec![1.0]);
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Value]) -> Value>;
        // Each case: (name, builder over two 4-vectors); inputs kept away
        // from the non-smooth points of abs/max/clamp.
        let cases: Vec<(&str, BuildFn)> = vec![
            ("add", Box::new(|t, v| { let x = t.add(v[0], v[1]); t.sum(x) })),
            ("sub", Box::new(|t, v| { let x = t.sub(v[0], v[1]); t.sum(x) })),
            ("mul", Box::new(|t, v| { let x = t.mul(v[0], v[1]); t.sum(x) })),
            ("neg", Box::new(|t, v| { let x = t.neg(v[0]); t.sum(x) })),
            ("scale", Box::new(|t, v| { let x = t.scale(v[0], 1.7); t.sum(x) })),
            ("add_const", Box::new(|t, v| { let x = t.add_const(v[0], -0.3); t.sum(x) })),
            ("sigmoid", Box::new(|t, v| { let x = t.sigmoid(v[0]); t.sum(x) })),
            ("tanh", Box::new(|t, v| { let x = t.tanh(v[0]); t.sum(x) })),
            ("exp", Box::new(|t, v| { let x = t.exp(v[0]); t.sum(x) })),
            ("softplus", Box::new(|t, v| { let x = t.softplus(v[0]); t.sum(x) })),
            ("mean", Box::new(|t, v| t.mean(v[0]))),
            ("dot", Box::new(|t, v| t.dot(v[0], v[1]))),
            (
                "composite",
                Box::new(|t, v| {
                    let s = t.sigmoid(v[0]);
                    let m = t.mul(s, v[1]);
                    let e = t.tanh(m);
                    t.mean(e)
                }),
            ),
        ];
        for (name, f) in &cases {
            for _ in 0..20 {
                let a = random_vec(&mut rng, 4, -2.0, 2.0);
                let b = random_vec(&mut rng, 4, -2.0, 2.0);
                let report = grad_check(
                    f.as_ref(),
                    &[(a, Shape::vector(4)), (b, Shape::vector(4))],
                    1e-4,
                )
                .unwrap();
                assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
            }
        }
    }

    #[test]
    fn kinked_primitives_match_fd_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            // abs: keep |x| > 0.1
            let a: Vec<f64> = (0..4)
                .map(|_| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * rng.random_range(0.1..2.0)
                })
                .collect();
            let report = grad_check(
                &|t: &mut Tape<f64>, v: &[Value]| {
                    let x = t.abs(v[0]);
                    t.sum(x)
                },
                &[(a, Shape::vector(4))],
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "abs: {}", report.max_rel_err);

            // ln on positive inputs
            let p = random_vec(&mut rng, 4, 0.2, 3.0);
            let report = grad_check(
                &|t: &mut Tape<f64>, v: &[Value]| {
                    let x = t.ln(v[0]);
                    t.sum(x)
                },
                &[(p, Shape::vector(4))],
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "ln: {}", report.max_rel_err);

            // max with separated arguments
            let a = random_vec(&mut rng, 4, -2.0, 2.0);
            let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
            let report = grad_check(
                &|t: &mut Tape<f64>, v: &[Value]| {
                    let x = t.max(v[0], v[1]);
                    t.sum(x)
                },
                &[(a, Shape::vector(4)), (b, Shape::vector(4))],
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "max: {}", report.max_rel_err);

            // clamp strictly interior
            let c = random_vec(&mut rng, 4, -0.9, 0.9);
            let report = grad_check(
                &|t: &mut Tape<f64>, v: &[Value]| {
                    let x = t.clamp(v[0], -1.0, 1.0);
                    t.sum(x)
                },
                &[(c, Shape::vector(4))],
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "clamp: {}", report.max_rel_err);
        }
    }

    #[test]
    fn grad_check_is_exact_for_linear_functions() {
        let report = grad_check(
            &|t: &mut Tape<f64>, v: &[Value]| {
                let s = t.scale(v[0], 3.0);
                t.sum(s)
            },
            &[(vec![0.1, 0.2, 0.3], Shape::vector(3))],
            1e-10,
        )
        .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.scalar(0.0);
        let y = tape.abs(x);
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g[0][0], 0.0);
    }
}
