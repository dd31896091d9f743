//! Reverse-mode gradient tape.
//!
//! Every op appends a node whose parents already live on the tape, so node
//! order is a topological order and backward is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel, stride and zero padding of a convolution, ordered depth, height,
/// width. 2-D convolutions use depth 1 / stride 1 / pad 0 on the first axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn cube(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    fn out_extent(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulCol { x: Var, m: Var },
    Affine { x: Var, scale: T },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Abs { x: Var },
    Square { x: Var },
    Mse { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    RowSum { x: Var },
    RowNorm { x: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, end: usize },
    Reshape { x: Var },
    RepeatRows { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    spec: ConvSpec,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.spec.kernel.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds entry of the
    /// im2col matrix.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kd, kh, kw] = self.spec.kernel;
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        for c in 0..self.cin {
            for z in 0..kd {
                for y in 0..kh {
                    for x in 0..kw {
                        let row = ((c * kd + z) * kh + y) * kw + x;
                        for oz in 0..od {
                            let iz = (oz * self.spec.stride[0] + z) as isize - self.spec.pad[0] as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * self.spec.stride[1] + y) as isize - self.spec.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = ((c * d + iz as usize) * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = (ox * self.spec.stride[2] + x) as isize
                                        - self.spec.pad[2] as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let col = (oz * oh + oy) * ow + ox;
                                    f(row, col, base + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn as_matrix(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a 2-D operand, got {s:?}"),
        }),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Detached leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// `op(a) · op(b)` for 2-D operands, where `op` transposes when requested.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = as_matrix("matmul", self.value(a))?;
        let (br, bc) = as_matrix("matmul", self.value(b))?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Adds a bias vector (length = columns) to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(b).len() != cols {
            return Err(mismatch("add_bias", xv.shape(), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::AddBias { x, b }, &[x, b]))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let av = self.value(a);
        let bv = self.value(b);
        av.same_shape(bv, op)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(v, Op::Mul { a, b }, &[a, b]))
    }

    /// Scales row `i` of `x` by `m[i]`; `m` has one element per row.
    pub fn mul_col(&mut self, x: Var, m: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mv = self.value(m);
        if mv.len() != rows {
            return Err(mismatch("mul_col", xv.shape(), mv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(cols).zip(mv.data()) {
            row.iter_mut().for_each(|o| *o = *o * s);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::MulCol { x, m }, &[x, m]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push_op(v, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { slope * e });
        self.push_op(v, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| T::one() / (T::one() + (-e).exp()));
        self.push_op(v, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        self.push_op(v, Op::Tanh { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        self.push_op(v, Op::Abs { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push_op(v, Op::Square { x }, &[x])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.same_shape(bv, "mse")?;
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        Ok(self.push_op(Tensor::scalar(s / n), Op::Mse { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &e| acc + e);
        self.push_op(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.len().max(1)).unwrap();
        let s = xv.data().iter().fold(T::zero(), |acc, &e| acc + e);
        self.push_op(Tensor::scalar(s / n), Op::Mean { x }, &[x])
    }

    /// Sum over the last axis; `rows x cols -> rows x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let data: Vec<T> = xv
            .data()
            .chunks(cols)
            .map(|r| r.iter().fold(T::zero(), |acc, &e| acc + e))
            .collect();
        let n = data.len();
        self.push_op(Tensor::new(vec![n, 1], data).unwrap(), Op::RowSum { x }, &[x])
    }

    /// Euclidean norm of every row; `rows x cols -> rows x 1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let data: Vec<T> = xv
            .data()
            .chunks(cols)
            .map(|r| r.iter().fold(T::zero(), |acc, &e| acc + e * e).sqrt())
            .collect();
        let n = data.len();
        self.push_op(Tensor::new(vec![n, 1], data).unwrap(), Op::RowNorm { x }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                msg: "no operands".into(),
            });
        };
        let rows = as_matrix("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix("concat_cols", self.value(p))?;
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push_op(value, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("slice_cols", self.value(x))?;
        if start > end || end > cols {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let value = Tensor::new(vec![rows, end - start], out)?;
        Ok(self.push_op(value, Op::SliceCols { x, start, end }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(v, Op::Reshape { x }, &[x]))
    }

    /// Tiles a single row `n` times: `1 x c -> n x c`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "repeat_rows",
                msg: format!("expected one row, got shape {:?}", xv.shape()),
            });
        }
        let c = xv.len();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(xv.data());
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push_op(value, Op::RepeatRows { x }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("row {i} out of {rows}"),
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push_op(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// 2-D convolution: input `[cin, h, w]`, weight `[cout, cin, kh, kw]`,
    /// bias `[cout]`, output `[cout, oh, ow]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || xs.len() != 3 || ws[2] != ws[3] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        self.conv(x, w, b, ConvSpec::square(ws[2], stride, pad), "conv2d")
    }

    /// 3-D convolution: input `[cin, d, h, w]`, weight `[cout, cin, k, k, k]`,
    /// bias `[cout]`, output `[cout, od, oh, ow]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 5 || xs.len() != 4 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(mismatch("conv3d", &xs, &ws));
        }
        self.conv(x, w, b, ConvSpec::cube(ws[2], stride, pad), "conv3d")
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec, op: &'static str) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let two_d = xs.len() == 3;
        let (cin, input) = if two_d {
            (xs[0], [1, xs[1], xs[2]])
        } else {
            (xs[0], [xs[1], xs[2], xs[3]])
        };
        let cout = ws[0];
        if ws[1] != cin {
            return Err(mismatch(op, &xs, &ws));
        }
        if self.value(b).len() != cout {
            return Err(mismatch(op, &ws, self.shape(b)));
        }
        let output = spec.out_extent(input).ok_or_else(|| TensorError::InvalidArgument {
            op,
            msg: format!("kernel {:?} does not fit input {:?}", spec.kernel, xs),
        })?;
        let geom = ConvGeom {
            spec,
            cin,
            cout,
            input,
            output,
        };
        let (k, p) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![T::zero(); k * p];
        let xd = self.value(x).data();
        geom.for_each_tap(|row, col, off| cols[row * p + col] = xd[off]);
        let mut out = vec![T::zero(); cout * p];
        T::gemm(cout, k, p, self.value(w).data(), false, &cols, false, &mut out, false);
        for (row, &bb) in out.chunks_mut(p).zip(self.value(b).data()) {
            row.iter_mut().for_each(|o| *o = *o + bb);
        }
        let shape = if two_d {
            vec![cout, output[1], output[2]]
        } else {
            vec![cout, output[0], output[1], output[2]]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Conv { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));
        }
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        // dA = op(B) · dCᵀ
                        T::gemm(k, n, m, self.value(b).data(), tb, gd, true, &mut da, false);
                    } else {
                        T::gemm(m, n, k, gd, false, self.value(b).data(), !tb, &mut da, false);
                    }
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        // dB = dCᵀ · op(A)
                        T::gemm(n, m, k, gd, true, self.value(a).data(), ta, &mut db, false);
                    } else {
                        T::gemm(k, m, n, self.value(a).data(), !ta, gd, false, &mut db, false);
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddBias { x, b } => {
                if self.requires_grad(x) {
                    self.accumulate(grads, x, gd.to_vec());
                }
                if self.requires_grad(b) {
                    let cols = out.cols();
                    let mut db = vec![T::zero(); cols];
                    for row in gd.chunks(cols) {
                        for (d, &e) in db.iter_mut().zip(row) {
                            *d = *d + e;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, gd.to_vec());
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, gd.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, gd.to_vec());
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, gd.iter().map(|&e| -e).collect());
                }
            }
            &Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).data();
                    self.accumulate(grads, a, gd.iter().zip(bv).map(|(&e, &y)| e * y).collect());
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data();
                    self.accumulate(grads, b, gd.iter().zip(av).map(|(&e, &y)| e * y).collect());
                }
            }
            &Op::MulCol { x, m } => {
                let cols = out.cols();
                let mv = self.value(m).data();
                if self.requires_grad(x) {
                    let mut dx = gd.to_vec();
                    for (row, &s) in dx.chunks_mut(cols).zip(mv) {
                        row.iter_mut().for_each(|e| *e = *e * s);
                    }
                    self.accumulate(grads, x, dx);
                }
                if self.requires_grad(m) {
                    let xv = self.value(x).data();
                    let dm = gd
                        .chunks(cols)
                        .zip(xv.chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
                        .collect();
                    self.accumulate(grads, m, dm);
                }
            }
            &Op::Affine { x, scale } => {
                self.accumulate(grads, x, gd.iter().map(|&e| e * scale).collect());
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&e, &v)| if v > T::zero() { e } else { e * slope })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Sigmoid { x } => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&e, &y)| e * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Tanh { x } => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&e, &y)| e * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Abs { x } => {
                let xv = self.value(x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&e, &v)| {
                        if v > T::zero() {
                            e
                        } else if v < T::zero() {
                            -e
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Square { x } => {
                let two = T::lit(2.0);
                let xv = self.value(x).data();
                self.accumulate(grads, x, gd.iter().zip(xv).map(|(&e, &v)| two * v * e).collect());
            }
            &Op::Mse { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let scale = T::lit(2.0) * gd[0] / T::from_usize(av.len().max(1)).unwrap();
                let diff: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| scale * (x - y)).collect();
                if self.requires_grad(b) {
                    self.accumulate(grads, b, diff.iter().map(|&e| -e).collect());
                }
                if self.requires_grad(a) {
                    self.accumulate(grads, a, diff);
                }
            }
            &Op::Sum { x } => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![gd[0]; n]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).len();
                let e = gd[0] / T::from_usize(n.max(1)).unwrap();
                self.accumulate(grads, x, vec![e; n]);
            }
            &Op::RowSum { x } => {
                let cols = self.value(x).cols();
                let dx = gd.iter().flat_map(|&e| std::iter::repeat(e).take(cols)).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::RowNorm { x } => {
                let xv = self.value(x);
                let cols = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for ((row, &nrm), &e) in xv.data().chunks(cols).zip(out.data()).zip(gd) {
                    if nrm > T::zero() {
                        dx.extend(row.iter().map(|&v| e * v / nrm));
                    } else {
                        dx.extend(std::iter::repeat(T::zero()).take(cols));
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let dp = gd
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { x, start, end } => {
                let xv = self.value(x);
                let cols = xv.cols();
                let w = end - start;
                let mut dx = vec![T::zero(); xv.len()];
                for (drow, grow) in dx.chunks_mut(cols).zip(gd.chunks(w)) {
                    drow[start..end].copy_from_slice(grow);
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, gd.to_vec());
            }
            &Op::RepeatRows { x } => {
                let c = self.value(x).len();
                let mut dx = vec![T::zero(); c];
                for row in gd.chunks(c) {
                    for (d, &e) in dx.iter_mut().zip(row) {
                        *d = *d + e;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for (grow, &i) in gd.chunks(cols).zip(idx) {
                    for (d, &e) in dx[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                        *d = *d + e;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv { x, w, b, geom, cols } => {
                let (k, p, cout) = (geom.patch_len(), geom.out_len(), geom.cout);
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); cout * k];
                    T::gemm(cout, p, k, gd, false, cols, true, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*b) {
                    let db = gd
                        .chunks(p)
                        .map(|r| r.iter().fold(T::zero(), |acc, &e| acc + e))
                        .collect();
                    self.accumulate(grads, *b, db);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(k, cout, p, self.value(*w).data(), true, gd, false, &mut dcols, false);
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    geom.for_each_tap(|row, col, off| dx[off] = dx[off] + dcols[row * p + col]);
                    self.accumulate(grads, *x, dx);
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contribution: Vec<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient matches value shape"));
            }
        }
    }
}
