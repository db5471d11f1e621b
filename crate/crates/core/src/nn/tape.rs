//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n, m] + [m]` broadcast over rows.
    AddRow(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    SumAll(Var),
    LogSoftmax(Var),
    /// Weighted sum of selected `(row, col)` entries of a matrix.
    PickSum(Var, Vec<(usize, usize, f64)>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Conv2d(ConvArgs),
    ConvTranspose2d(ConvArgs),
}

#[derive(Debug, Clone, Copy)]
struct ConvArgs {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so gradients can be propagated back to its leaves.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that requires them.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn mat(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("operand must be a matrix")
}

fn dyn2(a: Array2<f64>) -> Tensor {
    a.into_dyn()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output spatial size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `[c, h, w]` image into `[c*k*k, oh*ow]` patch columns.
fn im2col(
    img: ndarray::ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = img.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let y = (oy * stride + ki) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * stride + kj) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = img[[ci, y as usize, x as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto a `[c, h, w]` image.
fn col2im(
    cols: ArrayView2<'_, f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut img = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = cols.row(row);
                for oy in 0..oh {
                    let y = (oy * stride + ki) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * stride + kj) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        img[[ci, y as usize, x as usize]] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    img
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a zero-dimensional or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input; its gradient is available after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = (&mat(self.value(a)) + &self.value(bias).view()).into_dyn();
        let rg = self.rg(a) || self.rg(bias);
        self.push(v, Op::AddRow(a, bias), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let v = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) + s;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = dyn2(mat(self.value(a)).dot(&mat(self.value(b))));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = mat(self.value(a));
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(a);
        self.push(dyn2(out), Op::LogSoftmax(a), rg)
    }

    /// `Σ weight · a[row, col]` over the given entries.
    pub fn pick_sum(&mut self, a: Var, picks: Vec<(usize, usize, f64)>) -> Var {
        let x = mat(self.value(a));
        let total: f64 = picks.iter().map(|&(r, c, w)| w * x[[r, c]]).sum();
        let rg = self.rg(a);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            Op::PickSum(a, picks),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| mat(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(dyn2(v), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = mat(self.value(a)).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(dyn2(v), Op::SliceCols(a, start, end), rg)
    }

    /// Selects rows of a `[vocab, dim]` table.
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = mat(self.value(table));
        let v = t.select(Axis(0), &rows);
        let rg = self.rg(table);
        self.push(dyn2(v), Op::Gather(table, rows), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Strided 2-D convolution. `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = dims4(xv);
        let (o, wc, k, _) = dims4(wv);
        assert_eq!(c, wc, "conv2d channel mismatch");
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(wd, k, stride, pad);
        let w2 = wv
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous kernel");
        let bv = self.value(b);
        let mut out = ndarray::Array4::<f64>::zeros((n, o, oh, ow));
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for i in 0..n {
            let cols = im2col(x4.index_axis(Axis(0), i), k, stride, pad, oh, ow);
            let y = w2.dot(&cols);
            let mut dst = out.index_axis_mut(Axis(0), i);
            for oc in 0..o {
                let bias = bv[[oc]];
                let src = y.row(oc);
                let mut plane = dst.index_axis_mut(Axis(0), oc);
                for (d, &s) in plane.iter_mut().zip(src.iter()) {
                    *d = s + bias;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let args = ConvArgs {
            x,
            w,
            b,
            stride,
            pad,
        };
        self.push(out.into_dyn(), Op::Conv2d(args), rg)
    }

    /// Transposed convolution, the adjoint geometry of [`Tape::conv2d`].
    ///
    /// `x: [n, c, h, w]`, `w: [c, o, k, k]`, `b: [o]`. The output size is
    /// `(h - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: (usize, usize),
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = dims4(xv);
        let (wc, o, k, _) = dims4(wv);
        assert_eq!(c, wc, "conv_transpose2d channel mismatch");
        let oh = (h - 1) * stride + k + out_pad.0 - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad.1 - 2 * pad;
        debug_assert_eq!(conv_out_size(oh, k, stride, pad), h);
        debug_assert_eq!(conv_out_size(ow, k, stride, pad), wd);
        let w2 = wv
            .view()
            .into_shape_with_order((c, o * k * k))
            .expect("contiguous kernel");
        let bv = self.value(b);
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = ndarray::Array4::<f64>::zeros((n, o, oh, ow));
        for i in 0..n {
            let xi = x4
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((c, h * wd))
                .unwrap();
            let cols = w2.t().dot(&xi);
            let img = col2im(cols.view(), o, oh, ow, k, stride, pad);
            let mut dst = out.index_axis_mut(Axis(0), i);
            dst.assign(&img);
            for oc in 0..o {
                let bias = bv[[oc]];
                dst.index_axis_mut(Axis(0), oc).mapv_inplace(|v| v + bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let args = ConvArgs {
            x,
            w,
            b,
            stride,
            pad,
        };
        self.push(out.into_dyn(), Op::ConvTranspose2d(args), rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                acc(*bias, mat(g).sum_axis(Axis(0)).into_dyn());
            }
            Op::MulConst(a, c) => acc(*a, g * c),
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let gm = mat(g);
                if self.rg(*a) {
                    acc(*a, dyn2(gm.dot(&mat(self.value(*b)).t())));
                }
                if self.rg(*b) {
                    acc(*b, dyn2(mat(self.value(*a)).t().dot(&gm)));
                }
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(out, |d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(out, |d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * out),
            Op::Square(a) => acc(*a, g * &self.value(*a).mapv(|x| 2.0 * x)),
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                acc(*a, ArrayD::from_elem(self.value(*a).raw_dim(), gs));
            }
            Op::LogSoftmax(a) => {
                // d x = g - softmax * rowsum(g)
                let gm = mat(g);
                let y = mat(out);
                let mut d = gm.to_owned();
                for (mut drow, (grow, yrow)) in d
                    .rows_mut()
                    .into_iter()
                    .zip(gm.rows().into_iter().zip(y.rows()))
                {
                    let total = grow.sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *dv -= yv.exp() * total;
                    }
                }
                acc(*a, dyn2(d));
            }
            Op::PickSum(a, picks) => {
                let gs = *g.iter().next().unwrap();
                let mut d = Tensor::zeros(self.value(*a).raw_dim());
                for &(r, c, w) in picks {
                    d[[r, c]] += gs * w;
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let gm = mat(g);
                let mut start = 0;
                for &p in parts {
                    let width = self.value(p).shape()[1];
                    acc(p, dyn2(gm.slice(s![.., start..start + width]).to_owned()));
                    start += width;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::<f64>::zeros(mat(self.value(*a)).raw_dim());
                d.slice_mut(s![.., *start..*end]).assign(&mat(g));
                acc(*a, dyn2(d));
            }
            Op::Gather(table, rows) => {
                let gm = mat(g);
                let mut d = Array2::<f64>::zeros(mat(self.value(*table)).raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &gm.row(i);
                }
                acc(*table, dyn2(d));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let d = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .unwrap();
                acc(*a, d);
            }
            Op::Conv2d(args) => {
                let (dx, dw, db) = self.conv2d_backward(args, g);
                acc(args.x, dx);
                acc(args.w, dw);
                acc(args.b, db);
            }
            Op::ConvTranspose2d(args) => {
                let (dx, dw, db) = self.conv_transpose2d_backward(args, g);
                acc(args.x, dx);
                acc(args.w, dw);
                acc(args.b, db);
            }
        }
    }

    fn conv2d_backward(&self, args: &ConvArgs, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let xv = self.value(args.x);
        let wv = self.value(args.w);
        let (n, c, h, wd) = dims4(xv);
        let (o, _, k, _) = dims4(wv);
        let (_, _, oh, ow) = dims4(g);
        let w2 = wv.view().into_shape_with_order((o, c * k * k)).unwrap();
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, wd));
        let mut dw = Array2::<f64>::zeros((o, c * k * k));
        let mut db = ndarray::Array1::<f64>::zeros(o);
        for i in 0..n {
            let gi = g4
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((o, oh * ow))
                .unwrap();
            db += &gi.sum_axis(Axis(1));
            if self.rg(args.w) {
                let cols = im2col(x4.index_axis(Axis(0), i), k, args.stride, args.pad, oh, ow);
                dw += &gi.dot(&cols.t());
            }
            if self.rg(args.x) {
                let dcols = w2.t().dot(&gi);
                let img = col2im(dcols.view(), c, h, wd, k, args.stride, args.pad);
                dx.index_axis_mut(Axis(0), i).assign(&img);
            }
        }
        (
            dx.into_dyn(),
            dw.into_shape_with_order(IxDyn(&[o, c, k, k]))
                .unwrap(),
            db.into_dyn(),
        )
    }

    fn conv_transpose2d_backward(&self, args: &ConvArgs, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let xv = self.value(args.x);
        let wv = self.value(args.w);
        let (n, c, h, wd) = dims4(xv);
        let (_, o, k, _) = dims4(wv);
        let w2 = wv.view().into_shape_with_order((c, o * k * k)).unwrap();
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, wd));
        let mut dw = Array2::<f64>::zeros((c, o * k * k));
        let mut db = ndarray::Array1::<f64>::zeros(o);
        for i in 0..n {
            let gi = g4.index_axis(Axis(0), i);
            for oc in 0..o {
                db[oc] += gi.index_axis(Axis(0), oc).sum();
            }
            let dcols = im2col(gi, k, args.stride, args.pad, h, wd);
            if self.rg(args.x) {
                let dxi = w2.dot(&dcols);
                dx.index_axis_mut(Axis(0), i)
                    .assign(&dxi.into_shape_with_order((c, h, wd)).unwrap());
            }
            if self.rg(args.w) {
                let xi = x4
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((c, h * wd))
                    .unwrap();
                dw += &xi.dot(&dcols.t());
            }
        }
        (
            dx.into_dyn(),
            dw.into_shape_with_order(IxDyn(&[c, o, k, k]))
                .unwrap(),
            db.into_dyn(),
        )
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            out.as_slice_mut().unwrap()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    fn ramp(shape: &[usize], offset: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|i| (i as f64 * 0.37 + offset).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_softmax_pick_gradient() {
        let a0 = ramp(&[3, 4], 0.1);
        let b0 = ramp(&[4, 5], 0.7);
        let f = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let a = t.param(a.clone());
            let b = t.param(b.clone());
            let m = t.matmul(a, b);
            let th = t.tanh(m);
            let ls = t.log_softmax(th);
            let out = t.pick_sum(ls, vec![(0, 1, -1.0), (2, 4, -0.5), (1, 1, -2.0)]);
            (t, out, a, b)
        };
        let (t, out, a, b) = f(&a0, &b0);
        let grads = t.backward(out);
        let na = numeric_grad(&a0, |x| {
            let (t, o, ..) = f(x, &b0);
            t.scalar(o)
        });
        let nb = numeric_grad(&b0, |x| {
            let (t, o, ..) = f(&a0, x);
            t.scalar(o)
        });
        assert_close(grads.get(a).unwrap(), &na, 1e-6);
        assert_close(grads.get(b).unwrap(), &nb, 1e-6);
    }

    #[test]
    fn conv_and_transpose_gradients() {
        let x0 = ramp(&[2, 2, 5, 6], 0.3);
        let w0 = ramp(&[3, 2, 3, 3], 1.1);
        let b0 = ramp(&[3], 2.0);
        let wt0 = ramp(&[3, 2, 3, 3], 0.5);
        let bt0 = ramp(&[2], 0.9);
        let run = |x: &Tensor, w: &Tensor, b: &Tensor, wt: &Tensor, bt: &Tensor| {
            let mut t = Tape::new();
            let vars = [
                t.param(x.clone()),
                t.param(w.clone()),
                t.param(b.clone()),
                t.param(wt.clone()),
                t.param(bt.clone()),
            ];
            let h = t.conv2d(vars[0], vars[1], vars[2], 2, 1);
            assert_eq!(t.value(h).shape(), &[2, 3, 3, 3]);
            let h = t.leaky_relu(h, 0.1);
            let y = t.conv_transpose2d(h, vars[3], vars[4], 2, 1, (0, 1));
            assert_eq!(t.value(y).shape(), &[2, 2, 5, 6]);
            let y = t.sigmoid(y);
            let sq = t.square(y);
            let out = t.sum(sq);
            (t, out, vars)
        };
        let (t, out, vars) = run(&x0, &w0, &b0, &wt0, &bt0);
        let grads = t.backward(out);
        let inputs = [&x0, &w0, &b0, &wt0, &bt0];
        for (slot, var) in vars.iter().enumerate() {
            let numeric = numeric_grad(inputs[slot], |perturbed| {
                let mut args = inputs.map(|t| t.clone());
                args[slot] = perturbed.clone();
                let (t, o, _) = run(&args[0], &args[1], &args[2], &args[3], &args[4]);
                t.scalar(o)
            });
            assert_close(grads.get(*var).unwrap(), &numeric, 1e-6);
        }
    }

    #[test]
    fn structural_ops_gradients() {
        let a0 = ramp(&[2, 3], 0.2);
        let e0 = ramp(&[4, 3], 0.8);
        let bias0 = ramp(&[5], 0.4);
        let run = |a: &Tensor, e: &Tensor, bias: &Tensor| {
            let mut t = Tape::new();
            let a = t.param(a.clone());
            let e = t.param(e.clone());
            let bias = t.param(bias.clone());
            let rows = t.gather(e, vec![3, 1]);
            let cat = t.concat_cols(&[a, rows]);
            let sl = t.slice_cols(cat, 1, 6);
            let r = t.add_row(sl, bias);
            let ex = t.exp(r);
            let m = t.mul(ex, r);
            let masked = t.mul_const(m, array![[1.0, 0.0, 1.0, 1.0, 0.5], [0.0, 1.0, 1.0, 1.0, 1.0]].into_dyn());
            let flat = t.reshape(masked, &[10]);
            let sc = t.scale(flat, 0.3);
            let shifted = t.add_scalar(sc, -1.0);
            let d = t.sub(shifted, flat);
            let sq = t.square(d);
            let out = t.sum(sq);
            (t, out, [a, e, bias])
        };
        let (t, out, vars) = run(&a0, &e0, &bias0);
        let grads = t.backward(out);
        let inputs = [&a0, &e0, &bias0];
        for (slot, var) in vars.iter().enumerate() {
            let numeric = numeric_grad(inputs[slot], |p| {
                let mut args = inputs.map(|t| t.clone());
                args[slot] = p.clone();
                let (t, o, _) = run(&args[0], &args[1], &args[2]);
                t.scalar(o)
            });
            assert_close(grads.get(*var).unwrap(), &numeric, 1e-6);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![1.0, 2.0].into_dyn());
        let p = t.param(array![3.0, 4.0].into_dyn());
        let m = t.mul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![1.0, 2.0].into_dyn());
    }
}
