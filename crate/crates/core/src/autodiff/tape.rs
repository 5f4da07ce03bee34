//! Reverse-mode tape over dense tensors.
//!
//! Every operator appends one node holding its forward value. Nodes are
//! stored in creation order, which is a topological order of the forward
//! computation, so [`Tape::backward`] is a single reverse sweep.

use rand::Rng;

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{matmul, numel, split_axis, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        k: Var,
        b: Option<Var>,
        dilation: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    AddScalar(Var),
    Scale(Var, F),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Mean {
        x: Var,
        axis: usize,
    },
    Variance {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Summary of one backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose backward rule ran. Each runs at most once.
    pub nodes_visited: usize,
}

/// Recording of one forward computation.
///
/// A tape supports exactly one backward sweep; a second call is rejected
/// with [`Error::BackwardTwice`].
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the backward output with respect to `v`, if `v` took part
    /// in the backward sweep.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Smallest `|x|` over the inputs of every relu recorded so far; `None`
    /// without relus. Perturbations smaller than this cross no kink.
    pub fn relu_margin(&self) -> Option<F> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| v.abs()))
            .reduce(F::min)
    }

    // ----------------------------------------------------------------- ops

    /// `x[.., Din] * w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} does not match output width {dout}", self.shape(b)),
                ));
            }
        }
        let rows = numel(&xs) / din;
        let mut out = vec![F::zero(); rows * dout];
        matmul(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            din,
            dout,
            false,
            false,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched product of `a[B, M, K]` with `b[B, K, N]` (or `b[B, N, K]`
    /// when `trans_b`). Rank-2 operands are treated as `B = 1`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad());
        }
        let (batch, m, k) = dims3(&sa);
        let (batch_b, r, c) = dims3(&sb);
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if batch != batch_b || k != kb {
            return Err(bad());
        }
        let mut out = vec![F::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    /// Causal dilated 1-D convolution over `x[B, T, Cin]` (or `x[T, Cin]`)
    /// with kernel `k[taps, Cin, Cout]`.
    ///
    /// `(taps - 1) * dilation` zero steps are padded on the left, so the
    /// output has `T` steps and step `t` sees only inputs `t - (taps-1)*d ..= t`.
    pub fn conv1d_causal(&mut self, x: Var, k: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::invalid("conv1d_causal", "dilation must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (batch, steps, cin) = match xs.len() {
            2 => (1, xs[0], xs[1]),
            3 => (xs[0], xs[1], xs[2]),
            _ => return Err(Error::shape("conv1d_causal", format!("input {xs:?} is not [B,T,C]"))),
        };
        if ks.len() != 3 || ks[1] != cin {
            return Err(Error::shape(
                "conv1d_causal",
                format!("kernel {ks:?} incompatible with input {xs:?}"),
            ));
        }
        let (taps, cout) = (ks[0], ks[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d_causal", "bias width mismatch"));
            }
        }
        let geom = kernels::Conv1dGeom {
            batch,
            steps,
            cin,
            cout,
            taps,
            dilation,
        };
        let out = kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, k, b, dilation }, rg))
    }

    /// 2-D cross-correlation of `x[N, C, H, W]` with `k[Cout, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks:?} incompatible with input {xs:?}"),
            ));
        }
        let (h, w) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ks[2] > h || ks[3] > w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {h}x{w}", ks[2], ks[3]),
            ));
        }
        let geom = kernels::Conv2dGeom {
            images: xs[0],
            cin: xs[1],
            height: xs[2],
            width: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv2d", "bias width mismatch"));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.images, geom.cout, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(F::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.tanh()).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] = out[idx(l)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Elementwise binary operator with size-1 broadcasting between operands
    /// of equal rank.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape("binary", format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let n = numel(&out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let ma = broadcast_map(&out_shape, &sa);
        let mb = broadcast_map(&out_shape, &sb);
        let f = |x: F, y: F| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<F> = (0..n).map(|i| f(av[map_at(&ma, i)], bv[map_at(&mb, i)])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a + c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let src = self.value(x).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Mean along `axis`, keeping the axis with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce(x, axis, "mean", |vals| {
            let n = F::from_usize(vals.len()).unwrap();
            vals.iter().copied().sum::<F>() / n
        })?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, axis }, rg))
    }

    /// Population variance (1/N) along `axis`, keeping the axis with extent 1.
    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce(x, axis, "variance", |vals| {
            let n = F::from_usize(vals.len()).unwrap();
            let mu = vals.iter().copied().sum::<F>() / n;
            vals.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n
        })?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Variance { x, axis }, rg))
    }

    fn reduce(&self, x: Var, axis: usize, op: &'static str, f: impl Fn(&[F]) -> F) -> Result<(Vec<usize>, Vec<F>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![F::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, slot) in buf.iter_mut().enumerate() {
                    *slot = src[(o * len + l) * inner + i];
                }
                out.push(f(&buf));
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = 1;
        Ok((new_shape, out))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Selects rows along the leading axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = numel(&shape[1..]);
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {shape:?}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `p == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let v = self.value(x);
        let mask: Vec<F> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    // ------------------------------------------------------------ backward

    /// Propagates d(output)/d(node) to every node that requires gradients.
    ///
    /// `output` must hold exactly one element.
    pub fn backward(&mut self, output: Var) -> Result<BackwardStats> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![F::one()]);
        let mut visited = 0;
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                visited += 1;
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(BackwardStats { nodes_visited: visited })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (din, dout) = (shp(*w)[0], shp(*w)[1]);
                let rows = g.len() / dout;
                if let Some(dx) = slot(grads, nodes, *x) {
                    matmul(g, val(*w), dx, rows, dout, din, false, true, true);
                }
                if let Some(dw) = slot(grads, nodes, *w) {
                    matmul(val(*x), g, dw, din, rows, dout, true, false, true);
                }
                if let Some(b) = b {
                    if let Some(db) = slot(grads, nodes, *b) {
                        for row in g.chunks_exact(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &gg)| *d += gg);
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (batch, m, k) = dims3(shp(*a));
                let n = *out.shape().last().unwrap();
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = slot(grads, nodes, *a) {
                    for bi in 0..batch {
                        matmul(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !trans_b,
                            true,
                        );
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let dbs = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // db[N,K] += g^T[N,M] a[M,K]
                            matmul(gs, as_, dbs, n, m, k, true, false, true);
                        } else {
                            // db[K,N] += a^T[K,M] g[M,N]
                            matmul(as_, gs, dbs, k, m, n, true, false, true);
                        }
                    }
                }
            }
            Op::Conv1d { x, k, b, dilation } => {
                let xs = shp(*x);
                let ks = shp(*k);
                let (batch, steps, cin) = if xs.len() == 2 {
                    (1, xs[0], xs[1])
                } else {
                    (xs[0], xs[1], xs[2])
                };
                let geom = kernels::Conv1dGeom {
                    batch,
                    steps,
                    cin,
                    cout: ks[2],
                    taps: ks[0],
                    dilation: *dilation,
                };
                if let Some(db) = b.and_then(|b| slot(grads, nodes, b)) {
                    for row in g.chunks_exact(geom.cout) {
                        db.iter_mut().zip(row).for_each(|(d, &gg)| *d += gg);
                    }
                }
                if let Some(dk) = slot(grads, nodes, *k) {
                    kernels::conv1d_backward_kernel(&geom, val(*x), g, dk);
                }
                if let Some(dx) = slot(grads, nodes, *x) {
                    kernels::conv1d_backward_input(&geom, val(*k), g, dx);
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            } => {
                let xs = shp(*x);
                let ks = shp(*k);
                let geom = kernels::Conv2dGeom {
                    images: xs[0],
                    cin: xs[1],
                    height: xs[2],
                    width: xs[3],
                    cout: ks[0],
                    kh: ks[2],
                    kw: ks[3],
                    stride: *stride,
                    padding: *padding,
                };
                if let Some(db) = b.and_then(|b| slot(grads, nodes, b)) {
                    let plane = geom.out_h() * geom.out_w();
                    for img in g.chunks_exact(geom.cout * plane) {
                        for (co, ch) in img.chunks_exact(plane).enumerate() {
                            db[co] += ch.iter().copied().sum::<F>();
                        }
                    }
                }
                let need_k = nodes[k.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                if need_k || need_x {
                    let mut dk = need_k.then(|| vec![F::zero(); ks.iter().product()]);
                    let mut dx = need_x.then(|| vec![F::zero(); xs.iter().product()]);
                    kernels::conv2d_backward(&geom, val(*x), val(*k), g, dk.as_deref_mut(), dx.as_deref_mut());
                    if let (Some(dk), Some(slot_k)) = (dk, slot(grads, nodes, *k)) {
                        slot_k.iter_mut().zip(dk).for_each(|(s, d)| *s += d);
                    }
                    if let (Some(dx), Some(slot_x)) = (dx, slot(grads, nodes, *x)) {
                        slot_x.iter_mut().zip(dx).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((d, &gg), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if y > F::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((d, &gg), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gg * (F::one() - y * y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + ii;
                            let dot: F = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                dx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let os = out.shape();
                let ma = broadcast_map(os, shp(*a));
                let mb = broadcast_map(os, shp(*b));
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = slot(grads, nodes, *a) {
                    for (idx, &gg) in g.iter().enumerate() {
                        let (ia, ib) = (map_at(&ma, idx), map_at(&mb, idx));
                        da[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gg,
                            BinaryKind::Mul => gg * bv[ib],
                            BinaryKind::Div => gg / bv[ib],
                        };
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for (idx, &gg) in g.iter().enumerate() {
                        let (ia, ib) = (map_at(&ma, idx), map_at(&mb, idx));
                        db[ib] += match kind {
                            BinaryKind::Add => gg,
                            BinaryKind::Sub => -gg,
                            BinaryKind::Mul => gg * av[ia],
                            BinaryKind::Div => -gg * av[ia] / (bv[ib] * bv[ib]),
                        };
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * *c);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = shp(x)[*axis];
                    if let Some(dx) = slot(grads, nodes, x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &gg)| *d += gg);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let len = out.shape()[*axis];
                let (outer, full, inner) = split_axis(shp(*x), *axis);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let dst = &mut dx[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let n = F::from_usize(len).unwrap();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let gg = g[o * inner + ii] / n;
                            for l in 0..len {
                                dx[(o * len + l) * inner + ii] += gg;
                            }
                        }
                    }
                }
            }
            Op::Variance { x, axis } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let n = F::from_usize(len).unwrap();
                let two = F::from_f64_lossy(2.0);
                let xv = val(*x);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + ii;
                            let mu = (0..len).map(|l| xv[idx(l)]).sum::<F>() / n;
                            let gg = g[o * inner + ii];
                            for l in 0..len {
                                dx[idx(l)] += gg * two * (xv[idx(l)] - mu) / n;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::GatherRows { x, rows } => {
                let width = numel(&shp(*x)[1..]);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (j, &r) in rows.iter().enumerate() {
                        let dst = &mut dx[r * width..(r + 1) * width];
                        let src = &g[j * width..(j + 1) * width];
                        dst.iter_mut().zip(src).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((d, &gg), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gg * m;
                    }
                }
            }
        }
    }
}

fn slot<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> Option<&'a mut [F]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    if s.len() == 2 {
        (1, s[0], s[1])
    } else {
        (s[0], s[1], s[2])
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each linear index of `out`, the linear index into a tensor of shape
/// `src` that broadcasts to it. `None` means identity.
fn broadcast_map(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn map_at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}
