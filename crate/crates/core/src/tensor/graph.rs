use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, broadcast_index, broadcast_shape, strides, ConvGeom};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Abs,
    Square,
    Log,
    Exp,
    /// `x^p` for a fixed scalar exponent.
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `geom` is the forward convolution whose adjoint this op computes:
    /// it maps the (large) output grid onto the (small) input grid.
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool3d {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it
/// and a single reverse sweep in [`Graph::backward`] visits them
/// topologically.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.get(v)?.to_vec();
        Tensor::new(self.shapes[v.0].clone(), data).ok()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, len, inner) split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Stop-gradient: a constant holding `v`'s current value.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push((*value).clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ----------------------------------------------------------------------
    // elementwise
    // ----------------------------------------------------------------------

    pub fn unary(&self, x: Var, kind: UnaryKind) -> Var {
        let xv = self.value(x);
        let f: Box<dyn Fn(T) -> T> = match kind {
            UnaryKind::Relu => Box::new(|v: T| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::LeakyRelu(s) => {
                let s = T::lit(s);
                Box::new(move |v: T| if v > T::zero() { v } else { v * s })
            }
            UnaryKind::Tanh => Box::new(|v: T| v.tanh()),
            UnaryKind::Sigmoid => Box::new(|v: T| T::one() / (T::one() + (-v).exp())),
            UnaryKind::Abs => Box::new(|v: T| v.abs()),
            UnaryKind::Square => Box::new(|v: T| v * v),
            UnaryKind::Log => Box::new(|v: T| v.ln()),
            UnaryKind::Exp => Box::new(|v: T| v.exp()),
            UnaryKind::Pow(p) => {
                let p = T::lit(p);
                Box::new(move |v: T| v.powf(p))
            }
            UnaryKind::Scale(c) => {
                let c = T::lit(c);
                Box::new(move |v: T| v * c)
            }
            UnaryKind::AddScalar(c) => {
                let c = T::lit(c);
                Box::new(move |v: T| v + c)
            }
        };
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push(out, Op::Unary { x, kind }, self.rg(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }
    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, UnaryKind::LeakyRelu(slope))
    }
    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs)
    }
    pub fn square(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }
    pub fn log(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }
    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn powf(&self, x: Var, p: f64) -> Var {
        self.unary(x, UnaryKind::Pow(p))
    }
    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::Scale(c))
    }
    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::AddScalar(c))
    }

    pub fn binary(&self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out = if av.shape() == bv.shape() {
            Tensor {
                shape: av.shape().to_vec(),
                data: av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            }
        } else {
            let shape = broadcast_shape(av.shape(), bv.shape())?;
            let ia = broadcast_index(&shape, av.shape());
            let ib = broadcast_index(&shape, bv.shape());
            let data = ia
                .iter()
                .zip(&ib)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect();
            Tensor { shape, data }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    // ----------------------------------------------------------------------
    // dense maps
    // ----------------------------------------------------------------------

    /// `x[.., in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 {
            return Err(shape_err!("linear weight must be rank 2, got {:?}", wv.shape()));
        }
        let (out_f, in_f) = (wv.shape()[0], wv.shape()[1]);
        let last = *xv.shape().last().unwrap();
        if last != in_f {
            return Err(shape_err!(
                "linear expects input feature size {in_f}, got shape {:?}",
                xv.shape()
            ));
        }
        let rows = xv.numel() / in_f;
        let mut data = vec![T::zero(); rows * out_f];
        kernels::gemm_nt(rows, in_f, out_f, xv.data(), wv.data(), &mut data);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != out_f {
                return Err(shape_err!(
                    "linear bias has {} elements, expected {out_f}",
                    bv.numel()
                ));
            }
            for row in data.chunks_mut(out_f) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data }, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product over identical leading dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ar, br) = (av.rank(), bv.rank());
        if ar < 2 || ar != br || av.shape()[..ar - 2] != bv.shape()[..br - 2] {
            return Err(shape_err!(
                "matmul needs equal batch dimensions, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (m, k) = (av.shape()[ar - 2], av.shape()[ar - 1]);
        let (k2, n) = (bv.shape()[br - 2], bv.shape()[br - 1]);
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let batch = numel(&av.shape()[..ar - 2]);
        let mut data = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            kernels::gemm_nn(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = av.shape().to_vec();
        shape[ar - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::MatMul { a, b }, rg))
    }

    // ----------------------------------------------------------------------
    // volumetric
    // ----------------------------------------------------------------------

    fn check_volume(&self, shape: &[usize], what: &str) -> Result<()> {
        if shape.len() != 5 {
            return Err(shape_err!("{what} expects [N,C,D,H,W], got {shape:?}"));
        }
        Ok(())
    }

    fn check_bias(&self, b: Option<Var>, n: usize) -> Result<()> {
        if let Some(b) = b {
            let len = self.value(b).numel();
            if len != n {
                return Err(shape_err!("bias has {len} elements, expected {n}"));
            }
        }
        Ok(())
    }

    /// 3-D cross-correlation with symmetric zero padding.
    pub fn conv3d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        self.check_volume(xv.shape(), "conv3d input")?;
        self.check_volume(wv.shape(), "conv3d kernel")?;
        let [n, c, d, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3], xv.shape()[4]];
        let f = wv.shape()[0];
        if wv.shape()[1] != c {
            return Err(shape_err!(
                "conv3d kernel expects {} input channels, input has {c}",
                wv.shape()[1]
            ));
        }
        self.check_bias(b, f)?;
        let geom = ConvGeom::new(c, [d, h, wd], [wv.shape()[2], wv.shape()[3], wv.shape()[4]], stride, pad)?;
        let (patch, p) = (geom.patch_len(), geom.positions());
        let mut cols = vec![T::zero(); patch * p];
        let mut data = vec![T::zero(); n * f * p];
        let bv = b.map(|b| self.value(b));
        for i in 0..n {
            geom.im2col(&xv.data()[i * geom.input_len()..(i + 1) * geom.input_len()], &mut cols);
            let out = &mut data[i * f * p..(i + 1) * f * p];
            if let Some(bv) = &bv {
                for (row, &bb) in out.chunks_mut(p).zip(bv.data()) {
                    row.fill(bb);
                }
            }
            kernels::gemm_nn(f, patch, p, wv.data(), &cols, out);
        }
        let shape = vec![n, f, geom.output[0], geom.output[1], geom.output[2]];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data }, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Transposed 3-D convolution; kernel layout `[C_in, C_out, kd, kh, kw]`.
    /// Output extent per axis is `(in − 1)·stride − 2·pad + k + output_pad`.
    pub fn conv_transpose3d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        self.check_volume(xv.shape(), "conv_transpose3d input")?;
        self.check_volume(wv.shape(), "conv_transpose3d kernel")?;
        if stride == 0 || output_pad >= stride {
            return Err(shape_err!(
                "conv_transpose3d needs stride ≥ 1 and output_pad < stride (stride {stride}, output_pad {output_pad})"
            ));
        }
        let (n, cin) = (xv.shape()[0], xv.shape()[1]);
        if wv.shape()[0] != cin {
            return Err(shape_err!(
                "conv_transpose3d kernel expects {} input channels, input has {cin}",
                wv.shape()[0]
            ));
        }
        let cout = wv.shape()[1];
        self.check_bias(b, cout)?;
        let kernel = [wv.shape()[2], wv.shape()[3], wv.shape()[4]];
        let mut big = [0; 3];
        for a in 0..3 {
            let grown = (xv.shape()[2 + a] - 1) * stride + kernel[a] + output_pad;
            if grown <= 2 * pad {
                return Err(shape_err!("conv_transpose3d padding {pad} consumes the whole output"));
            }
            big[a] = grown - 2 * pad;
        }
        let geom = ConvGeom::new(cout, big, kernel, stride, pad)?;
        let small = [xv.shape()[2], xv.shape()[3], xv.shape()[4]];
        if geom.output != small {
            return Err(shape_err!("conv_transpose3d geometry does not invert: {geom:?}"));
        }
        let (patch, p) = (geom.patch_len(), geom.positions());
        let out_len = geom.input_len();
        let mut cols = vec![T::zero(); patch * p];
        let mut data = vec![T::zero(); n * out_len];
        let bv = b.map(|b| self.value(b));
        let vox = numel(&big);
        for i in 0..n {
            cols.fill(T::zero());
            kernels::gemm_tn(patch, cin, p, wv.data(), &xv.data()[i * cin * p..(i + 1) * cin * p], &mut cols);
            let out = &mut data[i * out_len..(i + 1) * out_len];
            geom.col2im(&cols, out);
            if let Some(bv) = &bv {
                for (chan, &bb) in out.chunks_mut(vox).zip(bv.data()) {
                    for o in chan {
                        *o += bb;
                    }
                }
            }
        }
        let shape = vec![n, cout, big[0], big[1], big[2]];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data }, Op::ConvTranspose3d { x, w, b, geom }, rg))
    }

    fn pool_geom(&self, shape: &[usize], kernel: usize, stride: usize) -> Result<[usize; 3]> {
        self.check_volume(shape, "pooling")?;
        if kernel == 0 || stride == 0 {
            return Err(shape_err!("pooling kernel and stride must be positive"));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            if shape[2 + a] < kernel {
                return Err(shape_err!("pooling kernel {kernel} exceeds input {shape:?}"));
            }
            out[a] = (shape[2 + a] - kernel) / stride + 1;
        }
        Ok(out)
    }

    pub fn max_pool3d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let o = self.pool_geom(xv.shape(), kernel, stride)?;
        let s = xv.shape();
        let (nc, [d, h, w]) = (s[0] * s[1], [s[2], s[3], s[4]]);
        let mut data = Vec::with_capacity(nc * numel(&o));
        let mut argmax = Vec::with_capacity(nc * numel(&o));
        for ch in 0..nc {
            let base = ch * d * h * w;
            for zd in 0..o[0] {
                for zh in 0..o[1] {
                    for zw in 0..o[2] {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for a in 0..kernel {
                            for b in 0..kernel {
                                for c in 0..kernel {
                                    let idx = base
                                        + ((zd * stride + a) * h + zh * stride + b) * w
                                        + zw * stride
                                        + c;
                                    if xv.data()[idx] > best {
                                        best = xv.data()[idx];
                                        at = idx;
                                    }
                                }
                            }
                        }
                        data.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let shape = vec![s[0], s[1], o[0], o[1], o[2]];
        Ok(self.push(Tensor { shape, data }, Op::MaxPool3d { x, argmax }, self.rg(x)))
    }

    pub fn avg_pool3d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let o = self.pool_geom(xv.shape(), kernel, stride)?;
        let s = xv.shape();
        let (nc, [d, h, w]) = (s[0] * s[1], [s[2], s[3], s[4]]);
        let norm = T::one() / T::lit((kernel * kernel * kernel) as f64);
        let mut data = Vec::with_capacity(nc * numel(&o));
        for ch in 0..nc {
            let base = ch * d * h * w;
            for zd in 0..o[0] {
                for zh in 0..o[1] {
                    for zw in 0..o[2] {
                        let mut acc = T::zero();
                        for a in 0..kernel {
                            for b in 0..kernel {
                                for c in 0..kernel {
                                    acc += xv.data()[base
                                        + ((zd * stride + a) * h + zh * stride + b) * w
                                        + zw * stride
                                        + c];
                                }
                            }
                        }
                        data.push(acc * norm);
                    }
                }
            }
        }
        let shape = vec![s[0], s[1], o[0], o[1], o[2]];
        Ok(self.push(Tensor { shape, data }, Op::AvgPool3d { x, kernel, stride }, self.rg(x)))
    }

    /// `[N, C, D, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        self.check_volume(xv.shape(), "global_avg_pool")?;
        let s = xv.shape();
        let vox = s[2] * s[3] * s[4];
        let inv = T::one() / T::lit(vox as f64);
        let data = xv
            .data()
            .chunks(vox)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let shape = vec![s[0], s[1]];
        Ok(self.push(Tensor { shape, data }, Op::GlobalAvgPool { x }, self.rg(x)))
    }

    // ----------------------------------------------------------------------
    // normalisation
    // ----------------------------------------------------------------------

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(src[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - m).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[at(j)] /= z;
                }
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x, axis }, self.rg(x)))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let n = *xv.shape().last().unwrap();
        if gv.numel() != n || bv.numel() != n {
            return Err(shape_err!(
                "layer_norm affine parameters must have {n} elements, got {} and {}",
                gv.numel(),
                bv.numel()
            ));
        }
        let inv_n = T::one() / T::lit(n as f64);
        let eps = T::lit(eps);
        let rows = xv.numel() / n;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                data[r * n + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------------------
    // structural
    // ----------------------------------------------------------------------

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let values: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat along {axis}: {s:?} incompatible with {base:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start >= end || end > xv.shape()[axis] {
            return Err(shape_err!(
                "slice {start}..{end} on axis {axis} invalid for {:?}",
                xv.shape()
            ));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&xv.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, self.rg(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", xv.shape()));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: xv.data().to_vec(),
        };
        Ok(self.push(out, Op::Reshape { x }, self.rg(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for rank {rank}"));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let map = permute_index(xv.shape(), perm);
        let data = map.iter().map(|&i| xv.data()[i]).collect();
        Ok(self.push(
            Tensor { shape, data },
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            self.rg(x),
        ))
    }

    // ----------------------------------------------------------------------
    // reductions
    // ----------------------------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x, axis: None }, self.rg(x))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::lit(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x, axis: None }, self.rg(x))
    }

    fn reduce_axis(&self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(shape_err!("reduction axis {axis} out of range for {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = T::one() / T::lit(len as f64);
            data.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = xv.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let op = if mean {
            Op::Mean { x, axis: Some(axis) }
        } else {
            Op::Sum { x, axis: Some(axis) }
        };
        Ok(self.push(Tensor { shape, data }, op, self.rg(x)))
    }

    pub fn sum_axis(&self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, false)
    }

    pub fn mean_axis(&self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, true)
    }

    // ----------------------------------------------------------------------
    // backward
    // ----------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Only nodes that (transitively)
    /// depend on a gradient-requiring leaf receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop(&nodes, i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !nodes[i].requires_grad {
                *g = None;
            }
        }
        let shapes = nodes.iter().take(loss.0 + 1).map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// For every output element of a permutation, the flat index of its source.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = numel(&out_shape);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` takes no gradient.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let xs = val(*x).data();
            let Some(dx) = slot(nodes, grads, *x) else { return };
            let kind = *kind;
            for j in 0..dx.len() {
                let (xv, yv, g) = (xs[j], y[j], gy[j]);
                let d = match kind {
                    UnaryKind::Relu => {
                        if xv > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::LeakyRelu(s) => {
                        if xv > T::zero() {
                            g
                        } else {
                            g * T::lit(s)
                        }
                    }
                    UnaryKind::Tanh => g * (T::one() - yv * yv),
                    UnaryKind::Sigmoid => g * yv * (T::one() - yv),
                    UnaryKind::Abs => {
                        if xv > T::zero() {
                            g
                        } else if xv < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Square => g * T::lit(2.0) * xv,
                    UnaryKind::Log => g / xv,
                    UnaryKind::Exp => g * yv,
                    UnaryKind::Pow(p) => {
                        if p == 0.0 {
                            T::zero()
                        } else {
                            g * T::lit(p) * xv.powf(T::lit(p - 1.0))
                        }
                    }
                    UnaryKind::Scale(c) => g * T::lit(c),
                    UnaryKind::AddScalar(_) => g,
                };
                dx[j] += d;
            }
        }
        Op::Binary { a, b, kind } => {
            let (av, bv) = (val(*a), val(*b));
            let same = av.shape() == node.value.shape() && bv.shape() == node.value.shape();
            let (ia, ib) = if same {
                (None, None)
            } else {
                (
                    Some(broadcast_index(node.value.shape(), av.shape())),
                    Some(broadcast_index(node.value.shape(), bv.shape())),
                )
            };
            let at = |map: &Option<Vec<usize>>, j: usize| map.as_ref().map_or(j, |m| m[j]);
            if let Some(da) = slot(nodes, grads, *a) {
                for j in 0..gy.len() {
                    let z = bv.data()[at(&ib, j)];
                    let d = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gy[j],
                        BinaryKind::Mul => gy[j] * z,
                        BinaryKind::Div => gy[j] / z,
                    };
                    da[at(&ia, j)] += d;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for j in 0..gy.len() {
                    let (x, z) = (av.data()[at(&ia, j)], bv.data()[at(&ib, j)]);
                    let d = match kind {
                        BinaryKind::Add => gy[j],
                        BinaryKind::Sub => -gy[j],
                        BinaryKind::Mul => gy[j] * x,
                        BinaryKind::Div => -gy[j] * x / (z * z),
                    };
                    db[at(&ib, j)] += d;
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (out_f, in_f) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.numel() / in_f;
            if let Some(dx) = slot(nodes, grads, *x) {
                kernels::gemm_nn(rows, out_f, in_f, gy, wv.data(), dx);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                kernels::gemm_tn(out_f, rows, in_f, gy, xv.data(), dw);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in gy.chunks(out_f) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let r = av.rank();
            let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
            let batch = av.numel() / (m * k);
            if let Some(da) = slot(nodes, grads, *a) {
                for t in 0..batch {
                    kernels::gemm_nt(
                        m,
                        n,
                        k,
                        &gy[t * m * n..(t + 1) * m * n],
                        &bv.data()[t * k * n..(t + 1) * k * n],
                        &mut da[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for t in 0..batch {
                    kernels::gemm_tn(
                        k,
                        m,
                        n,
                        &av.data()[t * m * k..(t + 1) * m * k],
                        &gy[t * m * n..(t + 1) * m * n],
                        &mut db[t * k * n..(t + 1) * k * n],
                    );
                }
            }
        }
        Op::Conv3d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let n = xv.shape()[0];
            let f = wv.shape()[0];
            let (patch, p, inl) = (geom.patch_len(), geom.positions(), geom.input_len());
            let want_w = nodes[w.0].requires_grad;
            let want_x = nodes[x.0].requires_grad;
            let mut cols = vec![T::zero(); patch * p];
            for s in 0..n {
                let g = &gy[s * f * p..(s + 1) * f * p];
                if want_w {
                    geom.im2col(&xv.data()[s * inl..(s + 1) * inl], &mut cols);
                    let dw = slot(nodes, grads, *w).unwrap();
                    kernels::gemm_nt(f, p, patch, g, &cols, dw);
                }
                if want_x {
                    cols.fill(T::zero());
                    kernels::gemm_tn(patch, f, p, wv.data(), g, &mut cols);
                    let dx = slot(nodes, grads, *x).unwrap();
                    geom.col2im(&cols, &mut dx[s * inl..(s + 1) * inl]);
                }
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for (j, chan) in gy.chunks(p).enumerate() {
                        db[j % f] += chan.iter().copied().sum::<T>();
                    }
                }
            }
        }
        Op::ConvTranspose3d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let n = xv.shape()[0];
            let cin = wv.shape()[0];
            let (patch, p, outl) = (geom.patch_len(), geom.positions(), geom.input_len());
            let want_w = nodes[w.0].requires_grad;
            let want_x = nodes[x.0].requires_grad;
            let mut cols = vec![T::zero(); patch * p];
            for s in 0..n {
                if !(want_w || want_x) {
                    break;
                }
                geom.im2col(&gy[s * outl..(s + 1) * outl], &mut cols);
                if want_x {
                    let dx = slot(nodes, grads, *x).unwrap();
                    kernels::gemm_nn(cin, patch, p, wv.data(), &cols, &mut dx[s * cin * p..(s + 1) * cin * p]);
                }
                if want_w {
                    let dw = slot(nodes, grads, *w).unwrap();
                    kernels::gemm_nt(cin, p, patch, &xv.data()[s * cin * p..(s + 1) * cin * p], &cols, dw);
                }
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    let cout = geom.channels;
                    let vox = outl / cout;
                    for (j, chan) in gy.chunks(vox).enumerate() {
                        db[j % cout] += chan.iter().copied().sum::<T>();
                    }
                }
            }
        }
        Op::MaxPool3d { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&src, &g) in argmax.iter().zip(gy) {
                    dx[src] += g;
                }
            }
        }
        Op::AvgPool3d { x, kernel, stride } => {
            let s = val(*x).shape().to_vec();
            let o = &node.value.shape()[2..];
            let (kernel, stride) = (*kernel, *stride);
            let (h, w) = (s[3], s[4]);
            let norm = T::one() / T::lit((kernel * kernel * kernel) as f64);
            if let Some(dx) = slot(nodes, grads, *x) {
                let vox = s[2] * h * w;
                let mut q = 0;
                for ch in 0..s[0] * s[1] {
                    let base = ch * vox;
                    for zd in 0..o[0] {
                        for zh in 0..o[1] {
                            for zw in 0..o[2] {
                                let g = gy[q] * norm;
                                q += 1;
                                for a in 0..kernel {
                                    for b in 0..kernel {
                                        for c in 0..kernel {
                                            dx[base
                                                + ((zd * stride + a) * h + zh * stride + b) * w
                                                + zw * stride
                                                + c] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            let s = val(*x).shape();
            let vox = s[2] * s[3] * s[4];
            let inv = T::one() / T::lit(vox as f64);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (chan, &g) in dx.chunks_mut(vox).zip(gy) {
                    let g = g * inv;
                    chan.iter_mut().for_each(|d| *d += g);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += gy[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] += y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let n = gv.numel();
            let rows = xhat.len() / n;
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..n {
                        dg[j] += gy[r * n + j] * xhat[r * n + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..n {
                        db[j] += gy[r * n + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let nn = T::lit(n as f64);
                let mut dxh = vec![T::zero(); n];
                for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        dxh[j] = gy[r * n + j] * gv.data()[j];
                        s1 += dxh[j];
                        s2 += dxh[j] * xhat[r * n + j];
                    }
                    let k = rstd[r] / nn;
                    for j in 0..n {
                        dx[r * n + j] += k * (nn * dxh[j] - s1 - xhat[r * n + j] * s2);
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for v in xs {
                let len = val(*v).shape()[*axis];
                if let Some(dx) = slot(nodes, grads, *v) {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let src = &gy[(o * total + offset) * inner..(o * total + offset) * inner + chunk];
                        for (d, &g) in dx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
            let width = node.value.shape()[*axis];
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut dx[(o * len + start) * inner..(o * len + start + width) * inner];
                    let src = &gy[o * width * inner..(o + 1) * width * inner];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, &g) in dx.iter_mut().zip(gy) {
                    *d += g;
                }
            }
        }
        Op::Permute { x, perm } => {
            let map = permute_index(val(*x).shape(), perm);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&src, &g) in map.iter().zip(gy) {
                    dx[src] += g;
                }
            }
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let is_mean = matches!(node.op, Op::Mean { .. });
            let xs = val(*x).shape().to_vec();
            let Some(dx) = slot(nodes, grads, *x) else { return };
            match axis {
                None => {
                    let g = if is_mean {
                        gy[0] / T::lit(dx.len() as f64)
                    } else {
                        gy[0]
                    };
                    dx.iter_mut().for_each(|d| *d += g);
                }
                Some(axis) => {
                    let (outer, len, inner) = split_axis(&xs, *axis);
                    let scale = if is_mean {
                        T::one() / T::lit(len as f64)
                    } else {
                        T::one()
                    };
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, &g) in dst.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                                *d += g * scale;
                            }
                        }
                    }
                }
            }
        }
    }
}
