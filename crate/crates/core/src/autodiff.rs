//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Model
//! weights enter as shared constants (`Arc<Tensor>`) so only activations
//! live on the tape. Calling [`Tape::backward`] on a single-element output
//! yields the adjoint of every recorded node, including intermediate ones
//! (Layer-CAM reads the adjoint of a hidden activation).

use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Arc<Tensor>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    Norm(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    MatMulConst(Var, Arc<Tensor>),
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        weight: Arc<Tensor>,
        stride: usize,
        pad: usize,
    },
    ChannelBias(Var),
    /// Per-channel separable linear map `rows · X_c · colsᵀ`.
    Resample {
        input: Var,
        rows: Arc<Tensor>,
        cols: Arc<Tensor>,
    },
    Clamp {
        input: Var,
        lo: Arc<Tensor>,
        hi: Arc<Tensor>,
        straight_through: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation recorder.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        self.push(v, Op::AddConst(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c))
    }

    /// `a − c` for a constant `c`.
    pub fn sub_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x - y);
        self.push(v, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Frobenius norm of all elements. The subgradient at zero is zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).frobenius());
        self.push(v, Op::Norm(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose2();
        self.push(v, Op::Transpose(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_const(&mut self, a: Var, w: Arc<Tensor>) -> Var {
        let v = self.value(a).matmul(&w);
        self.push(v, Op::MatMulConst(a, w))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        self.push(Tensor::new(&[r, c], out), Op::SoftmaxRows(a))
    }

    /// 2-D convolution (cross-correlation) of a `(C, H, W)` input with a
    /// constant `(O, C, k, k)` kernel, zero padding `pad`, stride `stride`.
    pub fn conv2d(&mut self, input: Var, weight: Arc<Tensor>, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.value(input), &weight, stride, pad);
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `(C, H, W)` input.
    pub fn channel_bias(&mut self, input: Var, bias: &[f64]) -> Var {
        let x = self.value(input);
        let (c, h, w) = x.dims3();
        assert_eq!(bias.len(), c, "bias length must equal channel count");
        let mut v = x.clone();
        for (ch, b) in bias.iter().enumerate() {
            for e in &mut v.data_mut()[ch * h * w..(ch + 1) * h * w] {
                *e += b;
            }
        }
        self.push(v, Op::ChannelBias(input))
    }

    /// Applies `rows · X_c · colsᵀ` to every channel of a `(C, H, W)` input.
    pub fn resample(&mut self, input: Var, rows: Arc<Tensor>, cols: Arc<Tensor>) -> Var {
        let v = resample_forward(self.value(input), &rows, &cols);
        self.push(v, Op::Resample { input, rows, cols })
    }

    /// Clamps elementwise into `[lo, hi]`. With `straight_through` the
    /// backward pass treats the clamp as identity; otherwise it passes the
    /// gradient only where the input lies inside the band.
    pub fn clamp(
        &mut self,
        input: Var,
        lo: Arc<Tensor>,
        hi: Arc<Tensor>,
        straight_through: bool,
    ) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape(), lo.shape());
        assert_eq!(x.shape(), hi.shape());
        let data = x
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        let v = Tensor::new(x.shape(), data);
        self.push(
            v,
            Op::Clamp {
                input,
                lo,
                hi,
                straight_through,
            },
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward() requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |var: Var, contrib: Tensor| match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |x, y| x * y));
                acc(*b, g.zip_map(va, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |x, y| x / y));
                let t = g.zip_map(va, |x, y| x * y);
                acc(*b, t.zip_map(vb, |x, y| -x / (y * y)));
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y)),
            Op::Relu(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::filled(self.shape(*a), s));
            }
            Op::Norm(a) => {
                let n = out.item();
                let va = self.value(*a);
                if n > 0.0 {
                    let s = g.item() / n;
                    acc(*a, va.map(|v| v * s));
                } else {
                    acc(*a, Tensor::zeros(va.shape()));
                }
            }
            Op::Reshape(a) => acc(*a, g.clone().reshaped(self.shape(*a))),
            Op::Transpose(a) => acc(*a, g.transpose2()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&vb.transpose2()));
                acc(*b, va.transpose2().matmul(g));
            }
            Op::MatMulConst(a, w) => acc(*a, g.matmul(&w.transpose2())),
            Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = y[j] * (gy[j] - inner);
                    }
                }
                acc(*a, Tensor::new(&[r, c], d));
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let gx = conv2d_backward_input(self.shape(*input), g, weight, *stride, *pad);
                acc(*input, gx);
            }
            Op::ChannelBias(a) => acc(*a, g.clone()),
            Op::Resample { input, rows, cols } => {
                let rt = rows.transpose2();
                let ct = cols.transpose2();
                acc(*input, resample_forward(g, &rt, &ct));
            }
            Op::Clamp {
                input,
                lo,
                hi,
                straight_through,
            } => {
                if *straight_through {
                    acc(*input, g.clone());
                } else {
                    let x = self.value(*input);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(lo.data().iter().zip(hi.data()))
                        .map(|((&gv, &xv), (&l, &h))| if xv >= l && xv <= h { gv } else { 0.0 })
                        .collect();
                    acc(*input, Tensor::new(x.shape(), data));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.dims3();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv kernel must be (O, C, k, k)");
    let (o, ci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ci, c, "conv channel mismatch");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((oc * c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &xd[(ic * h + iy as usize) * wd..(ic * h + iy as usize + 1) * wd];
                        let dst_row = &mut out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                *d += wv * src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[o, ho, wo], out)
}

fn conv2d_backward_input(
    in_shape: &[usize],
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let ws = w.shape();
    let (o, k) = (ws[0], ws[2]);
    let (_, ho, wo) = g.dims3();
    let gd = g.data();
    let wdat = w.data();
    let mut gx = vec![0.0; c * h * wd];
    for oc in 0..o {
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((oc * c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ic * h + iy as usize) * wd;
                        let grow = &gd[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                gx[base + ix as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, gx)
}

pub(crate) fn resample_forward(x: &Tensor, rows: &Tensor, cols: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3();
    let (h2, hr) = rows.dims2();
    let (w2, wc) = cols.dims2();
    assert_eq!(hr, h, "resample row operator does not match input height");
    assert_eq!(wc, w, "resample column operator does not match input width");
    let ct = cols.transpose2();
    let mut out = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        let plane = Tensor::new(&[h, w], x.data()[ch * h * w..(ch + 1) * h * w].to_vec());
        let r = rows.matmul(&plane).matmul(&ct);
        out.extend_from_slice(r.data());
    }
    Tensor::new(&[c, h2, w2], out)
}
