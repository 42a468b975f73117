use std::collections::HashMap;

use super::array::Array;
use super::conv::{self, ConvGeom};
use super::params::{ParamId, Params};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    PadReflect {
        x: Var,
        pad: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Square(a) | Abs(a) | Mean(a) | Sum(a) | Relu(a)
            | LeakyRelu(a, _) | Tanh(a) | Sigmoid(a) => vec![*a],
            Conv { x, w, b, .. } | ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            InstanceNorm { x, .. } | PadReflect { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        detail: format!("{a:?} vs {b:?}"),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf holding the current value of a parameter. Repeated
    /// calls with the same id return the same node.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(params.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`; zero when
    /// `v` does not influence it.
    pub fn grad(&self, v: Var) -> Array {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Array::zeros(node.value.shape()))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Array {
        self.nodes[a.0].value.map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Array::scalar(m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum::<f64>();
        self.push(Array::scalar(s), Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.unary(a, |x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            let s = self.shape(b);
            if s != [channels] {
                return Err(mismatch(op, s, &[channels]));
            }
        }
        Ok(())
    }

    /// 2D convolution. `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in, k, k]`
    /// and `b` is `[c_out]`. Output spatial size is
    /// `floor((in + 2*pad - k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        self.check_bias("conv2d", b, ws[0])?;
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h_in: xs[2],
            w_in: xs[3],
            c_out: ws[0],
            h_out: (xs[2] + 2 * pad - k) / stride + 1,
            w_out: (xs[3] + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        };
        let bias = b.map(|b| self.nodes[b.0].value.data());
        let y = conv::gather(&geom, self.value(x).data(), self.value(w).data(), bias);
        let y = Array::new(&[geom.n, geom.c_out, geom.h_out, geom.w_out], y)?;
        Ok(self.push(y, Op::Conv { x, w, b, geom }))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] in its input.
    /// `x` is `[n, c_in, h, w]`, `w` is `[c_in, c_out, k, k]` and the output
    /// spatial size is `(in - 1) * stride - 2*pad + k`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(mismatch("conv2d_transpose", &xs, &ws));
        }
        let k = ws[2];
        let span = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(h), Some(wd)) = (span(xs[2]), span(xs[3])) else {
            return Err(mismatch("conv2d_transpose", &xs, &ws));
        };
        self.check_bias("conv2d_transpose", b, ws[1])?;
        let geom = ConvGeom {
            n: xs[0],
            c_in: ws[1],
            h_in: h,
            w_in: wd,
            c_out: xs[1],
            h_out: xs[2],
            w_out: xs[3],
            k,
            stride,
            pad,
        };
        let mut y = conv::scatter(&geom, self.value(x).data(), self.value(w).data());
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, plane) in y.chunks_mut(geom.in_plane()).enumerate() {
                let c = bias[i % geom.c_in];
                plane.iter_mut().for_each(|v| *v += c);
            }
        }
        let y = Array::new(&[geom.n, geom.c_in, h, wd], y)?;
        Ok(self.push(y, Op::ConvTranspose { x, w, b, geom }))
    }

    /// Normalises every channel of every sample over its spatial extent.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape {
                op: "instance_norm",
                detail: format!("expected [n, c, h, w], got {xs:?}"),
            });
        }
        let plane = xs[2] * xs[3];
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(xs[0] * xs[1]);
        for p in out.chunks_mut(plane) {
            let mean = p.iter().sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            p.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let y = Array::new(&xs, out)?;
        Ok(self.push(y, Op::InstanceNorm { x, inv_std }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let y = Array::new(&shape, data)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Mirror padding of the two spatial axes of an `[n, c, h, w]` array.
    /// `pad` must be smaller than both spatial extents.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || pad >= xs[2] || pad >= xs[3] {
            return Err(Error::Shape {
                op: "pad_reflect",
                detail: format!("pad {pad} on {xs:?}"),
            });
        }
        let (h, w) = (xs[2], xs[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * xs[1] * ph * pw);
        for plane in src.chunks(h * w) {
            for y in 0..ph {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..pw {
                    let sx = reflect(xx as isize - pad as isize, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        let y = Array::new(&[xs[0], xs[1], ph, pw], out)?;
        Ok(self.push(y, Op::PadReflect { x, pad }))
    }

    fn accumulate(&mut self, v: Var, g: Array) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a one-element `loss`. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let shape = self.shape(loss).to_vec();
        self.nodes[loss.0].grad = Some(Array::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, Var(i), &dy);
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }

    fn propagate(&mut self, op: &Op, out: Var, dy: &Array) {
        let zip = |a: &Array, f: &dyn Fn(f64, f64) -> f64| -> Array {
            let data = a.data().iter().zip(dy.data()).map(|(&x, &g)| f(x, g)).collect();
            Array::new(a.shape(), data).expect("same shape")
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let ga = zip(self.value(b), &|y, g| y * g);
                let gb = zip(self.value(a), &|x, g| x * g);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(a, c) => self.accumulate(a, dy.map(|g| c * g)),
            Op::AddScalar(a) => self.accumulate(a, dy.clone()),
            Op::Square(a) => {
                let g = zip(self.value(a), &|x, g| 2.0 * x * g);
                self.accumulate(a, g);
            }
            Op::Abs(a) => {
                let g = zip(self.value(a), &|x, g| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, g);
            }
            Op::Mean(a) => {
                let s = self.value(a).shape().to_vec();
                let n: usize = s.iter().product();
                self.accumulate(a, Array::full(&s, dy.item() / n as f64));
            }
            Op::Sum(a) => {
                let s = self.value(a).shape().to_vec();
                self.accumulate(a, Array::full(&s, dy.item()));
            }
            Op::Relu(a) => {
                let g = zip(self.value(a), &|x, g| if x > 0.0 { g } else { 0.0 });
                self.accumulate(a, g);
            }
            Op::LeakyRelu(a, alpha) => {
                let g = zip(self.value(a), &|x, g| if x > 0.0 { g } else { alpha * g });
                self.accumulate(a, g);
            }
            Op::Tanh(a) => {
                let g = zip(self.value(out), &|y, g| (1.0 - y * y) * g);
                self.accumulate(a, g);
            }
            Op::Sigmoid(a) => {
                let g = zip(self.value(out), &|y, g| y * (1.0 - y) * g);
                self.accumulate(a, g);
            }
            Op::Conv { x, w, b, ref geom } => {
                if self.nodes[x.0].requires_grad {
                    let gx = conv::scatter(geom, dy.data(), self.value(w).data());
                    let gx = Array::new(self.shape(x), gx).expect("conv input shape");
                    self.accumulate(x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let gw = conv::weight_grad(geom, self.value(x).data(), dy.data());
                    let gw = Array::new(self.shape(w), gw).expect("kernel shape");
                    self.accumulate(w, gw);
                }
                if let Some(b) = b {
                    let gb = conv::channel_sums(dy.data(), geom.n, geom.c_out, geom.out_plane());
                    self.accumulate(b, Array::new(&[geom.c_out], gb).expect("bias shape"));
                }
            }
            Op::ConvTranspose { x, w, b, ref geom } => {
                if self.nodes[x.0].requires_grad {
                    let gx = conv::gather(geom, dy.data(), self.value(w).data(), None);
                    let gx = Array::new(self.shape(x), gx).expect("input shape");
                    self.accumulate(x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let gw = conv::weight_grad(geom, dy.data(), self.value(x).data());
                    let gw = Array::new(self.shape(w), gw).expect("kernel shape");
                    self.accumulate(w, gw);
                }
                if let Some(b) = b {
                    let gb = conv::channel_sums(dy.data(), geom.n, geom.c_in, geom.in_plane());
                    self.accumulate(b, Array::new(&[geom.c_in], gb).expect("bias shape"));
                }
            }
            Op::InstanceNorm { x, ref inv_std } => {
                let s = self.shape(x).to_vec();
                let plane = s[2] * s[3];
                let xhat = self.value(out).data();
                let mut gx = vec![0.0; xhat.len()];
                for (p, is) in inv_std.iter().enumerate() {
                    let r = p * plane..(p + 1) * plane;
                    let (xh, g) = (&xhat[r.clone()], &dy.data()[r.clone()]);
                    let sg: f64 = g.iter().sum();
                    let sgx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let m = plane as f64;
                    for ((o, &gi), &xi) in gx[r].iter_mut().zip(g).zip(xh) {
                        *o = is * (gi - sg / m - xi * sgx / m);
                    }
                }
                self.accumulate(x, Array::new(&s, gx).expect("same shape"));
            }
            Op::Concat { ref parts, axis } => {
                let outer: usize = dy.shape()[..axis].iter().product();
                let inner: usize = dy.shape()[axis + 1..].iter().product();
                let mut grads: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(self.value(*p).len())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, p) in parts.iter().enumerate() {
                        let chunk = self.shape(*p)[axis] * inner;
                        grads[k].extend_from_slice(&dy.data()[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (p, g) in parts.iter().zip(grads) {
                    let g = Array::new(self.shape(*p), g).expect("part shape");
                    self.accumulate(*p, g);
                }
            }
            Op::PadReflect { x, pad } => {
                let s = self.shape(x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut gx = vec![0.0; s.iter().product()];
                for (gp, dp) in gx.chunks_mut(h * w).zip(dy.data().chunks(ph * pw)) {
                    for y in 0..ph {
                        let sy = reflect(y as isize - pad as isize, h);
                        for xx in 0..pw {
                            let sx = reflect(xx as isize - pad as isize, w);
                            gp[sy * w + sx] += dp[y * pw + xx];
                        }
                    }
                }
                self.accumulate(x, Array::new(&s, gx).expect("same shape"));
            }
        }
    }

    /// Copies gradients of every parameter of `params` into the store. A
    /// parameter that never entered this graph receives a zero gradient.
    pub fn export_grads(&self, params: &mut Params) {
        for id in params.ids() {
            let g = match self.params.get(&id) {
                Some(&v) => self.grad(v),
                None => Array::zeros(params.value(id).shape()),
            };
            params.set_grad(id, g);
        }
    }
}
