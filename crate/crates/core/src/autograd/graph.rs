use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{AutogradError, Grads, ParamBundle, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`; kernel sizes must be odd.
    Same,
    Valid,
}

/// Rigid map from output pixel `(row, col)` to input pixel coordinates:
/// `src = R(angle) * [row, col] + [t_row, t_col]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub cos: f64,
    pub sin: f64,
    pub t_row: f64,
    pub t_col: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { cos: 1.0, sin: 0.0, t_row: 0.0, t_col: 0.0 }
    }

    pub fn from_angle(angle: f64, t_row: f64, t_col: f64) -> Self {
        RigidTransform { cos: angle.cos(), sin: angle.sin(), t_row, t_col }
    }

    /// Rotation by `k` quarter turns with exact integer coefficients.
    pub fn quarter_turns(k: i64, t_row: f64, t_col: f64) -> Self {
        let (cos, sin) = match k.rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        RigidTransform { cos, sin, t_row, t_col }
    }

    pub fn apply(&self, row: f64, col: f64) -> (f64, f64) {
        (self.cos * row - self.sin * col + self.t_row, self.sin * row + self.cos * col + self.t_col)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulBcast(Var, Var),
    DivBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Dense { x: Var, w: Var, b: Option<Var>, batch: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, mask: Option<Arc<[bool]>> },
    Gather { x: Var, idx: Vec<usize> },
    ChannelMax { x: Var, argmax: Vec<usize> },
    Warp { x: Var, taps: Vec<[(u32, f64); 4]> },
    Upsample { x: Var, factor: usize },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    BceLogits { logits: Var, targets: Vec<f64> },
    Mse(Var, Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    WeightedSum { weights: Var, items: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of a computation. Nodes are appended in evaluation order, so reverse
/// index order is a valid topological order for the backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    param_cache: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutogradError {
    AutogradError::Shape { op, detail }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

/// Inclusive-exclusive range of output indices `o` with `0 <= o*s + k - p < n`.
fn valid_range(out: usize, n: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    // o*s + k - p <= n - 1  =>  o <= (n - 1 + p - k) / s
    let hi = if n + p > k { ((n - 1 + p - k) / s + 1).min(out) } else { 0 };
    (lo.min(out), hi.max(lo.min(out)))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: BTreeMap::new(), param_cache: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, bundle: &ParamBundle, name: &str) -> Result<Var, AutogradError> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let t = bundle.get(name).ok_or_else(|| AutogradError::MissingParam(name.to_string()))?;
        let v = self.push(t.clone(), Op::Leaf, true);
        self.param_cache.insert(name.to_string(), v);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter (zeros when unreached).
    pub fn param_grads(&self) -> Grads {
        let mut out = Grads::default();
        for (name, &v) in &self.params {
            let g = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ----

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    fn bcast(&mut self, op: &'static str, x: Var, m: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutogradError> {
        let (tx, tm) = (self.value(x), self.value(m));
        let inner: usize = tx.shape().iter().skip(1).product();
        let ok = tm.shape().first() == Some(&1) && tm.shape()[1..] == tx.shape()[1..];
        if !ok || tx.shape().is_empty() {
            return Err(shape_err(op, format!("{:?} against {:?}", tx.shape(), tm.shape())));
        }
        let md = tm.data();
        let data = tx.data().iter().enumerate().map(|(i, v)| f(*v, md[i % inner])).collect();
        Ok(Tensor::new(tx.shape().to_vec(), data).expect("same shape"))
    }

    /// `x[c, ...] * m[0, ...]` broadcasting `m` along the leading axis.
    pub fn mul_bcast(&mut self, x: Var, m: Var) -> Result<Var, AutogradError> {
        let t = self.bcast("mul_bcast", x, m, |a, b| a * b)?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(t, Op::MulBcast(x, m), rg))
    }

    pub fn div_bcast(&mut self, x: Var, m: Var) -> Result<Var, AutogradError> {
        let t = self.bcast("div_bcast", x, m, |a, b| a / b)?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(t, Op::DivBcast(x, m), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| f(*v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- layers ----

    /// `y = x W^T + b` for `x` of shape `[n]` or `[batch, n]`, `W` of shape `[m, n]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutogradError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (batch, n) = match tx.shape() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            s => return Err(shape_err("dense", format!("input must be 1-D or 2-D, got {s:?}"))),
        };
        let (m, wn) = match tw.shape() {
            [m, wn] => (*m, *wn),
            s => return Err(shape_err("dense", format!("weight must be 2-D, got {s:?}"))),
        };
        if wn != n {
            return Err(shape_err("dense", format!("input {:?} against weight {:?}", tx.shape(), tw.shape())));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [m] {
                return Err(shape_err("dense", format!("bias {:?} for {m} outputs", self.value(b).shape())));
            }
        }
        let xd = tx.data();
        let wd = tw.data();
        let mut out = vec![0.0; batch * m];
        for bi in 0..batch {
            let xr = &xd[bi * n..(bi + 1) * n];
            for i in 0..m {
                let wr = &wd[i * n..(i + 1) * n];
                out[bi * m + i] = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for bi in 0..batch {
                for i in 0..m {
                    out[bi * m + i] += bd[i];
                }
            }
        }
        let shape = if tx.shape().len() == 1 { vec![m] } else { vec![batch, m] };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out).expect("dense shape"), Op::Dense { x, w, b, batch }, rg))
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var, AutogradError> {
        self.conv2d_impl(x, w, b, stride, padding, None)
    }

    /// Convolution whose kernel entries with `mask[i] == false` are structurally zero:
    /// they are ignored in the forward pass and receive no gradient.
    pub fn conv2d_masked(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
        mask: Arc<[bool]>,
    ) -> Result<Var, AutogradError> {
        if mask.len() != self.value(w).len() {
            return Err(shape_err("conv2d", format!("mask of {} entries for kernel {:?}", mask.len(), self.value(w).shape())));
        }
        self.conv2d_impl(x, w, b, stride, padding, Some(mask))
    }

    fn conv2d_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
        mask: Option<Arc<[bool]>>,
    ) -> Result<Var, AutogradError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (c, h, wid) = match tx.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err("conv2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let (o, wc, kh, kw) = match tw.shape() {
            [o, wc, kh, kw] => (*o, *wc, *kh, *kw),
            s => return Err(shape_err("conv2d", format!("kernel must be [O,C,kh,kw], got {s:?}"))),
        };
        if wc != c || stride == 0 {
            return Err(shape_err("conv2d", format!("input {:?} against kernel {:?} stride {stride}", tx.shape(), tw.shape())));
        }
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        let k = kh;
        let (pad, oh, ow) = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(shape_err("conv2d", format!("'same' padding needs an odd kernel, got {k}")));
                }
                ((k - 1) / 2, h.div_ceil(stride), wid.div_ceil(stride))
            }
            Padding::Valid => {
                if k > h || k > wid {
                    return Err(shape_err("conv2d", format!("kernel {k} larger than input {h}x{wid}")));
                }
                (0, (h - k) / stride + 1, (wid - k) / stride + 1)
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d", format!("bias {:?} for {o} channels", self.value(b).shape())));
            }
        }
        let xd = tx.data();
        let wd = tw.data();
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                let xin = &xd[ic * h * wid..(ic + 1) * h * wid];
                for ky in 0..k {
                    let (y_lo, y_hi) = valid_range(oh, h, stride, ky, pad);
                    for kx in 0..k {
                        let wi = ((oc * c + ic) * k + ky) * k + kx;
                        let wv = wd[wi];
                        if wv == 0.0 || mask.as_ref().is_some_and(|m| !m[wi]) {
                            continue;
                        }
                        let (x_lo, x_hi) = valid_range(ow, wid, stride, kx, pad);
                        for oy in y_lo..y_hi {
                            let iy = oy * stride + ky - pad;
                            let row = &xin[iy * wid..(iy + 1) * wid];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = kx as isize - pad as isize;
                                for ox in x_lo..x_hi {
                                    orow[ox] += wv * row[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    orow[ox] += wv * row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for oc in 0..o {
                out[oc * oh * ow..(oc + 1) * oh * ow].iter_mut().for_each(|v| *v += bd[oc]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![o, oh, ow], out).expect("conv shape"),
            Op::Conv2d { x, w, b, stride, pad, mask },
            rg,
        ))
    }

    /// Max over consecutive groups of `group` channels: `[G*group, H, W] -> [G, H, W]`.
    /// Ties resolve to the lowest channel.
    pub fn channel_max(&mut self, x: Var, group: usize) -> Result<Var, AutogradError> {
        let tx = self.value(x);
        let (c, rest) = match tx.shape() {
            [c, rest @ ..] if group > 0 && c % group == 0 => (*c, rest.to_vec()),
            s => return Err(shape_err("channel_max", format!("{s:?} not divisible into groups of {group}"))),
        };
        let plane: usize = rest.iter().product();
        let groups = c / group;
        let xd = tx.data();
        let mut out = vec![f64::NEG_INFINITY; groups * plane];
        let mut argmax = vec![0usize; groups * plane];
        for gi in 0..groups {
            for ch in 0..group {
                let src = (gi * group + ch) * plane;
                for p in 0..plane {
                    let v = xd[src + p];
                    if ch == 0 || v > out[gi * plane + p] {
                        out[gi * plane + p] = v;
                        argmax[gi * plane + p] = src + p;
                    }
                }
            }
        }
        let mut shape = vec![groups];
        shape.extend(rest);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out).expect("channel_max shape"), Op::ChannelMax { x, argmax }, rg))
    }

    /// Bilinear resampling of `x: [C, h, w]` onto an `[C, out_h, out_w]` grid. Output
    /// pixel `(r, c)` reads input coordinates `transform.apply(r, c)`; samples outside
    /// the input read zero. Integer sample coordinates copy values exactly.
    pub fn bilinear_warp(&mut self, x: Var, out_h: usize, out_w: usize, transform: &RigidTransform) -> Result<Var, AutogradError> {
        let tx = self.value(x);
        let (c, h, w) = match tx.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err("bilinear_warp", format!("input must be [C,H,W], got {s:?}"))),
        };
        let mut taps = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            for col in 0..out_w {
                let (sr, sc) = transform.apply(r as f64, col as f64);
                let (r0, c0) = (sr.floor(), sc.floor());
                let (fr, fc) = (sr - r0, sc - c0);
                let mut t = [(0u32, 0.0); 4];
                let corners = [(0.0, 0.0, (1.0 - fr) * (1.0 - fc)), (0.0, 1.0, (1.0 - fr) * fc), (1.0, 0.0, fr * (1.0 - fc)), (1.0, 1.0, fr * fc)];
                for (slot, (dr, dc, wgt)) in corners.into_iter().enumerate() {
                    let (rr, cc) = (r0 + dr, c0 + dc);
                    if wgt != 0.0 && rr >= 0.0 && cc >= 0.0 && (rr as usize) < h && (cc as usize) < w {
                        t[slot] = ((rr as usize * w + cc as usize) as u32, wgt);
                    }
                }
                taps.push(t);
            }
        }
        let xd = tx.data();
        let plane_in = h * w;
        let plane_out = out_h * out_w;
        let mut out = vec![0.0; c * plane_out];
        for ch in 0..c {
            let src = &xd[ch * plane_in..(ch + 1) * plane_in];
            let dst = &mut out[ch * plane_out..(ch + 1) * plane_out];
            for (p, t) in taps.iter().enumerate() {
                let mut acc = 0.0;
                let mut any = false;
                for &(idx, wgt) in t {
                    if wgt != 0.0 {
                        let v = wgt * src[idx as usize];
                        acc = if any { acc + v } else { v };
                        any = true;
                    }
                }
                dst[p] = acc;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, out_h, out_w], out).expect("warp shape"), Op::Warp { x, taps }, rg))
    }

    /// Nearest-neighbor upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var, AutogradError> {
        let tx = self.value(x);
        let (c, h, w) = match tx.shape() {
            [c, h, w] if factor > 0 => (*c, *h, *w),
            s => return Err(shape_err("upsample", format!("input must be [C,H,W] with factor > 0, got {s:?}"))),
        };
        let (oh, ow) = (h * factor, w * factor);
        let xd = tx.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xd[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out).expect("upsample shape"), Op::Upsample { x, factor }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutogradError> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        if n == 0 {
            return Err(shape_err("softmax", format!("empty last axis in {:?}", tx.shape())));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out).expect("softmax shape"), Op::Softmax(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutogradError> {
        let tl = self.value(logits);
        let (rows, k) = match tl.shape() {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            s => return Err(shape_err("cross_entropy", format!("logits must be 1-D or 2-D, got {s:?}"))),
        };
        if targets.len() != rows || targets.iter().any(|&t| t >= k) {
            return Err(shape_err("cross_entropy", format!("{} targets for logits {:?}", targets.len(), tl.shape())));
        }
        let mut loss = 0.0;
        for (row, &t) in tl.data().chunks(k).zip(targets) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec() }, rg))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, AutogradError> {
        let tl = self.value(logits);
        if tl.len() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{} targets for logits {:?}", targets.len(), tl.shape())));
        }
        let loss = tl.data().iter().zip(targets).map(|(z, t)| softplus(*z) - t * z).sum::<f64>() / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets: targets.to_vec() }, rg))
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = ta.len().max(1) as f64;
        let loss = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutogradError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(shape_err("concat", format!("{:?} does not match trailing dims {:?}", t.shape(), tail)));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data).expect("concat shape"), Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks same-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, AutogradError> {
        let first = parts.first().ok_or_else(|| shape_err("stack", "no inputs".into()))?;
        let inner = self.value(*first).shape().to_vec();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape() != inner.as_slice() {
                return Err(shape_err("stack", format!("{:?} vs {:?}", t.shape(), inner)));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data).expect("stack shape"), Op::Stack(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutogradError> {
        let tx = self.value(x);
        let lead = *tx.shape().first().ok_or_else(|| shape_err("slice", "scalar input".into()))?;
        if start + len > lead || len == 0 {
            return Err(shape_err("slice", format!("rows {start}..{} of {:?}", start + len, tx.shape())));
        }
        let inner: usize = tx.shape()[1..].iter().product();
        let data = tx.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&tx.shape()[1..]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data).expect("slice shape"), Op::Slice { x, start }, rg))
    }

    /// Row `i` of the leading axis, with that axis dropped.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, AutogradError> {
        let s = self.slice(x, i, 1)?;
        let inner = self.value(x).shape()[1..].to_vec();
        let inner = if inner.is_empty() { vec![1] } else { inner };
        self.reshape(s, &inner)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Flat-index selection: `out[i] = x.data[idx[i]]`, shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutogradError> {
        let tx = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= tx.len()) {
            return Err(shape_err("gather", format!("{} indices into {:?}", idx.len(), tx.shape())));
        }
        let data = idx.iter().map(|&i| tx.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// `sum_i weights[i] * items[i, ...]` for `weights: [N]`, `items: [N, ...]`.
    pub fn weighted_sum(&mut self, weights: Var, items: Var) -> Result<Var, AutogradError> {
        let (tw, ti) = (self.value(weights), self.value(items));
        let n = tw.len();
        if tw.shape().len() != 1 || ti.shape().first() != Some(&n) {
            return Err(shape_err("weighted_sum", format!("weights {:?} against items {:?}", tw.shape(), ti.shape())));
        }
        let inner: usize = ti.shape()[1..].iter().product();
        let mut out = vec![0.0; inner];
        for (i, wv) in tw.data().iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&ti.data()[i * inner..(i + 1) * inner]) {
                *o += wv * v;
            }
        }
        let shape = if ti.shape().len() == 1 { vec![1] } else { ti.shape()[1..].to_vec() };
        let rg = self.rg(weights) || self.rg(items);
        Ok(self.push(Tensor::new(shape, out).expect("weighted_sum shape"), Op::WeightedSum { weights, items }, rg))
    }

    // ---- backward ----

    /// Accumulates d(loss)/d(node) into every node reachable from `loss`.
    /// Repeated calls add to existing gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutogradError> {
        if self.value(loss).len() != 1 {
            return Err(AutogradError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        // Seed on a scratch buffer so earlier accumulations are not re-propagated.
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut scratch);
            match &mut self.grads[i] {
                Some(g) => g.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gout),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = scratch[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] * vb[k]));
                acc(*b, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] * va[k]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] / vb[k]));
                acc(*b, &mut |g| (0..g.len()).for_each(|k| g[k] -= gout[k] * va[k] / (vb[k] * vb[k])));
            }
            Op::MulBcast(x, m) => {
                let (vx, vm) = (val(*x), val(*m));
                let inner = vm.len();
                acc(*x, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] * vm[k % inner]));
                acc(*m, &mut |g| (0..vx.len()).for_each(|k| g[k % inner] += gout[k] * vx[k]));
            }
            Op::DivBcast(x, m) => {
                let (vx, vm) = (val(*x), val(*m));
                let inner = vm.len();
                acc(*x, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] / vm[k % inner]));
                acc(*m, &mut |g| {
                    (0..vx.len()).for_each(|k| {
                        let d = vm[k % inner];
                        g[k % inner] -= gout[k] * vx[k] / (d * d)
                    })
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(a, d)| *a += s * d)),
            Op::AddScalar(x) => acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(a, d)| *a += d)),
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| (0..g.len()).for_each(|k| if vx[k] > 0.0 { g[k] += gout[k] }));
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] * out[k] * (1.0 - out[k]))),
            Op::Tanh(x) => acc(*x, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] * (1.0 - out[k] * out[k]))),
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    (0..g.len()).for_each(|k| {
                        let s = if vx[k] > 0.0 {
                            1.0
                        } else if vx[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[k] += gout[k] * s
                    })
                });
            }
            Op::Exp(x) => acc(*x, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] * out[k])),
            Op::Ln(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] / vx[k]));
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[k] * sigmoid(vx[k])));
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += gout[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += gout[0] / n));
            }
            Op::Dense { x, w, b, batch } => {
                let (vx, vw) = (val(*x), val(*w));
                let m = nodes[w.0].value.shape()[0];
                let n = nodes[w.0].value.shape()[1];
                acc(*x, &mut |g| {
                    for bi in 0..*batch {
                        let gr = &gout[bi * m..(bi + 1) * m];
                        let gx = &mut g[bi * n..(bi + 1) * n];
                        for (i, d) in gr.iter().enumerate() {
                            if *d == 0.0 {
                                continue;
                            }
                            let wr = &vw[i * n..(i + 1) * n];
                            gx.iter_mut().zip(wr).for_each(|(a, wv)| *a += d * wv);
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for bi in 0..*batch {
                        let xr = &vx[bi * n..(bi + 1) * n];
                        for i in 0..m {
                            let d = gout[bi * m + i];
                            if d == 0.0 {
                                continue;
                            }
                            g[i * n..(i + 1) * n].iter_mut().zip(xr).for_each(|(a, xv)| *a += d * xv);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for bi in 0..*batch {
                            g.iter_mut().zip(&gout[bi * m..(bi + 1) * m]).for_each(|(a, d)| *a += d);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad, mask } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (c, h, wid) = (sx[0], sx[1], sx[2]);
                let (o, k) = (sw[0], sw[2]);
                let so = nodes[i].value.shape();
                let (oh, ow) = (so[1], so[2]);
                let (vx, vw) = (val(*x), val(*w));
                let (stride, pad) = (*stride, *pad);
                acc(*x, &mut |g| {
                    for oc in 0..o {
                        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
                        for ic in 0..c {
                            let gin = &mut g[ic * h * wid..(ic + 1) * h * wid];
                            for ky in 0..k {
                                let (y_lo, y_hi) = valid_range(oh, h, stride, ky, pad);
                                for kx in 0..k {
                                    let wi = ((oc * c + ic) * k + ky) * k + kx;
                                    let wv = vw[wi];
                                    if wv == 0.0 || mask.as_ref().is_some_and(|m| !m[wi]) {
                                        continue;
                                    }
                                    let (x_lo, x_hi) = valid_range(ow, wid, stride, kx, pad);
                                    for oy in y_lo..y_hi {
                                        let iy = oy * stride + ky - pad;
                                        for ox in x_lo..x_hi {
                                            gin[iy * wid + ox * stride + kx - pad] += wv * gplane[oy * ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for oc in 0..o {
                        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
                        for ic in 0..c {
                            let xin = &vx[ic * h * wid..(ic + 1) * h * wid];
                            for ky in 0..k {
                                let (y_lo, y_hi) = valid_range(oh, h, stride, ky, pad);
                                for kx in 0..k {
                                    let wi = ((oc * c + ic) * k + ky) * k + kx;
                                    if mask.as_ref().is_some_and(|m| !m[wi]) {
                                        continue;
                                    }
                                    let (x_lo, x_hi) = valid_range(ow, wid, stride, kx, pad);
                                    let mut s = 0.0;
                                    for oy in y_lo..y_hi {
                                        let iy = oy * stride + ky - pad;
                                        for ox in x_lo..x_hi {
                                            s += xin[iy * wid + ox * stride + kx - pad] * gplane[oy * ow + ox];
                                        }
                                    }
                                    g[wi] += s;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for oc in 0..o {
                            g[oc] += gout[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::ChannelMax { x, argmax } => {
                acc(*x, &mut |g| argmax.iter().zip(gout).for_each(|(&src, d)| g[src] += d));
            }
            Op::Warp { x, taps } => {
                let sx = nodes[x.0].value.shape();
                let plane_in = sx[1] * sx[2];
                let plane_out = taps.len();
                acc(*x, &mut |g| {
                    for ch in 0..sx[0] {
                        for (p, t) in taps.iter().enumerate() {
                            let d = gout[ch * plane_out + p];
                            for &(idx, wgt) in t {
                                if wgt != 0.0 {
                                    g[ch * plane_in + idx as usize] += wgt * d;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let sx = nodes[x.0].value.shape();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (oh, ow) = (h * factor, w * factor);
                acc(*x, &mut |g| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                g[(ch * h + y / factor) * w + xx / factor] += gout[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *nodes[i].value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(out.chunks(n)).zip(gout.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for k in 0..n {
                            gr[k] += yr[k] * (dr[k] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = val(*logits);
                let rows = targets.len();
                let k = vl.len() / rows;
                acc(*logits, &mut |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        let mut p = vl[r * k..(r + 1) * k].to_vec();
                        softmax_in_place(&mut p);
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * k + j] += gout[0] * (p[j] - onehot) / rows as f64;
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let vl = val(*logits);
                let n = targets.len() as f64;
                acc(*logits, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gout[0] * (sigmoid(vl[k]) - targets[k]) / n;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = va.len().max(1) as f64;
                acc(*a, &mut |g| (0..g.len()).for_each(|k| g[k] += gout[0] * 2.0 * (va[k] - vb[k]) / n));
                acc(*b, &mut |g| (0..g.len()).for_each(|k| g[k] -= gout[0] * 2.0 * (va[k] - vb[k]) / n));
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let seg = &gout[offset..offset + len];
                    acc(*p, &mut |g| g.iter_mut().zip(seg).for_each(|(a, d)| *a += d));
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                let off = start * inner;
                acc(*x, &mut |g| g[off..off + gout.len()].iter_mut().zip(gout).for_each(|(a, d)| *a += d));
            }
            Op::Gather { x, idx } => acc(*x, &mut |g| idx.iter().zip(gout).for_each(|(&i, d)| g[i] += d)),
            Op::Reshape(x) => acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(a, d)| *a += d)),
            Op::WeightedSum { weights, items } => {
                let (vw, vi) = (val(*weights), val(*items));
                let inner = gout.len();
                acc(*weights, &mut |g| {
                    for (k, gw) in g.iter_mut().enumerate() {
                        *gw += vi[k * inner..(k + 1) * inner].iter().zip(gout).map(|(v, d)| v * d).sum::<f64>();
                    }
                });
                acc(*items, &mut |g| {
                    for (k, wv) in vw.iter().enumerate() {
                        g[k * inner..(k + 1) * inner].iter_mut().zip(gout).for_each(|(a, d)| *a += wv * d);
                    }
                });
            }
        }
    }

    /// Snapshot of all parameter bindings, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
