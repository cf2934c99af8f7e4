//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] evaluates eagerly: every op computes its value on creation and
//! records its parents. Node ids are creation indices, so a reverse sweep over
//! ids is a valid topological order and backward is bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped inside `log` and KL.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Powf(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Kl(Var, Var),
    Conv2d(Conv2dSpec),
    Reshape(Var),
}

#[derive(Debug, Clone, Copy)]
struct Conv2dSpec {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph built by calling op methods.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    /// Insert a tensor as a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.values().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.values().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// First element of a node's value; the loss value for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Copy a node out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// `x · w (+ b)` with `x: [n, d]`, `w: [d, h]`, `b: [h]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, d, h) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [h] {
                return Err(Error::ShapeMismatch {
                    op: "affine bias",
                    lhs: vec![h],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = vec![0.0; n * h];
        for i in 0..n {
            let yi = &mut y[i * h..(i + 1) * h];
            for k in 0..d {
                let xik = xv[i * d + k];
                if xik == 0.0 {
                    continue;
                }
                let wk = &wv[k * h..(k + 1) * h];
                for (yj, wj) in yi.iter_mut().zip(wk) {
                    *yj += xik * wj;
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(h) {
                row.iter_mut().zip(bv).for_each(|(a, b)| *a += b);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.node(b).requires_grad);
        Ok(self.push(y, vec![n, h], Op::Affine { x, w, b }, rg))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(y, self.shape(x).to_vec(), Op::Relu(x), rg)
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&1);
        let mut y = self.value(x).to_vec();
        for row in y.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(y, shape, Op::Softmax(x), rg)
    }

    /// `ln(max(x, PROB_FLOOR))`.
    pub fn log(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .iter()
            .map(|&v| v.max(PROB_FLOOR).ln())
            .collect();
        let rg = self.rg(&[x]);
        self.push(y, self.shape(x).to_vec(), Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[x]);
        self.push(y, self.shape(x).to_vec(), Op::Exp(x), rg)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let y = self.value(x).iter().map(|v| v.powf(p)).collect();
        let rg = self.rg(&[x]);
        self.push(y, self.shape(x).to_vec(), Op::Powf(x, p), rg)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, self.shape(a).to_vec(), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).iter().map(|v| v * s).collect();
        let rg = self.rg(&[a]);
        self.push(y, self.shape(a).to_vec(), Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).iter().map(|v| v + s).collect();
        let rg = self.rg(&[a]);
        self.push(y, self.shape(a).to_vec(), Op::AddScalar(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![s], vec![1], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        let rg = self.rg(&[a]);
        self.push(vec![m], vec![1], Op::Mean(a), rg)
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let va = self.value(a);
        let n = va.len();
        let s: f64 = va
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m], vec![1], Op::Mse(a, b), rg))
    }

    /// Row-averaged `KL(p ‖ q)` between probability rows on the last axis.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_div", p, q)?;
        let c = *self.shape(p).last().unwrap_or(&1);
        let pv = self.value(p);
        let qv = self.value(q);
        let rows = pv.len().checked_div(c).unwrap_or(0);
        let mut s = 0.0;
        for (pi, qi) in pv.iter().zip(qv) {
            if *pi > 0.0 {
                s += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
            }
        }
        let kl = if rows == 0 { 0.0 } else { s / rows as f64 };
        let rg = self.rg(&[p, q]);
        Ok(self.push(vec![kl], vec![1], Op::Kl(p, q), rg))
    }

    /// 2-D convolution. `x: [n, cin, h, w]`, `w: [cout, cin, k, k]`, `b: [cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let geo = ConvGeom::new(&xs, &ws, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geo.cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geo.cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut y = vec![0.0; geo.out_len()];
        let xv = self.value(x);
        let wv = self.value(w);
        geo.for_each_tap(|yi, xi, wi| y[yi] += xv[xi] * wv[wi]);
        if let Some(b) = b {
            let bv = self.value(b);
            let plane = geo.ho * geo.wo;
            for (chunk_i, chunk) in y.chunks_mut(plane).enumerate() {
                let c = chunk_i % geo.cout;
                chunk.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.node(b).requires_grad);
        let shape = vec![geo.n, geo.cout, geo.ho, geo.wo];
        Ok(self.push(
            y,
            shape,
            Op::Conv2d(Conv2dSpec {
                x,
                w,
                b,
                stride,
                pad,
            }),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let y = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(y, shape, Op::Reshape(x), rg))
    }

    /// Backpropagate from a scalar loss. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::NonScalarLoss(self.node(loss).shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward's loss w.r.t. `v`, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradient of `v`, zeros if it did not receive any. Fails before backward.
    pub fn grad_or_zeros(&self, v: Var) -> Result<Vec<f64>> {
        let grads = self.grads.as_ref().ok_or(Error::BackwardBeforeForward)?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.node(v).value.len()]))
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, delta: Vec<f64>) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut grads[to.0], delta);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
                let h = self.shape(w)[1];
                let xv = self.value(x);
                let wv = self.value(w);
                if self.wants(x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let dyi = &dy[i * h..(i + 1) * h];
                        for k in 0..d {
                            let wk = &wv[k * h..(k + 1) * h];
                            dx[i * d + k] = dyi.iter().zip(wk).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.send(grads, x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; d * h];
                    for i in 0..n {
                        let dyi = &dy[i * h..(i + 1) * h];
                        for k in 0..d {
                            let xik = xv[i * d + k];
                            if xik == 0.0 {
                                continue;
                            }
                            let dwk = &mut dw[k * h..(k + 1) * h];
                            dwk.iter_mut().zip(dyi).for_each(|(a, g)| *a += xik * g);
                        }
                    }
                    self.send(grads, w, dw);
                }
                if let Some(b) = b {
                    if self.wants(b) {
                        let mut db = vec![0.0; h];
                        for row in dy.chunks(h) {
                            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                        self.send(grads, b, db);
                    }
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.send(grads, x, dx);
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap_or(&1);
                let mut dx = vec![0.0; dy.len()];
                for ((yr, gr), dr) in node
                    .value
                    .chunks(c)
                    .zip(dy.chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - inner);
                    }
                }
                self.send(grads, x, dx);
            }
            Op::Log(x) => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > PROB_FLOOR { g / v } else { 0.0 })
                    .collect();
                self.send(grads, x, dx);
            }
            Op::Exp(x) => {
                let dx = node.value.iter().zip(dy).map(|(y, g)| y * g).collect();
                self.send(grads, x, dx);
            }
            Op::Powf(x, p) => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(dy)
                    .map(|(v, g)| p * v.powf(p - 1.0) * g)
                    .collect();
                self.send(grads, x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    self.send(grads, a, dy.to_vec());
                }
                if self.wants(b) {
                    self.send(grads, b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    self.send(grads, a, dy.to_vec());
                }
                if self.wants(b) {
                    self.send(grads, b, dy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = self.value(b).iter().zip(dy).map(|(v, g)| v * g).collect();
                    self.send(grads, a, da);
                }
                if self.wants(b) {
                    let db = self.value(a).iter().zip(dy).map(|(v, g)| v * g).collect();
                    self.send(grads, b, db);
                }
            }
            Op::Scale(a, s) => {
                self.send(grads, a, dy.iter().map(|g| g * s).collect());
            }
            Op::AddScalar(a) => {
                self.send(grads, a, dy.to_vec());
            }
            Op::Sum(a) => {
                let n = self.value(a).len();
                self.send(grads, a, vec![dy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let g = if n == 0 { 0.0 } else { dy[0] / n as f64 };
                self.send(grads, a, vec![g; n]);
            }
            Op::Mse(a, b) => {
                let va = self.value(a);
                let n = va.len().max(1) as f64;
                let da: Vec<f64> = va
                    .iter()
                    .zip(self.value(b))
                    .map(|(x, y)| 2.0 * (x - y) / n * dy[0])
                    .collect();
                if self.wants(b) {
                    self.send(grads, b, da.iter().map(|g| -g).collect());
                }
                if self.wants(a) {
                    self.send(grads, a, da);
                }
            }
            Op::Kl(p, q) => {
                let c = *self.shape(p).last().unwrap_or(&1);
                let pv = self.value(p);
                let qv = self.value(q);
                let rows = (pv.len() / c.max(1)).max(1) as f64;
                let scale = dy[0] / rows;
                if self.wants(p) {
                    let dp = pv
                        .iter()
                        .zip(qv)
                        .map(|(&pi, &qi)| {
                            let lp = pi.max(PROB_FLOOR).ln();
                            let lq = qi.max(PROB_FLOOR).ln();
                            let dlog = if pi > PROB_FLOOR { 1.0 } else { 0.0 };
                            if pi > 0.0 {
                                scale * (lp - lq + dlog)
                            } else {
                                scale * (lp - lq)
                            }
                        })
                        .collect();
                    self.send(grads, p, dp);
                }
                if self.wants(q) {
                    let dq = pv
                        .iter()
                        .zip(qv)
                        .map(|(&pi, &qi)| {
                            if qi > PROB_FLOOR && pi > 0.0 {
                                -scale * pi / qi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.send(grads, q, dq);
                }
            }
            Op::Conv2d(spec) => {
                let xs = self.shape(spec.x).to_vec();
                let ws = self.shape(spec.w).to_vec();
                let geo = ConvGeom::new(&xs, &ws, spec.stride, spec.pad).expect("checked in forward");
                if self.wants(spec.x) {
                    let wv = self.value(spec.w);
                    let mut dx = vec![0.0; self.value(spec.x).len()];
                    geo.for_each_tap(|yi, xi, wi| dx[xi] += dy[yi] * wv[wi]);
                    self.send(grads, spec.x, dx);
                }
                if self.wants(spec.w) {
                    let xv = self.value(spec.x);
                    let mut dw = vec![0.0; wv_len(&ws)];
                    geo.for_each_tap(|yi, xi, wi| dw[wi] += dy[yi] * xv[xi]);
                    self.send(grads, spec.w, dw);
                }
                if let Some(b) = spec.b {
                    if self.wants(b) {
                        let plane = geo.ho * geo.wo;
                        let mut db = vec![0.0; geo.cout];
                        for (chunk_i, chunk) in dy.chunks(plane).enumerate() {
                            db[chunk_i % geo.cout] += chunk.iter().sum::<f64>();
                        }
                        self.send(grads, b, db);
                    }
                }
            }
            Op::Reshape(x) => {
                self.send(grads, x, dy.to_vec());
            }
        }
    }
}

fn wv_len(ws: &[usize]) -> usize {
    ws.iter().product()
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel larger than padded input",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn out_len(&self) -> usize {
        self.n * self.cout * self.ho * self.wo
    }

    /// Calls `f(out_index, in_index, weight_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for co in 0..self.cout {
                for oy in 0..self.ho {
                    for ox in 0..self.wo {
                        let yi = ((b * self.cout + co) * self.ho + oy) * self.wo + ox;
                        for ci in 0..self.cin {
                            for ky in 0..self.k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                for kx in 0..self.k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let xi = ((b * self.cin + ci) * self.h + iy as usize) * self.w
                                        + ix as usize;
                                    let wi = ((co * self.cin + ci) * self.k + ky) * self.k + kx;
                                    f(yi, xi, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Relative-error floor for [`finite_diff_check`]; gradients smaller than
/// this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// Compare backward gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh graph and one differentiable [`Var`] per entry of
/// `params`, and must be deterministic. Returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, FD_FLOOR)` over every
/// parameter entry.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.variable(p)).collect();
        let loss = loss_fn(&mut g, &vars)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check loss".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.variable(p)).collect();
    let loss = loss_fn(&mut g, &vars)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("finite_diff_check loss".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad_or_zeros(v))
        .collect::<Result<_>>()?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = params[pi].values()[j];
            work[pi].values_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].values_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
