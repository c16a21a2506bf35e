//! A small reverse-mode autodiff tape over `[batch, channel, time]` f32
//! tensors.
//!
//! The graph is rebuilt every step: model code pushes nodes eagerly, reads
//! values through [`Tape::value`], and calls [`Tape::backward`] once on a
//! scalar loss. Everything is single-threaded and allocation-order
//! deterministic, which the trainer's bit-identical-metrics contract relies
//! on.
//!
//! Shape errors inside the engine are programmer errors and panic; public
//! modules validate their own inputs before touching the tape.

pub mod conv;
pub mod fft;
pub mod optim;

use std::sync::Arc;

use fft::StftPlan;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub t: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, t: usize) -> Self {
        Self { b, c, t }
    }

    pub fn scalar() -> Self {
        Self { b: 1, c: 1, t: 1 }
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.t
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Tanh,
    LeakyRelu(f32),
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Clamp(f32, f32),
}

enum Op {
    Leaf,
    Conv1d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    ConvT1d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    Unary(NodeId, Unary),
    SliceChans { x: NodeId, start: usize },
    SumChans(NodeId),
    MeanBatchTime(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    L1(NodeId, NodeId),
    Mse(NodeId, NodeId),
    BroadcastAddTime { x: NodeId, bias: NodeId },
    StftMag { x: NodeId, plan: Arc<StftPlan> },
    StraightThrough(NodeId),
}

struct Node {
    shape: Shape,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
    // Saved intermediates for backward (complex spectrum for StftMag).
    aux: Vec<f32>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
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

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].shape.numel(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, shape: Shape, data: Vec<f32>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.numel(), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad, aux: Vec::new() });
        NodeId(self.nodes.len() - 1)
    }

    fn flows(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf with no gradient (inputs, targets, noise draws).
    pub fn constant(&mut self, shape: Shape, data: Vec<f32>) -> NodeId {
        self.push(shape, data, Op::Leaf, false)
    }

    /// Leaf that accumulates gradient (parameters).
    pub fn param(&mut self, shape: Shape, data: Vec<f32>) -> NodeId {
        self.push(shape, data, Op::Leaf, true)
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.shape(x);
        let ws = self.shape(w); // [C_out, C_in, K]
        assert_eq!(xs.c, ws.c, "conv1d: channel mismatch");
        let t_out = conv::conv_out_len(xs.t, ws.t, stride, pad);
        let shape = Shape::new(xs.b, ws.b, t_out);
        let mut y = vec![0.0; shape.numel()];
        conv::conv1d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            bias.map(|b| self.nodes[b.0].data.as_slice()),
            xs.b, xs.c, xs.t, ws.b, ws.t, stride, pad,
            &mut y,
        );
        let needs = self.flows(x) || self.flows(w) || bias.is_some_and(|b| self.flows(b));
        self.push(shape, y, Op::Conv1d { x, w, bias, stride, pad }, needs)
    }

    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.shape(x);
        let ws = self.shape(w); // [C_in, C_out, K]
        assert_eq!(xs.c, ws.b, "conv_transpose1d: channel mismatch");
        let t_out = conv::conv_t_out_len(xs.t, ws.t, stride, pad);
        let shape = Shape::new(xs.b, ws.c, t_out);
        let mut y = vec![0.0; shape.numel()];
        conv::conv_t1d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            bias.map(|b| self.nodes[b.0].data.as_slice()),
            xs.b, xs.c, xs.t, ws.c, ws.t, stride, pad,
            &mut y,
        );
        let needs = self.flows(x) || self.flows(w) || bias.is_some_and(|b| self.flows(b));
        self.push(shape, y, Op::ConvT1d { x, w, bias, stride, pad }, needs)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32, op: Op) -> NodeId {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.flows(a) || self.flows(b);
        self.push(sa, data, op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let s = self.shape(x);
        let data = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let needs = self.flows(x);
        self.push(s, data, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let s = self.shape(x);
        let data = self.nodes[x.0].data.iter().map(|&v| v + c).collect();
        let needs = self.flows(x);
        self.push(s, data, Op::AddScalar(x), needs)
    }

    pub fn unary(&mut self, x: NodeId, kind: Unary) -> NodeId {
        let s = self.shape(x);
        let f = |v: f32| -> f32 {
            match kind {
                Unary::Tanh => v.tanh(),
                Unary::LeakyRelu(a) => if v > 0.0 { v } else { a * v },
                Unary::Exp => v.exp(),
                Unary::Ln => v.ln(),
                Unary::Sqrt => v.sqrt(),
                Unary::Square => v * v,
                Unary::Abs => v.abs(),
                Unary::Clamp(lo, hi) => v.clamp(lo, hi),
            }
        };
        let data = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let needs = self.flows(x);
        self.push(s, data, Op::Unary(x, kind), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Tanh)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Ln)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Square)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    pub fn slice_chans(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape(x);
        assert!(start + len <= s.c, "slice_chans out of range");
        let shape = Shape::new(s.b, len, s.t);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..s.b {
            let base = (b * s.c + start) * s.t;
            data.extend_from_slice(&self.nodes[x.0].data[base..base + len * s.t]);
        }
        let needs = self.flows(x);
        self.push(shape, data, Op::SliceChans { x, start }, needs)
    }

    /// `[B, C, T] -> [B, 1, T]`, summing channels.
    pub fn sum_chans(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let shape = Shape::new(s.b, 1, s.t);
        let mut data = vec![0.0; shape.numel()];
        for b in 0..s.b {
            for c in 0..s.c {
                let row = &self.nodes[x.0].data[(b * s.c + c) * s.t..(b * s.c + c + 1) * s.t];
                for (o, &v) in data[b * s.t..(b + 1) * s.t].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let needs = self.flows(x);
        self.push(shape, data, Op::SumChans(x), needs)
    }

    /// `[B, C, T] -> [1, C, 1]`, averaging over batch and time.
    pub fn mean_batch_time(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let shape = Shape::new(1, s.c, 1);
        let mut data = vec![0.0; s.c];
        for b in 0..s.b {
            for (c, slot) in data.iter_mut().enumerate() {
                *slot += self.nodes[x.0].data[(b * s.c + c) * s.t..(b * s.c + c + 1) * s.t]
                    .iter()
                    .sum::<f32>();
            }
        }
        let denom = (s.b * s.t) as f32;
        for v in &mut data {
            *v /= denom;
        }
        let needs = self.flows(x);
        self.push(shape, data, Op::MeanBatchTime(x), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let mean = self.nodes[x.0].data.iter().sum::<f32>() / s.numel() as f32;
        let needs = self.flows(x);
        self.push(Shape::scalar(), vec![mean], Op::MeanAll(x), needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let sum = self.nodes[x.0].data.iter().sum::<f32>();
        let needs = self.flows(x);
        self.push(Shape::scalar(), vec![sum], Op::SumAll(x), needs)
    }

    /// Mean absolute difference (scalar).
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "l1 shape mismatch");
        let n = sa.numel() as f32;
        let v = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f32>()
            / n;
        let needs = self.flows(a) || self.flows(b);
        self.push(Shape::scalar(), vec![v], Op::L1(a, b), needs)
    }

    /// Mean squared difference (scalar).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "mse shape mismatch");
        let n = sa.numel() as f32;
        let v = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f32>()
            / n;
        let needs = self.flows(a) || self.flows(b);
        self.push(Shape::scalar(), vec![v], Op::Mse(a, b), needs)
    }

    /// `x[b, c, t] + bias[b, c, 0]`, broadcasting the bias over time.
    pub fn broadcast_add_time(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        assert!(bs.b == xs.b && bs.c == xs.c && bs.t == 1, "broadcast_add_time shape mismatch");
        let mut data = self.nodes[x.0].data.clone();
        for b in 0..xs.b {
            for c in 0..xs.c {
                let bv = self.nodes[bias.0].data[b * xs.c + c];
                for v in &mut data[(b * xs.c + c) * xs.t..(b * xs.c + c + 1) * xs.t] {
                    *v += bv;
                }
            }
        }
        let needs = self.flows(x) || self.flows(bias);
        self.push(xs, data, Op::BroadcastAddTime { x, bias }, needs)
    }

    /// Magnitude STFT of a single-channel signal: `[B, 1, T] -> [B, bins,
    /// frames]`.
    pub fn stft_mag(&mut self, x: NodeId, plan: &Arc<StftPlan>) -> NodeId {
        let xs = self.shape(x);
        assert_eq!(xs.c, 1, "stft_mag expects [B, 1, T]");
        let frames = plan.num_frames(xs.t);
        let bins = plan.bins();
        let shape = Shape::new(xs.b, bins, frames);
        let mut data = vec![0.0; shape.numel()];
        let mut aux = vec![0.0; xs.b * frames * bins * 2];
        for b in 0..xs.b {
            let xb = &self.nodes[x.0].data[b * xs.t..(b + 1) * xs.t];
            plan.magnitude(
                xb,
                &mut data[b * bins * frames..(b + 1) * bins * frames],
                &mut aux[b * frames * bins * 2..(b + 1) * frames * bins * 2],
            );
        }
        let needs = self.flows(x);
        let id = self.push(shape, data, Op::StftMag { x, plan: Arc::clone(plan) }, needs);
        self.nodes[id.0].aux = aux;
        id
    }

    /// Forward takes the provided values; backward treats the op as the
    /// identity (straight-through estimator).
    pub fn straight_through(&mut self, x: NodeId, values: Vec<f32>) -> NodeId {
        let s = self.shape(x);
        assert_eq!(s.numel(), values.len(), "straight_through shape mismatch");
        let needs = self.flows(x);
        self.push(s, values, Op::StraightThrough(x), needs)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; nodes
    /// that do not require grad (and everything upstream of only such
    /// nodes) are skipped.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.nodes[loss.0].shape.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gy = grads[i].take().unwrap();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv1d { x, w, bias, stride, pad } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let want_x = self.flows(*x);
                    let want_w = self.flows(*w);
                    let mut gx = want_x.then(|| take_or_zero(&mut grads[x.0], xs.numel()));
                    let mut gw = want_w.then(|| take_or_zero(&mut grads[w.0], ws.numel()));
                    let mut gb = bias.filter(|b| self.flows(*b)).map(|b| {
                        (b, take_or_zero(&mut grads[b.0], self.shape(b).numel()))
                    });
                    conv::conv1d_backward(
                        &self.nodes[x.0].data,
                        &self.nodes[w.0].data,
                        &gy,
                        xs.b, xs.c, xs.t, ws.b, ws.t, *stride, *pad,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_mut().map(|(_, g)| g.as_mut_slice()),
                    );
                    if let Some(g) = gx {
                        grads[x.0] = Some(g);
                    }
                    if let Some(g) = gw {
                        grads[w.0] = Some(g);
                    }
                    if let Some((b, g)) = gb {
                        grads[b.0] = Some(g);
                    }
                }
                Op::ConvT1d { x, w, bias, stride, pad } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let want_x = self.flows(*x);
                    let want_w = self.flows(*w);
                    let mut gx = want_x.then(|| take_or_zero(&mut grads[x.0], xs.numel()));
                    let mut gw = want_w.then(|| take_or_zero(&mut grads[w.0], ws.numel()));
                    let mut gb = bias.filter(|b| self.flows(*b)).map(|b| {
                        (b, take_or_zero(&mut grads[b.0], self.shape(b).numel()))
                    });
                    conv::conv_t1d_backward(
                        &self.nodes[x.0].data,
                        &self.nodes[w.0].data,
                        &gy,
                        xs.b, xs.c, xs.t, ws.c, ws.t, *stride, *pad,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_mut().map(|(_, g)| g.as_mut_slice()),
                    );
                    if let Some(g) = gx {
                        grads[x.0] = Some(g);
                    }
                    if let Some(g) = gw {
                        grads[w.0] = Some(g);
                    }
                    if let Some((b, g)) = gb {
                        grads[b.0] = Some(g);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, &v)| *o += v));
                    self.accumulate(&mut grads, *b, |g| g.iter_mut().zip(&gy).for_each(|(o, &v)| *o += v));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, &v)| *o += v));
                    self.accumulate(&mut grads, *b, |g| g.iter_mut().zip(&gy).for_each(|(o, &v)| *o -= v));
                }
                Op::Mul(a, b) => {
                    let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    self.accumulate(&mut grads, *a, |g| {
                        for ((o, &v), &bd) in g.iter_mut().zip(&gy).zip(db) {
                            *o += v * bd;
                        }
                    });
                    self.accumulate(&mut grads, *b, |g| {
                        for ((o, &v), &ad) in g.iter_mut().zip(&gy).zip(da) {
                            *o += v * ad;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gy).for_each(|(o, &v)| *o += v * c)
                    });
                }
                Op::AddScalar(x) => {
                    self.accumulate(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gy).for_each(|(o, &v)| *o += v)
                    });
                }
                Op::Unary(x, kind) => {
                    let xin = &self.nodes[x.0].data;
                    let y = &node.data;
                    let kind = *kind;
                    self.accumulate(&mut grads, *x, |g| {
                        for i in 0..g.len() {
                            let d = match kind {
                                Unary::Tanh => 1.0 - y[i] * y[i],
                                Unary::LeakyRelu(a) => if xin[i] > 0.0 { 1.0 } else { a },
                                Unary::Exp => y[i],
                                Unary::Ln => 1.0 / xin[i],
                                Unary::Sqrt => 0.5 / y[i],
                                Unary::Square => 2.0 * xin[i],
                                Unary::Abs => if xin[i] >= 0.0 { 1.0 } else { -1.0 },
                                Unary::Clamp(lo, hi) => {
                                    if xin[i] >= lo && xin[i] <= hi { 1.0 } else { 0.0 }
                                }
                            };
                            g[i] += gy[i] * d;
                        }
                    });
                }
                Op::SliceChans { x, start } => {
                    let xs = self.shape(*x);
                    let ys = node.shape;
                    let start = *start;
                    self.accumulate(&mut grads, *x, |g| {
                        for b in 0..ys.b {
                            for c in 0..ys.c {
                                let src = &gy[(b * ys.c + c) * ys.t..(b * ys.c + c + 1) * ys.t];
                                let dst = &mut g[(b * xs.c + start + c) * xs.t
                                    ..(b * xs.c + start + c + 1) * xs.t];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                    });
                }
                Op::SumChans(x) => {
                    let xs = self.shape(*x);
                    self.accumulate(&mut grads, *x, |g| {
                        for b in 0..xs.b {
                            for c in 0..xs.c {
                                let dst = &mut g[(b * xs.c + c) * xs.t..(b * xs.c + c + 1) * xs.t];
                                for (o, &v) in dst.iter_mut().zip(&gy[b * xs.t..(b + 1) * xs.t]) {
                                    *o += v;
                                }
                            }
                        }
                    });
                }
                Op::MeanBatchTime(x) => {
                    let xs = self.shape(*x);
                    let denom = (xs.b * xs.t) as f32;
                    self.accumulate(&mut grads, *x, |g| {
                        for b in 0..xs.b {
                            for c in 0..xs.c {
                                let gv = gy[c] / denom;
                                for o in &mut g[(b * xs.c + c) * xs.t..(b * xs.c + c + 1) * xs.t] {
                                    *o += gv;
                                }
                            }
                        }
                    });
                }
                Op::MeanAll(x) => {
                    let n = self.shape(*x).numel() as f32;
                    let gv = gy[0] / n;
                    self.accumulate(&mut grads, *x, |g| g.iter_mut().for_each(|o| *o += gv));
                }
                Op::SumAll(x) => {
                    let gv = gy[0];
                    self.accumulate(&mut grads, *x, |g| g.iter_mut().for_each(|o| *o += gv));
                }
                Op::L1(a, b) => {
                    let n = self.shape(*a).numel() as f32;
                    let gv = gy[0] / n;
                    let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    self.accumulate(&mut grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gv * if da[i] >= db[i] { 1.0 } else { -1.0 };
                        }
                    });
                    self.accumulate(&mut grads, *b, |g| {
                        for i in 0..g.len() {
                            g[i] -= gv * if da[i] >= db[i] { 1.0 } else { -1.0 };
                        }
                    });
                }
                Op::Mse(a, b) => {
                    let n = self.shape(*a).numel() as f32;
                    let gv = 2.0 * gy[0] / n;
                    let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    self.accumulate(&mut grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gv * (da[i] - db[i]);
                        }
                    });
                    self.accumulate(&mut grads, *b, |g| {
                        for i in 0..g.len() {
                            g[i] -= gv * (da[i] - db[i]);
                        }
                    });
                }
                Op::BroadcastAddTime { x, bias } => {
                    let xs = self.shape(*x);
                    self.accumulate(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gy).for_each(|(o, &v)| *o += v)
                    });
                    self.accumulate(&mut grads, *bias, |g| {
                        for b in 0..xs.b {
                            for c in 0..xs.c {
                                g[b * xs.c + c] +=
                                    gy[(b * xs.c + c) * xs.t..(b * xs.c + c + 1) * xs.t]
                                        .iter()
                                        .sum::<f32>();
                            }
                        }
                    });
                }
                Op::StftMag { x, plan } => {
                    let xs = self.shape(*x);
                    let ys = node.shape;
                    let per = ys.c * ys.t;
                    self.accumulate(&mut grads, *x, |g| {
                        for b in 0..xs.b {
                            plan.accumulate_adjoint(
                                &gy[b * per..(b + 1) * per],
                                &node.aux[b * per * 2..(b + 1) * per * 2],
                                &node.data[b * per..(b + 1) * per],
                                &mut g[b * xs.t..(b + 1) * xs.t],
                            );
                        }
                    });
                }
                Op::StraightThrough(x) => {
                    self.accumulate(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gy).for_each(|(o, &v)| *o += v)
                    });
                }
            }
        }
        Grads { grads }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f32>>],
        target: NodeId,
        apply: impl FnOnce(&mut [f32]),
    ) {
        if !self.flows(target) {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target.0].shape.numel()]);
        }
        apply(slot.as_mut().unwrap());
    }
}

fn take_or_zero(slot: &mut Option<Vec<f32>>, numel: usize) -> Vec<f32> {
    slot.take().unwrap_or_else(|| vec![0.0; numel])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arb(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                (((i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(101))) % 997)
                    as f32
                    / 499.0
                    - 1.0
            })
            .collect()
    }

    /// Central-difference gradient of a scalar-valued tape program with
    /// respect to one leaf.
    fn numeric_grad(build: impl Fn(&[f32]) -> f32, x: &[f32], h: f32) -> Vec<f32> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                (build(&xp) - build(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f32], numeric: &[f32], label: &str) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(
                (a - n).abs() <= 0.03 * a.abs().max(n.abs()) + 3e-3,
                "{label}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn elementwise_chain_gradcheck() {
        let shape = Shape::new(2, 3, 5);
        let x0 = arb(shape.numel(), 1).iter().map(|v| v * 0.8 + 1.6).collect::<Vec<_>>();
        let run = |x: &[f32]| -> f32 {
            let mut tape = Tape::new();
            let x = tape.param(shape, x.to_vec());
            let a = tape.tanh(x);
            let b = tape.exp(a);
            let c = tape.ln(b); // positive by construction
            let d = tape.square(c);
            let e = tape.scale(d, 0.7);
            let f = tape.add_scalar(e, 0.1);
            let g = tape.unary(f, Unary::Sqrt);
            tape.mean_all(g);
            tape.scalar(NodeId(tape.len() - 1))
        };
        let mut tape = Tape::new();
        let xid = tape.param(shape, x0.clone());
        let a = tape.tanh(xid);
        let b = tape.exp(a);
        let c = tape.ln(b);
        let d = tape.square(c);
        let e = tape.scale(d, 0.7);
        let f = tape.add_scalar(e, 0.1);
        let g = tape.unary(f, Unary::Sqrt);
        let loss = tape.mean_all(g);
        let grads = tape.backward(loss);
        assert_close(grads.get(xid).unwrap(), &numeric_grad(run, &x0, 1e-3), "chain");
    }

    #[test]
    fn binary_and_reduction_gradcheck() {
        let shape = Shape::new(2, 4, 3);
        let x0 = arb(shape.numel(), 2);
        let y0 = arb(shape.numel(), 3);
        let build = |x: &[f32], y: &[f32]| -> (Tape, NodeId, NodeId, NodeId) {
            let mut tape = Tape::new();
            let xid = tape.param(shape, x.to_vec());
            let yid = tape.param(shape, y.to_vec());
            let m = tape.mul(xid, yid);
            let s = tape.sub(m, yid);
            let sc = tape.sum_chans(s);
            let l = tape.mean_all(sc);
            (tape, xid, yid, l)
        };
        let (tape, xid, yid, l) = build(&x0, &y0);
        let grads = tape.backward(l);
        let nx = numeric_grad(|x| { let (t, _, _, l) = build(x, &y0); t.scalar(l) }, &x0, 1e-2);
        let ny = numeric_grad(|y| { let (t, _, _, l) = build(&x0, y); t.scalar(l) }, &y0, 1e-2);
        assert_close(grads.get(xid).unwrap(), &nx, "mul-x");
        assert_close(grads.get(yid).unwrap(), &ny, "mul-y");
    }

    #[test]
    fn slice_mean_l1_mse_gradcheck() {
        let shape = Shape::new(2, 6, 4);
        let x0 = arb(shape.numel(), 4);
        let tgt = arb(2 * 2 * 4, 5);
        let build = |x: &[f32]| -> (Tape, NodeId, NodeId) {
            let mut tape = Tape::new();
            let xid = tape.param(shape, x.to_vec());
            let sl = tape.slice_chans(xid, 1, 2);
            let t = tape.constant(Shape::new(2, 2, 4), tgt.clone());
            let l1 = tape.l1(sl, t);
            let mbt = tape.mean_batch_time(xid);
            let sa = tape.sum_all(mbt);
            let mse = tape.mse(sl, t);
            let a = tape.add(l1, mse);
            let b = tape.add(a, sa);
            (tape, xid, b)
        };
        let (tape, xid, loss) = build(&x0);
        let grads = tape.backward(loss);
        let nx = numeric_grad(|x| { let (t, _, l) = build(x); t.scalar(l) }, &x0, 1e-2);
        assert_close(grads.get(xid).unwrap(), &nx, "slice-l1-mse");
    }

    #[test]
    fn broadcast_and_clamp_gradcheck() {
        let xs = Shape::new(2, 3, 4);
        let bs = Shape::new(2, 3, 1);
        let x0 = arb(xs.numel(), 6);
        let b0 = arb(bs.numel(), 7);
        let build = |x: &[f32], bias: &[f32]| -> (Tape, NodeId, NodeId, NodeId) {
            let mut tape = Tape::new();
            let xid = tape.param(xs, x.to_vec());
            let bid = tape.param(bs, bias.to_vec());
            let y = tape.broadcast_add_time(xid, bid);
            let c = tape.clamp(y, -0.5, 0.8);
            let l = tape.mean_all(c);
            (tape, xid, bid, l)
        };
        let (tape, xid, bid, l) = build(&x0, &b0);
        let grads = tape.backward(l);
        // Clamp kinks make finite differences unreliable exactly at the
        // boundary; the arbitrary data avoids landing there.
        let nx = numeric_grad(|x| { let (t, _, _, l) = build(x, &b0); t.scalar(l) }, &x0, 1e-3);
        let nb = numeric_grad(|b| { let (t, _, _, l) = build(&x0, b); t.scalar(l) }, &b0, 1e-3);
        assert_close(grads.get(xid).unwrap(), &nx, "bcast-x");
        assert_close(grads.get(bid).unwrap(), &nb, "bcast-b");
    }

    #[test]
    fn conv_pipeline_gradcheck_through_tape() {
        // conv1d -> leaky -> conv_transpose1d -> mse against a target.
        let xs = Shape::new(2, 2, 12);
        let ws = Shape::new(3, 2, 4); // [C_out, C_in, K]
        let wts = Shape::new(3, 2, 4); // [C_in, C_out, K]
        let x0 = arb(xs.numel(), 8);
        let w0 = arb(ws.numel(), 9);
        let wt0 = arb(wts.numel(), 10);
        let tgt = arb(2 * 2 * 12, 11);
        let build = |w: &[f32], wt: &[f32]| -> (Tape, NodeId, NodeId, NodeId) {
            let mut tape = Tape::new();
            let x = tape.constant(xs, x0.clone());
            let wid = tape.param(ws, w.to_vec());
            let wtid = tape.param(wts, wt.to_vec());
            let h = tape.conv1d(x, wid, None, 2, 1); // t: 12 -> 6
            let h = tape.leaky_relu(h, 0.2);
            let y = tape.conv_transpose1d(h, wtid, None, 2, 1); // t: 6 -> 12
            let t = tape.constant(Shape::new(2, 2, 12), tgt.clone());
            let l = tape.mse(y, t);
            (tape, wid, wtid, l)
        };
        let (tape, wid, wtid, l) = build(&w0, &wt0);
        let grads = tape.backward(l);
        let nw = numeric_grad(|w| { let (t, _, _, l) = build(w, &wt0); t.scalar(l) }, &w0, 1e-2);
        let nwt = numeric_grad(|wt| { let (t, _, _, l) = build(&w0, wt); t.scalar(l) }, &wt0, 1e-2);
        assert_close(grads.get(wid).unwrap(), &nw, "conv-w");
        assert_close(grads.get(wtid).unwrap(), &nwt, "convt-w");
    }

    #[test]
    fn stft_mag_gradcheck_through_tape() {
        // Broadband input keeps every bin well away from the magnitude
        // cone's apex, where finite differences are meaningless.
        let xs = Shape::new(1, 1, 96);
        let x0 = arb(96, 20);
        let plan = Arc::new(StftPlan::new(32, 16));
        let build = |x: &[f32]| -> (Tape, NodeId, NodeId) {
            let mut tape = Tape::new();
            let xid = tape.param(xs, x.to_vec());
            let m = tape.stft_mag(xid, &plan);
            let lg = tape.add_scalar(m, 1.0);
            let lg = tape.ln(lg);
            let l = tape.sum_all(lg);
            (tape, xid, l)
        };
        let (tape, xid, l) = build(&x0);
        let grads = tape.backward(l);
        let nx = numeric_grad(|x| { let (t, _, l) = build(x); t.scalar(l) }, &x0, 5e-3);
        assert_close(grads.get(xid).unwrap(), &nx, "stft");
    }

    #[test]
    fn straight_through_copies_gradient() {
        let s = Shape::new(1, 2, 3);
        let x0 = arb(s.numel(), 12);
        let q: Vec<f32> = x0.iter().map(|v| (v * 4.0).round() / 4.0).collect();
        let mut tape = Tape::new();
        let x = tape.param(s, x0);
        let z = tape.straight_through(x, q.clone());
        assert_eq!(tape.value(z), &q[..]);
        let t = tape.constant(s, vec![0.0; s.numel()]);
        let l = tape.mse(z, t);
        let grads = tape.backward(l);
        // dL/dz = 2 z / n must arrive at x unchanged.
        let expect: Vec<f32> = q.iter().map(|v| 2.0 * v / s.numel() as f32).collect();
        for (a, b) in grads.get(x).unwrap().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constants_do_not_accumulate_gradient() {
        let s = Shape::new(1, 1, 4);
        let mut tape = Tape::new();
        let c = tape.constant(s, vec![1.0, 2.0, 3.0, 4.0]);
        let p = tape.param(s, vec![0.5; 4]);
        let m = tape.mul(c, p);
        let l = tape.mean_all(m);
        let grads = tape.backward(l);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
