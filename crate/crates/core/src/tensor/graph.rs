//! Reverse-mode autodiff over a flat op tape.
//!
//! A [`Graph`] owns one tensor per node. Builder methods validate
//! shapes, run the forward kernel immediately, verify the output is
//! finite, and record which parents feed the node. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients per node.
//!
//! The tape is rebuilt for every training step; parameters enter as
//! leaves and their gradients are read back out of [`Gradients`].

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Dims4 {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

enum Op {
    Leaf,
    Conv3 { input: usize, weight: usize, bias: usize },
    Conv1 { input: usize, weight: usize, bias: usize },
    MaxPool2 { input: usize, argmax: Vec<u32> },
    Upconv2 { input: usize, weight: usize, bias: usize },
    Relu { input: usize },
    Sigmoid { input: usize },
    Dropout { input: usize, mask: Vec<f32> },
    ConcatC { a: usize, b: usize, a_channels: usize },
    MeanStack { inputs: Vec<usize> },
    Gap { input: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: f32 },
    MeanAll { input: usize },
    Dice { pred: usize, target: Vec<f32>, two_inter: f64, denom: f64 },
    InfoNce(Box<InfoNceState>),
}

/// Saved forward state for the InfoNCE node.
struct InfoNceState {
    anchors: usize,
    candidates: usize,
    tau: f32,
    n: usize,
    dim: usize,
    /// Row-normalized anchors / candidates.
    va: Vec<f32>,
    vc: Vec<f32>,
    /// Reciprocal row norms.
    inv_na: Vec<f32>,
    inv_nc: Vec<f32>,
    /// Row-wise softmax of the scaled similarity matrix, [n, n].
    softmax: Vec<f32>,
    /// Loss before the f32 rounding of the node value.
    loss_f64: f64,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads[var.0].as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.grads[var.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value of a node.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar node value read out in f64 where the op permits it.
    ///
    /// The reduction ops compute in f64 internally but store f32
    /// tensors. This accessor bypasses the final f32 rounding of the
    /// scalar so finite-difference probes resolve gradients that a
    /// single f32 ulp of the loss would otherwise swallow. Ops with
    /// no higher-precision form fall back to the stored f32 value.
    pub fn value_f64(&self, var: Var) -> Result<f64> {
        let node = &self.nodes[var.0];
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "value_f64: node must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        Ok(match &node.op {
            Op::Dice { two_inter, denom, .. } => 1.0 - two_inter / denom,
            Op::InfoNce(state) => state.loss_f64,
            Op::MeanAll { input } => {
                let data = self.nodes[*input].value.data();
                data.iter().map(|v| *v as f64).sum::<f64>() / data.len() as f64
            }
            Op::Add { a, b } => self.value_f64(Var(*a))? + self.value_f64(Var(*b))?,
            Op::Mul { a, b } => self.value_f64(Var(*a))? * self.value_f64(Var(*b))?,
            Op::Scale { input, factor } => *factor as f64 * self.value_f64(Var(*input))?,
            _ => node.value.data()[0] as f64,
        })
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.validate_finite(what)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an input or parameter tensor as a graph leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(tensor, Op::Leaf, "leaf")
    }

    fn dims4(&self, var: Var, what: &str) -> Result<Dims4> {
        let s = self.value(var).shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("{what}: expected rank-4 tensor, got {s:?}")));
        }
        Ok(Dims4 { b: s[0], c: s[1], h: s[2], w: s[3] })
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// input [B, C, H, W], weight [K, C, 3, 3], bias [K] -> [B, K, H, W].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let d = self.dims4(input, "conv2d input")?;
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Shape(format!("conv2d: weight must be [K, C, 3, 3], got {ws:?}")));
        }
        if ws[1] != d.c {
            return Err(Error::Shape(format!(
                "conv2d: weight expects {} input channels, input has {}",
                ws[1], d.c
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!("conv2d: bias must be [{}], got {bs:?}", ws[0])));
        }
        let out = kernels::conv3_forward(
            self.value(input).data(),
            d.b,
            d.c,
            d.h,
            d.w,
            self.value(weight).data(),
            ws[0],
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![d.b, ws[0], d.h, d.w], out)?;
        self.push(value, Op::Conv3 { input: input.0, weight: weight.0, bias: bias.0 }, "conv2d")
    }

    /// 1x1 convolution. weight [K, C], bias [K].
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let d = self.dims4(input, "conv1x1 input")?;
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if ws.len() != 2 || ws[1] != d.c {
            return Err(Error::Shape(format!(
                "conv1x1: weight must be [K, {}], got {ws:?}",
                d.c
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!("conv1x1: bias must be [{}], got {bs:?}", ws[0])));
        }
        let out = kernels::conv1_forward(
            self.value(input).data(),
            d.b,
            d.c,
            d.h * d.w,
            self.value(weight).data(),
            ws[0],
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![d.b, ws[0], d.h, d.w], out)?;
        self.push(value, Op::Conv1 { input: input.0, weight: weight.0, bias: bias.0 }, "conv1x1")
    }

    /// 2x2 max pooling with stride 2; extents must be even.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let d = self.dims4(input, "maxpool2 input")?;
        if d.h % 2 != 0 || d.w % 2 != 0 || d.h == 0 || d.w == 0 {
            return Err(Error::Shape(format!(
                "maxpool2: spatial extents must be even and positive, got {}x{}",
                d.h, d.w
            )));
        }
        let (out, argmax) =
            kernels::maxpool2_forward(self.value(input).data(), d.b * d.c, d.h, d.w);
        let value = Tensor::new(vec![d.b, d.c, d.h / 2, d.w / 2], out)?;
        self.push(value, Op::MaxPool2 { input: input.0, argmax }, "maxpool2")
    }

    /// 2x2 transposed convolution with stride 2 (doubles H and W).
    /// input [B, C, H, W], weight [C, J, 2, 2], bias [J].
    pub fn upconv2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let d = self.dims4(input, "upconv2 input")?;
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if ws.len() != 4 || ws[0] != d.c || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::Shape(format!(
                "upconv2: weight must be [{}, J, 2, 2], got {ws:?}",
                d.c
            )));
        }
        if bs != [ws[1]] {
            return Err(Error::Shape(format!("upconv2: bias must be [{}], got {bs:?}", ws[1])));
        }
        let out = kernels::upconv2_forward(
            self.value(input).data(),
            d.b,
            d.c,
            d.h,
            d.w,
            self.value(weight).data(),
            ws[1],
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![d.b, ws[1], d.h * 2, d.w * 2], out)?;
        self.push(value, Op::Upconv2 { input: input.0, weight: weight.0, bias: bias.0 }, "upconv2")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out: Vec<f32> = self.value(input).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        self.push(value, Op::Relu { input: input.0 }, "relu")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out: Vec<f32> =
            self.value(input).data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        self.push(value, Op::Sigmoid { input: input.0 }, "sigmoid")
    }

    /// Inverted dropout: with probability `rate` an element is zeroed,
    /// survivors are scaled by 1/(1-rate) so the expectation is
    /// preserved. Identity (no node, no RNG draws) when not training or
    /// when rate is 0.
    pub fn dropout(
        &mut self,
        input: Var,
        rate: f32,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(input).numel())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f32> =
            self.value(input).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        self.push(value, Op::Dropout { input: input.0, mask }, "dropout")
    }

    /// Concatenate two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.dims4(a, "concat a")?;
        let db = self.dims4(b, "concat b")?;
        if da.b != db.b || da.h != db.h || da.w != db.w {
            return Err(Error::Shape(format!(
                "concat_channels: incompatible shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = da.h * da.w;
        let mut out = Vec::with_capacity((da.c + db.c) * da.b * hw);
        for bi in 0..da.b {
            out.extend_from_slice(&self.value(a).data()[bi * da.c * hw..(bi + 1) * da.c * hw]);
            out.extend_from_slice(&self.value(b).data()[bi * db.c * hw..(bi + 1) * db.c * hw]);
        }
        let value = Tensor::new(vec![da.b, da.c + db.c, da.h, da.w], out)?;
        self.push(value, Op::ConcatC { a: a.0, b: b.0, a_channels: da.c }, "concat_channels")
    }

    /// Element-wise mean of 1..=n same-shape tensors.
    pub fn mean_stack(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("mean_stack: no inputs".into()));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for v in inputs {
            if self.value(*v).shape() != shape {
                return Err(Error::Shape(format!(
                    "mean_stack: shape {:?} != {:?}",
                    self.value(*v).shape(),
                    shape
                )));
            }
        }
        // Accumulate in f64 and round once: the mean of n identical
        // inputs then reproduces them bit-exactly (the n-fold sum of
        // an f32 is exact in f64 for n <= 3 and the division is
        // correctly rounded back to the original value).
        let n = inputs.len() as f64;
        let numel = self.value(inputs[0]).numel();
        let mut acc = vec![0f64; numel];
        for v in inputs {
            for (o, x) in acc.iter_mut().zip(self.value(*v).data()) {
                *o += *x as f64;
            }
        }
        let out: Vec<f32> = acc.iter().map(|o| (*o / n) as f32).collect();
        let value = Tensor::new(shape, out)?;
        let op = Op::MeanStack { inputs: inputs.iter().map(|v| v.0).collect() };
        self.push(value, op, "mean_stack")
    }

    /// Global average pooling: [B, C, H, W] -> [B, C].
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let d = self.dims4(input, "global_avg_pool input")?;
        let hw = d.h * d.w;
        let data = self.value(input).data();
        let mut out = vec![0f32; d.b * d.c];
        for (p, o) in out.iter_mut().enumerate() {
            let acc: f64 = data[p * hw..(p + 1) * hw].iter().map(|v| *v as f64).sum();
            *o = (acc / hw as f64) as f32;
        }
        let value = Tensor::new(vec![d.b, d.c], out)?;
        self.push(value, Op::Gap { input: input.0 }, "global_avg_pool")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: shape {:?} != {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push(value, Op::Add { a: a.0, b: b.0 }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul: shape {:?} != {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push(value, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::Numeric(format!("scale: non-finite factor {factor}")));
        }
        let out: Vec<f32> = self.value(input).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        self.push(value, Op::Scale { input: input.0, factor }, "scale")
    }

    /// Mean over all elements -> scalar [1].
    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let data = self.value(input).data();
        let mean = (data.iter().map(|v| *v as f64).sum::<f64>() / data.len() as f64) as f32;
        self.push(Tensor::scalar(mean), Op::MeanAll { input: input.0 }, "mean_all")
    }

    /// Soft Dice loss against a constant binary target, summed over every
    /// element of the batch: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor, eps: f32) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "dice_loss: pred shape {:?} != target shape {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("dice_loss: eps must be > 0, got {eps}")));
        }
        if let Some(bad) = target.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Contract(format!(
                "dice_loss: target must be binary, found {bad}"
            )));
        }
        let p = self.value(pred).data();
        let g = target.data();
        let mut inter = 0f64;
        let mut psum = 0f64;
        let mut gsum = 0f64;
        for (pv, gv) in p.iter().zip(g) {
            inter += (*pv as f64) * (*gv as f64);
            psum += *pv as f64;
            gsum += *gv as f64;
        }
        let two_inter = 2.0 * inter + eps as f64;
        let denom = psum + gsum + eps as f64;
        let loss = (1.0 - two_inter / denom) as f32;
        let op = Op::Dice { pred: pred.0, target: target.data().to_vec(), two_inter, denom };
        self.push(Tensor::scalar(loss), op, "dice_loss")
    }

    /// Directed InfoNCE over two aligned embedding batches [N, D]:
    /// mean over anchors i of -log softmax_k(cos(v_i, u_k)/tau) at k = i.
    /// The positive candidate is included in the denominator. N = 1 gives
    /// exactly zero (the softmax is a single term).
    pub fn info_nce(&mut self, anchors: Var, candidates: Var, tau: f32) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("info_nce: tau must be > 0, got {tau}")));
        }
        let sa = self.value(anchors).shape().to_vec();
        let sc = self.value(candidates).shape().to_vec();
        if sa.len() != 2 || sa != sc {
            return Err(Error::Shape(format!(
                "info_nce: need matching [N, D] batches, got {sa:?} and {sc:?}"
            )));
        }
        let (n, dim) = (sa[0], sa[1]);
        if n == 0 {
            return Err(Error::Contract("info_nce: empty batch".into()));
        }

        // Normalization, similarities and the loss all run in f64 from
        // the f32 inputs, so the f64 loss view stays an exact function
        // of the embeddings; f32 copies are kept for the backward pass.
        let normalize = |data: &[f32], what: &str| -> Result<(Vec<f64>, Vec<f32>)> {
            let mut rows = vec![0f64; n * dim];
            let mut inv = vec![0f32; n];
            for i in 0..n {
                let row = &data[i * dim..(i + 1) * dim];
                let norm = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(Error::Numeric(format!(
                        "info_nce: zero-norm {what} embedding at row {i}"
                    )));
                }
                inv[i] = (1.0 / norm) as f32;
                for (o, v) in rows[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                    *o = (*v as f64) / norm;
                }
            }
            Ok((rows, inv))
        };
        let (va64, inv_na) = normalize(self.value(anchors).data(), "anchor")?;
        let (vc64, inv_nc) = normalize(self.value(candidates).data(), "candidate")?;

        // Scaled cosine similarity matrix and row softmax.
        let mut softmax = vec![0f32; n * n];
        let mut loss = 0f64;
        let mut sims = vec![0f64; n];
        for i in 0..n {
            let vrow = &va64[i * dim..(i + 1) * dim];
            for k in 0..n {
                let urow = &vc64[k * dim..(k + 1) * dim];
                let dot: f64 = vrow.iter().zip(urow).map(|(x, y)| x * y).sum();
                sims[k] = dot / tau as f64;
            }
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = sims.iter().map(|s| (s - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - sims[i];
            for k in 0..n {
                softmax[i * n + k] = ((sims[k] - lse).exp()) as f32;
            }
        }
        let loss_f64 = loss / n as f64;
        let state = InfoNceState {
            anchors: anchors.0,
            candidates: candidates.0,
            tau,
            n,
            dim,
            va: va64.iter().map(|v| *v as f32).collect(),
            vc: vc64.iter().map(|v| *v as f32).collect(),
            inv_na,
            inv_nc,
            softmax,
            loss_f64,
        };
        self.push(Tensor::scalar(loss_f64 as f32), Op::InfoNce(Box::new(state)), "info_nce")
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], idx: usize, len: usize) -> &mut Vec<f32> {
        grads[idx].get_or_insert_with(|| vec![0f32; len])
    }

    fn backprop_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let numel_of = |i: usize| self.nodes[i].value.numel();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv3 { input, weight, bias } => {
                let s_in = self.nodes[*input].value.shape();
                let (b, c, h, w) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let cout = self.nodes[*weight].value.shape()[0];
                let wdata = self.nodes[*weight].value.data();
                let gi = kernels::conv3_backward_input(g, b, c, h, w, wdata, cout);
                let (gw, gb) = kernels::conv3_backward_params(
                    g,
                    self.nodes[*input].value.data(),
                    b,
                    c,
                    h,
                    w,
                    cout,
                );
                add_into(Self::accumulate(grads, *input, numel_of(*input)), &gi);
                add_into(Self::accumulate(grads, *weight, numel_of(*weight)), &gw);
                add_into(Self::accumulate(grads, *bias, numel_of(*bias)), &gb);
            }
            Op::Conv1 { input, weight, bias } => {
                let s_in = self.nodes[*input].value.shape();
                let (b, c, hw) = (s_in[0], s_in[1], s_in[2] * s_in[3]);
                let cout = self.nodes[*weight].value.shape()[0];
                let wdata = self.nodes[*weight].value.data();
                let gi = kernels::conv1_backward_input(g, b, c, hw, wdata, cout);
                let (gw, gb) = kernels::conv1_backward_params(
                    g,
                    self.nodes[*input].value.data(),
                    b,
                    c,
                    hw,
                    cout,
                );
                add_into(Self::accumulate(grads, *input, numel_of(*input)), &gi);
                add_into(Self::accumulate(grads, *weight, numel_of(*weight)), &gw);
                add_into(Self::accumulate(grads, *bias, numel_of(*bias)), &gb);
            }
            Op::MaxPool2 { input, argmax } => {
                let s_in = self.nodes[*input].value.shape();
                let (b, c, h, w) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let gi = kernels::maxpool2_backward(g, argmax, b * c, h, w);
                add_into(Self::accumulate(grads, *input, numel_of(*input)), &gi);
            }
            Op::Upconv2 { input, weight, bias } => {
                let s_in = self.nodes[*input].value.shape();
                let (b, c, h, w) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let cout = self.nodes[*weight].value.shape()[1];
                let wdata = self.nodes[*weight].value.data();
                let gi = kernels::upconv2_backward_input(g, b, c, h, w, wdata, cout);
                let (gw, gb) = kernels::upconv2_backward_params(
                    g,
                    self.nodes[*input].value.data(),
                    b,
                    c,
                    h,
                    w,
                    cout,
                );
                add_into(Self::accumulate(grads, *input, numel_of(*input)), &gi);
                add_into(Self::accumulate(grads, *weight, numel_of(*weight)), &gw);
                add_into(Self::accumulate(grads, *bias, numel_of(*bias)), &gb);
            }
            Op::Relu { input } => {
                let out = self.nodes[id].value.data();
                let acc = Self::accumulate(grads, *input, numel_of(*input));
                for ((a, gv), ov) in acc.iter_mut().zip(g).zip(out) {
                    if *ov > 0.0 {
                        *a += *gv;
                    }
                }
            }
            Op::Sigmoid { input } => {
                let out = self.nodes[id].value.data();
                let acc = Self::accumulate(grads, *input, numel_of(*input));
                for ((a, gv), ov) in acc.iter_mut().zip(g).zip(out) {
                    *a += *gv * *ov * (1.0 - *ov);
                }
            }
            Op::Dropout { input, mask } => {
                let acc = Self::accumulate(grads, *input, numel_of(*input));
                for ((a, gv), mv) in acc.iter_mut().zip(g).zip(mask) {
                    *a += *gv * *mv;
                }
            }
            Op::ConcatC { a, b, a_channels } => {
                let sa = self.nodes[*a].value.shape();
                let (batch, hw) = (sa[0], sa[2] * sa[3]);
                let c_total = self.nodes[id].value.shape()[1];
                let cb = c_total - a_channels;
                {
                    let acc_a = Self::accumulate(grads, *a, numel_of(*a));
                    for bi in 0..batch {
                        let src = &g[bi * c_total * hw..bi * c_total * hw + a_channels * hw];
                        let dst = &mut acc_a[bi * a_channels * hw..(bi + 1) * a_channels * hw];
                        add_into(dst, src);
                    }
                }
                let acc_b = Self::accumulate(grads, *b, numel_of(*b));
                for bi in 0..batch {
                    let src = &g[bi * c_total * hw + a_channels * hw..(bi + 1) * c_total * hw];
                    let dst = &mut acc_b[bi * cb * hw..(bi + 1) * cb * hw];
                    add_into(dst, src);
                }
            }
            Op::MeanStack { inputs } => {
                let inv_n = 1.0 / inputs.len() as f32;
                for input in inputs {
                    let acc = Self::accumulate(grads, *input, numel_of(*input));
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += *gv * inv_n;
                    }
                }
            }
            Op::Gap { input } => {
                let s_in = self.nodes[*input].value.shape();
                let hw = s_in[2] * s_in[3];
                let inv = 1.0 / hw as f32;
                let acc = Self::accumulate(grads, *input, numel_of(*input));
                for (p, gv) in g.iter().enumerate() {
                    for a in &mut acc[p * hw..(p + 1) * hw] {
                        *a += *gv * inv;
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(Self::accumulate(grads, *a, numel_of(*a)), g);
                add_into(Self::accumulate(grads, *b, numel_of(*b)), g);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                {
                    let bdata = self.nodes[b].value.data();
                    let acc = Self::accumulate(grads, a, numel_of(a));
                    for ((x, gv), bv) in acc.iter_mut().zip(g).zip(bdata) {
                        *x += *gv * *bv;
                    }
                }
                let adata = self.nodes[a].value.data();
                let acc = Self::accumulate(grads, b, numel_of(b));
                for ((x, gv), av) in acc.iter_mut().zip(g).zip(adata) {
                    *x += *gv * *av;
                }
            }
            Op::Scale { input, factor } => {
                let acc = Self::accumulate(grads, *input, numel_of(*input));
                for (a, gv) in acc.iter_mut().zip(g) {
                    *a += *gv * *factor;
                }
            }
            Op::MeanAll { input } => {
                let n = numel_of(*input);
                let gv = g[0] / n as f32;
                let acc = Self::accumulate(grads, *input, n);
                for a in acc.iter_mut() {
                    *a += gv;
                }
            }
            Op::Dice { pred, target, two_inter, denom } => {
                // d/dp_i [1 - (2*sum(pg)+eps)/(sum p + sum g + eps)]
                //   = -(2 g_i * denom - two_inter) / denom^2
                let gv = g[0] as f64;
                let d2 = denom * denom;
                let acc = Self::accumulate(grads, *pred, numel_of(*pred));
                for (a, t) in acc.iter_mut().zip(target) {
                    let grad = -((2.0 * (*t as f64) * denom - two_inter) / d2);
                    *a += (gv * grad) as f32;
                }
            }
            Op::InfoNce(st) => {
                let (ga, gc) = info_nce_backward(st, g[0]);
                add_into(Self::accumulate(grads, st.anchors, st.n * st.dim), &ga);
                add_into(Self::accumulate(grads, st.candidates, st.n * st.dim), &gc);
            }
        }
    }
}

fn add_into(acc: &mut [f32], src: &[f32]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += *s;
    }
}

/// Gradient of the InfoNCE forward pass w.r.t. both raw (pre-
/// normalization) embedding batches.
///
/// With v_i, u_k the normalized rows, s_ik = <v_i, u_k>/tau and
/// p = softmax(s) per row: dL/ds_ik = (p_ik - delta_ik)/N, so
/// dL/dv_i = sum_k (p_ik - delta_ik) u_k / (N tau) and symmetrically for
/// u. The normalization pullback for v = a/|a| is
/// da = (dv - <dv, v> v) / |a|.
fn info_nce_backward(st: &InfoNceState, upstream: f32) -> (Vec<f32>, Vec<f32>) {
    let (n, dim) = (st.n, st.dim);
    let scale = upstream as f64 / (n as f64 * st.tau as f64);
    let mut dva = vec![0f64; n * dim];
    let mut dvc = vec![0f64; n * dim];
    for i in 0..n {
        for k in 0..n {
            let p = st.softmax[i * n + k] as f64 - if i == k { 1.0 } else { 0.0 };
            let coeff = scale * p;
            let urow = &st.vc[k * dim..(k + 1) * dim];
            let vrow = &st.va[i * dim..(i + 1) * dim];
            let da = &mut dva[i * dim..(i + 1) * dim];
            for (d, u) in da.iter_mut().zip(urow) {
                *d += coeff * (*u as f64);
            }
            let dc = &mut dvc[k * dim..(k + 1) * dim];
            for (d, v) in dc.iter_mut().zip(vrow) {
                *d += coeff * (*v as f64);
            }
        }
    }
    // Pull back through the row normalizations.
    let pullback = |dv: &[f64], rows: &[f32], inv: &[f32]| -> Vec<f32> {
        let mut out = vec![0f32; n * dim];
        for i in 0..n {
            let dvi = &dv[i * dim..(i + 1) * dim];
            let vi = &rows[i * dim..(i + 1) * dim];
            let dot: f64 = dvi.iter().zip(vi).map(|(d, v)| d * (*v as f64)).sum();
            let inv_norm = inv[i] as f64;
            for ((o, d), v) in out[i * dim..(i + 1) * dim].iter_mut().zip(dvi).zip(vi) {
                *o = ((d - dot * (*v as f64)) * inv_norm) as f32;
            }
        }
        out
    };
    (pullback(&dva, &st.va, &st.inv_na), pullback(&dvc, &st.vc, &st.inv_nc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f32>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![4], vec![-2.0, -0.5, 0.5, 3.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 3.0]);
        let m = g.mean_all(y).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.25, 0.25]);
    }

    #[test]
    fn sigmoid_matches_closed_form_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.3]);
        let y = g.sigmoid(x).unwrap();
        let grads = g.backward(y).unwrap();
        let s = 1.0 / (1.0 + (-0.3f32).exp());
        assert_abs_diff_eq!(grads.get(x).unwrap()[0], s * (1.0 - s), epsilon = 1e-6);
    }

    #[test]
    fn mul_of_same_var_gives_two_x() {
        // f(x) = x * x, df/dx = 2x = 6 at x = 3.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        let grads = g.backward(y).unwrap();
        assert_abs_diff_eq!(grads.get(x).unwrap()[0], 6.0, epsilon = 1e-6);
    }

    #[test]
    fn mean_stack_averages_and_splits_gradient() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![2], vec![3.0, 4.0]);
        let c = leaf(&mut g, vec![2], vec![5.0, 6.0]);
        let m = g.mean_stack(&[a, b, c]).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 4.0]);
        let s = g.mean_all(m).unwrap();
        let grads = g.backward(s).unwrap();
        // d mean_all(mean_stack)/da_i = 1/(2*3)
        for v in grads.get(a).unwrap() {
            assert_abs_diff_eq!(*v, 1.0 / 6.0, epsilon = 1e-6);
        }
        assert_eq!(grads.get(a).unwrap(), grads.get(c).unwrap());
    }

    #[test]
    fn mean_stack_of_one_is_identity() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![3], vec![1.5, -2.0, 0.25]);
        let m = g.mean_stack(&[a]).unwrap();
        assert_eq!(g.value(m).data(), g.value(a).data());
    }

    #[test]
    fn concat_splits_gradient_by_channel() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0; 4]);
        let b = leaf(&mut g, vec![1, 2, 2, 2], vec![2.0; 8]);
        let cat = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(cat).shape(), &[1, 3, 2, 2]);
        assert_eq!(&g.value(cat).data()[..4], &[1.0; 4]);
        assert_eq!(&g.value(cat).data()[4..], &[2.0; 8]);
        let m = g.mean_all(cat).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap().len(), 4);
        assert_eq!(grads.get(b).unwrap().len(), 8);
        for v in grads.get(a).unwrap().iter().chain(grads.get(b).unwrap()) {
            assert_abs_diff_eq!(*v, 1.0 / 12.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn gap_averages_planes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 2]);
        assert_eq!(g.value(p).data(), &[2.5, 10.0]);
    }

    #[test]
    fn dropout_eval_mode_is_identity_node() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = leaf(&mut g, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let before = g.len();
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x);
        assert_eq!(g.len(), before);
        let z = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn dropout_survivor_fraction_near_keep_probability() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 10_000;
        let x = leaf(&mut g, vec![n], vec![1.0; n]);
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let survivors = g.value(y).data().iter().filter(|v| **v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "survivor fraction {frac}");
        // Survivors are scaled by 1/(1-rate).
        let nonzero = g.value(y).data().iter().find(|v| **v != 0.0).unwrap();
        assert_abs_diff_eq!(*nonzero, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![1e30]);
        // 1e30 * 1e30 overflows f32 to inf.
        assert!(matches!(g.mul(x, x), Err(Error::Numeric(_))));
        let a = leaf(&mut g, vec![1], vec![f32::MAX]);
        let b = leaf(&mut g, vec![1], vec![2.0]);
        assert!(matches!(g.mul(a, b), Err(Error::Numeric(_))));
    }

    #[test]
    fn leaf_rejects_non_finite_input() {
        let mut g = Graph::new();
        assert!(g.leaf(Tensor::new(vec![1], vec![f32::NAN]).unwrap()).is_err());
    }

    #[test]
    fn dice_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        let target = Tensor::new(vec![1, 1, 8, 8], {
            let mut v = vec![0.0; 64];
            v[..32].fill(1.0);
            v
        })
        .unwrap();
        let pred = g.leaf(target.clone()).unwrap();
        let loss = g.dice_loss(pred, &target, 1e-6).unwrap();
        assert!(g.value(loss).item().unwrap().abs() < 1e-6);
    }

    #[test]
    fn dice_uniform_half_prediction_matches_hand_arithmetic() {
        // pred = 0.5 everywhere on 4x4 (sum p = 8), target has 4 ones:
        // loss = 1 - (2 * 4 * 0.5) / (8 + 4) = 2/3.
        let mut g = Graph::new();
        let pred = leaf(&mut g, vec![1, 1, 4, 4], vec![0.5; 16]);
        let mut tv = vec![0.0; 16];
        tv[..4].fill(1.0);
        let target = Tensor::new(vec![1, 1, 4, 4], tv).unwrap();
        let loss = g.dice_loss(pred, &target, 1e-6).unwrap();
        assert_abs_diff_eq!(g.value(loss).item().unwrap(), 2.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn dice_disjoint_prediction_approaches_one() {
        let mut g = Graph::new();
        let mut tv = vec![0.0; 64];
        tv[..32].fill(1.0);
        let mut pv = vec![0.0; 64];
        pv[32..].fill(1.0);
        let pred = leaf(&mut g, vec![1, 1, 8, 8], pv);
        let target = Tensor::new(vec![1, 1, 8, 8], tv).unwrap();
        let loss = g.dice_loss(pred, &target, 1e-6).unwrap();
        assert!(g.value(loss).item().unwrap() > 1.0 - 1e-6);
    }

    #[test]
    fn dice_rejects_non_binary_target() {
        let mut g = Graph::new();
        let pred = leaf(&mut g, vec![2], vec![0.5, 0.5]);
        let target = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        assert!(matches!(g.dice_loss(pred, &target, 1e-6), Err(Error::Contract(_))));
    }

    #[test]
    fn info_nce_single_pair_is_exactly_zero() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![1, 4], vec![0.3, -0.2, 0.9, 0.1]);
        let c = leaf(&mut g, vec![1, 4], vec![-0.5, 0.6, 0.2, 0.8]);
        let loss = g.info_nce(a, c, 0.07).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn info_nce_identical_batches_give_ln_n_at_large_tau() {
        // With candidates == anchors and tau -> inf the softmax is
        // uniform; tau = 1e6 makes every similarity ~0 so loss = ln N.
        for n in [2usize, 4, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let data: Vec<f32> = (0..n * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let a = leaf(&mut g, vec![n, 16], data.clone());
            let c = leaf(&mut g, vec![n, 16], data);
            let loss = g.info_nce(a, c, 1e6).unwrap();
            assert_abs_diff_eq!(
                g.value(loss).item().unwrap(),
                (n as f32).ln(),
                epsilon = 1e-5
            );
        }
    }

    #[test]
    fn info_nce_orthogonal_pair_matches_closed_form() {
        // Two orthogonal unit anchors matching themselves at tau = 1:
        // each row has sims (1, 0), so loss = -ln(e / (e + 1)).
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let c = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let loss = g.info_nce(a, c, 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(g.value(loss).item().unwrap() as f64, want, epsilon = 1e-6);
    }

    #[test]
    fn info_nce_rejects_bad_inputs() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let zero = leaf(&mut g, vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(g.info_nce(a, zero, 1.0), Err(Error::Numeric(_))));
        assert!(matches!(g.info_nce(a, a, 0.0), Err(Error::Config(_))));
        assert!(matches!(g.info_nce(a, a, -1.0), Err(Error::Config(_))));
        let c3 = leaf(&mut g, vec![1, 4], vec![1.0; 4]);
        assert!(matches!(g.info_nce(a, c3, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn info_nce_is_scale_invariant_in_inputs() {
        // Cosine similarity ignores row magnitudes.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a_data: Vec<f32> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c_data: Vec<f32> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![4, 8], a_data.clone());
        let c = leaf(&mut g, vec![4, 8], c_data.clone());
        let l1 = g.info_nce(a, c, 0.07).unwrap();
        let scaled_a: Vec<f32> = a_data.iter().map(|v| v * 3.5).collect();
        let scaled_c: Vec<f32> = c_data.iter().map(|v| v * 0.01).collect();
        let a2 = leaf(&mut g, vec![4, 8], scaled_a);
        let c2 = leaf(&mut g, vec![4, 8], scaled_c);
        let l2 = g.info_nce(a2, c2, 0.07).unwrap();
        assert_abs_diff_eq!(
            g.value(l1).item().unwrap(),
            g.value(l2).item().unwrap(),
            epsilon = 1e-5
        );
    }

    #[test]
    fn chained_ops_backward_matches_finite_differences() {
        // conv -> relu -> mean on a small input; checks the end-to-end
        // chain rule against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_data: Vec<f32> = (0..2 * 2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_data: Vec<f32> = (0..3 * 2 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b_data: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();

        let run = |xd: &[f32], wd: &[f32], bd: &[f32]| -> f32 {
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![2, 2, 4, 4], xd.to_vec());
            let w = leaf(&mut g, vec![3, 2, 3, 3], wd.to_vec());
            let b = leaf(&mut g, vec![3], bd.to_vec());
            let y = g.conv2d(x, w, b).unwrap();
            let r = g.relu(y).unwrap();
            let m = g.mean_all(r).unwrap();
            g.value(m).item().unwrap()
        };

        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 2, 4, 4], x_data.clone());
        let w = leaf(&mut g, vec![3, 2, 3, 3], w_data.clone());
        let b = leaf(&mut g, vec![3], b_data.clone());
        let y = g.conv2d(x, w, b).unwrap();
        let r = g.relu(y).unwrap();
        let m = g.mean_all(r).unwrap();
        let grads = g.backward(m).unwrap();

        let fd = |data: &[f32], idx: usize, which: u8| -> f32 {
            let eps = 1e-3;
            let mut plus = data.to_vec();
            plus[idx] += eps;
            let mut minus = data.to_vec();
            minus[idx] -= eps;
            let (fp, fm) = match which {
                0 => (run(&plus, &w_data, &b_data), run(&minus, &w_data, &b_data)),
                1 => (run(&x_data, &plus, &b_data), run(&x_data, &minus, &b_data)),
                _ => (run(&x_data, &w_data, &plus), run(&x_data, &w_data, &minus)),
            };
            (fp - fm) / (2.0 * eps)
        };

        for idx in [0usize, 7, 31] {
            let a = grads.get(x).unwrap()[idx];
            let n = fd(&x_data, idx, 0);
            assert!((a - n).abs() < 2e-3, "input grad {idx}: {a} vs {n}");
        }
        for idx in [0usize, 17, 53] {
            let a = grads.get(w).unwrap()[idx];
            let n = fd(&w_data, idx, 1);
            assert!((a - n).abs() < 2e-3, "weight grad {idx}: {a} vs {n}");
        }
        let a = grads.get(b).unwrap()[1];
        let n = fd(&b_data, 1, 2);
        assert!((a - n).abs() < 2e-3, "bias grad: {a} vs {n}");
    }

    #[test]
    fn unused_branches_get_no_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let unused = leaf(&mut g, vec![2], vec![5.0, 5.0]);
        let y = g.mean_all(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads.get(x).is_some());
    }
}
