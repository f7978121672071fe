//! Define-by-run reverse-mode differentiation.
//!
//! A `Graph` is rebuilt for every forward pass: each operation appends a node
//! holding its output value and the references needed for its backward rule.
//! `backward` walks the nodes in exact reverse execution order and accumulates
//! gradients; calling it twice without resetting accumulates twice.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: Real = 1e-5;
const BN_MOMENTUM: Real = 0.1;

/// Batch-norm behaviour: batch statistics vs. stored running statistics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a tensor produced by (or fed into) a specific graph.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var {
    graph: u64,
    idx: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    FullyConnected {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: Real,
    },
    HuberElem {
        a: Var,
        b: Var,
        delta: Real,
    },
    AbsDiff {
        a: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<Real>,
        inv_std: Vec<Real>,
        train: bool,
    },
    DiffRows {
        x: Var,
    },
    DiffCols {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        k: Real,
    },
    ClampMin {
        x: Var,
        min: Real,
    },
    Reshape {
        x: Var,
    },
    /// keep = 1 selects the frozen base value; gradient flows to `pred`
    /// only where keep = 0.
    MaskCompose {
        pred: Var,
        keep: Tensor,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<Real>>,
    requires_grad: bool,
    op: Op,
}

/// Per-layer batch-norm running statistics, each shaped (1,c,1,1).
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnStats {
    pub fn fresh(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BnStats {
            mean: Tensor::zeros(s),
            var: Tensor::ones(s),
        }
    }
}

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::graph(
                "variable does not belong to this graph".to_string(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.idx].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.idx]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.idx].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn scalar(&self, v: Var) -> Result<Real> {
        let t = self.val(v);
        if !t.shape().is_scalar() {
            return Err(Error::graph(format!(
                "expected scalar, got shape {}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    // ── construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let xs = self.val(x).shape();
        let ws = self.val(w).shape();
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must be square with odd size, got {}x{}",
                ws.h, ws.w
            )));
        }
        if ws.c != xs.c {
            return Err(Error::shape(format!(
                "conv2d input has {} channels but weight expects {}",
                xs.c, ws.c
            )));
        }
        let k = ws.h;
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} exceeds padded input {}x{}",
                xs.h + 2 * pad,
                xs.w + 2 * pad
            )));
        }
        let oh = (xs.h + 2 * pad - k) / stride + 1;
        let ow = (xs.w + 2 * pad - k) / stride + 1;
        // Same-padding convention: output spatial size must be ceil(in/stride).
        if oh != xs.h.div_ceil(stride) || ow != xs.w.div_ceil(stride) {
            return Err(Error::shape(format!(
                "conv2d padding {pad} does not give same-padding output: got {oh}x{ow}, want {}x{}",
                xs.h.div_ceil(stride),
                xs.w.div_ceil(stride)
            )));
        }
        if let Some(b) = b {
            let bs = self.val(b).shape();
            if bs.numel() != ws.n {
                return Err(Error::shape(format!(
                    "conv2d bias has {} elements, want {}",
                    bs.numel(),
                    ws.n
                )));
            }
        }
        let os = Shape::new(xs.n, ws.n, oh, ow);
        let mut out = vec![0.0; os.numel()];
        kernels::conv2d_forward(
            self.val(x).data(),
            xs,
            self.val(w).data(),
            ws,
            b.map(|b| self.val(b).data()),
            stride,
            pad,
            &mut out,
            os,
        );
        let req = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(
            Tensor::new(os, out)?,
            req,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape(format!(
                "deconv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let xs = self.val(x).shape();
        let ws = self.val(w).shape(); // (c_in, c_out, k, k)
        if ws.h != ws.w {
            return Err(Error::shape("deconv2d kernel must be square".to_string()));
        }
        if ws.n != xs.c {
            return Err(Error::shape(format!(
                "deconv2d input has {} channels but weight expects {}",
                xs.c, ws.n
            )));
        }
        if let Some(b) = b {
            if self.val(b).numel() != ws.c {
                return Err(Error::shape(format!(
                    "deconv2d bias has {} elements, want {}",
                    self.val(b).numel(),
                    ws.c
                )));
            }
        }
        let os = Shape::new(xs.n, ws.c, stride * xs.h, stride * xs.w);
        let mut out = vec![0.0; os.numel()];
        kernels::deconv2d_forward(
            self.val(x).data(),
            xs,
            self.val(w).data(),
            ws,
            b.map(|b| self.val(b).data()),
            stride,
            &mut out,
            os,
        );
        let req = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(Tensor::new(os, out)?, req, Op::Deconv2d { x, w, b, stride }))
    }

    /// x is (rows, L, 1, 1), weight (M, L, 1, 1), bias (1, M, 1, 1); the
    /// result is (rows, M, 1, 1) = x * weight^T + bias.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let xs = self.val(x).shape();
        let ws = self.val(w).shape();
        if xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 {
            return Err(Error::shape(
                "fully_connected operands must be flattened to (rows, len, 1, 1)".to_string(),
            ));
        }
        if ws.c != xs.c {
            return Err(Error::shape(format!(
                "fully_connected input length {} does not match weight inner dimension {}",
                xs.c, ws.c
            )));
        }
        if let Some(b) = b {
            if self.val(b).numel() != ws.n {
                return Err(Error::shape(format!(
                    "fully_connected bias has {} elements, want {}",
                    self.val(b).numel(),
                    ws.n
                )));
            }
        }
        let rows = xs.n;
        let inner = xs.c;
        let outer = ws.n;
        let os = Shape::new(rows, outer, 1, 1);
        let mut out = vec![0.0; os.numel()];
        kernels::fc_forward(
            self.val(x).data(),
            rows,
            inner,
            self.val(w).data(),
            outer,
            b.map(|b| self.val(b).data()),
            &mut out,
        );
        let req = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(Tensor::new(os, out)?, req, Op::FullyConnected { x, w, b }))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.val(a).shape();
        let sb = self.val(b).shape();
        if sa != sb {
            return Err(Error::shape(format!("{what} operands differ: {sa} vs {sb}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_same_shape(a, b, "add")?;
        let out: Vec<Real> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(s, out)?, req, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<Real> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(s, out)?, req, Op::Mul { a, b }))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_channels of empty list".to_string()));
        }
        for &v in inputs {
            self.check(v)?;
        }
        let first = self.val(inputs[0]).shape();
        let mut channels = 0;
        for &v in inputs {
            let s = self.val(v).shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(format!(
                    "concat_channels operands differ spatially: {first} vs {s}"
                )));
            }
            channels += s.c;
        }
        let os = Shape::new(first.n, channels, first.h, first.w);
        let mut out = vec![0.0; os.numel()];
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &v in inputs {
                let t = self.val(v);
                let s = t.shape();
                let src = &t.data()[n * s.c * plane..(n + 1) * s.c * plane];
                let dst = &mut out[(n * channels + c_off) * plane..];
                dst[..s.c * plane].copy_from_slice(src);
                c_off += s.c;
            }
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Tensor::new(os, out)?,
            req,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(Real) -> Real, op: Op) -> Result<Var> {
        self.check(x)?;
        let t = self.val(x);
        let out: Vec<Real> = t.data().iter().map(|&v| f(v)).collect();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(t.shape(), out)?, req, op))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid_stable, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: Real) -> Result<Var> {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn scale(&mut self, x: Var, k: Real) -> Result<Var> {
        self.unary(x, |v| k * v, Op::Scale { x, k })
    }

    pub fn clamp_min(&mut self, x: Var, min: Real) -> Result<Var> {
        self.unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    /// Elementwise Huber penalty of a - b: 0.5 e^2 for |e| <= delta, else
    /// delta (|e| - 0.5 delta).
    pub fn huber_elem(&mut self, a: Var, b: Var, delta: Real) -> Result<Var> {
        let s = self.binary_same_shape(a, b, "huber_elem")?;
        if delta <= 0.0 {
            return Err(Error::config(format!("huber delta must be > 0, got {delta}")));
        }
        let out: Vec<Real> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| {
                let e = x - y;
                if e.abs() <= delta {
                    0.5 * e * e
                } else {
                    delta * (e.abs() - 0.5 * delta)
                }
            })
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(s, out)?, req, Op::HuberElem { a, b, delta }))
    }

    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_same_shape(a, b, "abs_diff")?;
        let out: Vec<Real> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(s, out)?, req, Op::AbsDiff { a, b }))
    }

    /// Per-channel normalization. In train mode, batch statistics normalize
    /// and the returned `BnStats` carries the updated running statistics
    /// (momentum 0.1); in eval mode the provided running statistics are used
    /// and returned unchanged.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnStats,
        mode: Mode,
    ) -> Result<(Var, BnStats)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.val(x).shape();
        let c = xs.c;
        if self.val(gamma).numel() != c || self.val(beta).numel() != c {
            return Err(Error::shape(format!(
                "batch_norm gamma/beta must have {c} elements"
            )));
        }
        if running.mean.numel() != c || running.var.numel() != c {
            return Err(Error::shape(format!(
                "batch_norm running stats must have {c} elements"
            )));
        }
        let count = xs.n * xs.h * xs.w;
        let train = mode == Mode::Train;
        if train && count < 2 {
            return Err(Error::shape(
                "batch_norm train mode needs at least 2 values per channel".to_string(),
            ));
        }

        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            let data = self.val(x).data();
            for ch in 0..c {
                let mut sum = 0.0;
                for n in 0..xs.n {
                    for h in 0..xs.h {
                        for w in 0..xs.w {
                            sum += data[xs.idx(n, ch, h, w)];
                        }
                    }
                }
                let mu = sum / count as Real;
                let mut sq = 0.0;
                for n in 0..xs.n {
                    for h in 0..xs.h {
                        for w in 0..xs.w {
                            let d = data[xs.idx(n, ch, h, w)] - mu;
                            sq += d * d;
                        }
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / count as Real;
            }
            (mean, var)
        } else {
            (running.mean.data().to_vec(), running.var.data().to_vec())
        };

        let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let g = self.val(gamma).data().to_vec();
        let be = self.val(beta).data().to_vec();
        let data = self.val(x).data();
        let mut out = vec![0.0; xs.numel()];
        for n in 0..xs.n {
            for ch in 0..c {
                for h in 0..xs.h {
                    for w in 0..xs.w {
                        let i = xs.idx(n, ch, h, w);
                        out[i] = g[ch] * (data[i] - mean[ch]) * inv_std[ch] + be[ch];
                    }
                }
            }
        }

        let new_stats = if train {
            let mut rm = running.mean.clone();
            let mut rv = running.var.clone();
            for ch in 0..c {
                let m = rm.data_mut();
                m[ch] = (1.0 - BN_MOMENTUM) * m[ch] + BN_MOMENTUM * mean[ch];
                let v = rv.data_mut();
                v[ch] = (1.0 - BN_MOMENTUM) * v[ch] + BN_MOMENTUM * var[ch];
            }
            BnStats { mean: rm, var: rv }
        } else {
            running.clone()
        };

        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let v = self.push(
            Tensor::new(xs, out)?,
            req,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        );
        Ok((v, new_stats))
    }

    /// Forward difference along rows (vertical gradient): out(i) = x(i+1) - x(i),
    /// output height h-1.
    pub fn diff_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.val(x).shape();
        if xs.h < 2 {
            return Err(Error::shape("diff_rows needs height >= 2".to_string()));
        }
        let os = Shape::new(xs.n, xs.c, xs.h - 1, xs.w);
        let data = self.val(x).data();
        let mut out = vec![0.0; os.numel()];
        for n in 0..xs.n {
            for ch in 0..xs.c {
                for h in 0..os.h {
                    for w in 0..xs.w {
                        out[os.idx(n, ch, h, w)] =
                            data[xs.idx(n, ch, h + 1, w)] - data[xs.idx(n, ch, h, w)];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(os, out)?, req, Op::DiffRows { x }))
    }

    /// Forward difference along columns (horizontal gradient), output width w-1.
    pub fn diff_cols(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.val(x).shape();
        if xs.w < 2 {
            return Err(Error::shape("diff_cols needs width >= 2".to_string()));
        }
        let os = Shape::new(xs.n, xs.c, xs.h, xs.w - 1);
        let data = self.val(x).data();
        let mut out = vec![0.0; os.numel()];
        for n in 0..xs.n {
            for ch in 0..xs.c {
                for h in 0..xs.h {
                    for w in 0..os.w {
                        out[os.idx(n, ch, h, w)] =
                            data[xs.idx(n, ch, h, w + 1)] - data[xs.idx(n, ch, h, w)];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(os, out)?, req, Op::DiffCols { x }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total: Real = self.val(x).data().iter().sum();
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(total), req, Op::Sum { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        self.check(x)?;
        let t = self.val(x).reshaped(shape)?;
        let req = self.requires(x);
        Ok(self.push(t, req, Op::Reshape { x }))
    }

    /// out = keep ? base : pred, with `base` and `keep` frozen. Keeps kept
    /// values bitwise identical to `base`.
    pub fn mask_compose(&mut self, base: &Tensor, pred: Var, keep: &Tensor) -> Result<Var> {
        self.check(pred)?;
        let ps = self.val(pred).shape();
        if base.shape() != ps || keep.shape() != ps {
            return Err(Error::shape(format!(
                "mask_compose shapes differ: base {}, pred {}, keep {}",
                base.shape(),
                ps,
                keep.shape()
            )));
        }
        let out: Vec<Real> = base
            .data()
            .iter()
            .zip(self.val(pred).data())
            .zip(keep.data())
            .map(|((&b, &p), &k)| if k != 0.0 { b } else { p })
            .collect();
        let req = self.requires(pred);
        Ok(self.push(
            Tensor::new(ps, out)?,
            req,
            Op::MaskCompose {
                pred,
                keep: keep.clone(),
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients of every grad-requiring node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if !self.val(loss).shape().is_scalar() {
            return Err(Error::graph(format!(
                "backward requires a scalar loss, got shape {}",
                self.val(loss).shape()
            )));
        }
        let mut temp: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        temp[loss.idx] = Some(vec![1.0]);

        for idx in (0..=loss.idx).rev() {
            let Some(dy) = temp[idx].take() else { continue };
            self.backprop(idx, &dy, &mut temp);
            let node = &mut self.nodes[idx];
            if node.requires_grad {
                let grad = node
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.value.numel()]);
                for (g, d) in grad.iter_mut().zip(&dy) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        temp: &mut [Option<Vec<Real>>],
        v: Var,
        f: impl FnOnce(&mut [Real]),
    ) {
        if !self.requires(v) {
            return;
        }
        let buf = temp[v.idx].get_or_insert_with(|| vec![0.0; self.val(v).numel()]);
        f(buf);
    }

    fn backprop(&self, idx: usize, dy: &[Real], temp: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let os = node.value.shape();
                let xs = self.val(*x).shape();
                let ws = self.val(*w).shape();
                self.accumulate(temp, *x, |dx| {
                    kernels::conv2d_backward_input(
                        dy,
                        os,
                        self.val(*w).data(),
                        ws,
                        *stride,
                        *pad,
                        dx,
                        xs,
                    );
                });
                self.accumulate(temp, *w, |dw| {
                    kernels::conv2d_backward_weight(
                        dy,
                        os,
                        self.val(*x).data(),
                        xs,
                        *stride,
                        *pad,
                        dw,
                        ws,
                    );
                });
                if let Some(b) = b {
                    self.accumulate(temp, *b, |db| {
                        kernels::conv2d_backward_bias(dy, os, db);
                    });
                }
            }
            Op::Deconv2d { x, w, b, stride } => {
                let os = node.value.shape();
                let xs = self.val(*x).shape();
                let ws = self.val(*w).shape();
                self.accumulate(temp, *x, |dx| {
                    kernels::deconv2d_backward_input(
                        dy,
                        os,
                        self.val(*w).data(),
                        ws,
                        *stride,
                        dx,
                        xs,
                    );
                });
                self.accumulate(temp, *w, |dw| {
                    kernels::deconv2d_backward_weight(
                        dy,
                        os,
                        self.val(*x).data(),
                        xs,
                        *stride,
                        dw,
                        ws,
                    );
                });
                if let Some(b) = b {
                    self.accumulate(temp, *b, |db| {
                        kernels::conv2d_backward_bias(dy, os, db);
                    });
                }
            }
            Op::FullyConnected { x, w, b } => {
                let xs = self.val(*x).shape();
                let ws = self.val(*w).shape();
                let (rows, inner, outer) = (xs.n, xs.c, ws.n);
                self.accumulate(temp, *x, |dx| {
                    kernels::fc_backward_input(dy, rows, outer, self.val(*w).data(), inner, dx);
                });
                self.accumulate(temp, *w, |dw| {
                    kernels::fc_backward_weight(dy, rows, outer, self.val(*x).data(), inner, dw);
                });
                if let Some(b) = b {
                    self.accumulate(temp, *b, |db| {
                        kernels::fc_backward_bias(dy, rows, outer, db);
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(temp, *a, |da| {
                    for (g, d) in da.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                self.accumulate(temp, *b, |db| {
                    for (g, d) in db.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bv = self.val(*b).data();
                self.accumulate(temp, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += dy[i] * bv[i];
                    }
                });
                let av = self.val(*a).data();
                self.accumulate(temp, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += dy[i] * av[i];
                    }
                });
            }
            Op::ConcatChannels { inputs } => {
                let os = node.value.shape();
                let plane = os.h * os.w;
                let mut c_off = 0;
                for &v in inputs {
                    let s = self.val(v).shape();
                    self.accumulate(temp, v, |dv| {
                        for n in 0..os.n {
                            let src = &dy[(n * os.c + c_off) * plane..];
                            let dst = &mut dv[n * s.c * plane..(n + 1) * s.c * plane];
                            for (g, d) in dst.iter_mut().zip(&src[..s.c * plane]) {
                                *g += d;
                            }
                        }
                    });
                    c_off += s.c;
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                self.accumulate(temp, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.val(*x).data();
                self.accumulate(temp, *x, |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += dy[i];
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.val(*x).data();
                self.accumulate(temp, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += dy[i] * if xv[i] > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::HuberElem { a, b, delta } => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                // At |e| = delta the quadratic branch's derivative applies.
                let d = *delta;
                let slope = |e: Real| if e.abs() <= d { e } else { d * e.signum() };
                self.accumulate(temp, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += dy[i] * slope(av[i] - bv[i]);
                    }
                });
                self.accumulate(temp, *b, |db| {
                    for i in 0..db.len() {
                        db[i] -= dy[i] * slope(av[i] - bv[i]);
                    }
                });
            }
            Op::AbsDiff { a, b } => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                let sgn = |e: Real| {
                    if e > 0.0 {
                        1.0
                    } else if e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(temp, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += dy[i] * sgn(av[i] - bv[i]);
                    }
                });
                self.accumulate(temp, *b, |db| {
                    for i in 0..db.len() {
                        db[i] -= dy[i] * sgn(av[i] - bv[i]);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xs = self.val(*x).shape();
                let xv = self.val(*x).data();
                let gv = self.val(*gamma).data();
                let count = (xs.n * xs.h * xs.w) as Real;
                let c = xs.c;

                // Per-channel reductions over dy and dy*xhat.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for n in 0..xs.n {
                    for ch in 0..c {
                        for h in 0..xs.h {
                            for w in 0..xs.w {
                                let i = xs.idx(n, ch, h, w);
                                let xhat = (xv[i] - mean[ch]) * inv_std[ch];
                                sum_dy[ch] += dy[i];
                                sum_dy_xhat[ch] += dy[i] * xhat;
                            }
                        }
                    }
                }
                self.accumulate(temp, *gamma, |dg| {
                    for ch in 0..c {
                        dg[ch] += sum_dy_xhat[ch];
                    }
                });
                self.accumulate(temp, *beta, |db| {
                    for ch in 0..c {
                        db[ch] += sum_dy[ch];
                    }
                });
                self.accumulate(temp, *x, |dx| {
                    if *train {
                        for n in 0..xs.n {
                            for ch in 0..c {
                                for h in 0..xs.h {
                                    for w in 0..xs.w {
                                        let i = xs.idx(n, ch, h, w);
                                        let xhat = (xv[i] - mean[ch]) * inv_std[ch];
                                        dx[i] += gv[ch]
                                            * inv_std[ch]
                                            * (dy[i]
                                                - sum_dy[ch] / count
                                                - xhat * sum_dy_xhat[ch] / count);
                                    }
                                }
                            }
                        }
                    } else {
                        // Running statistics are constants.
                        for n in 0..xs.n {
                            for ch in 0..c {
                                for h in 0..xs.h {
                                    for w in 0..xs.w {
                                        let i = xs.idx(n, ch, h, w);
                                        dx[i] += dy[i] * gv[ch] * inv_std[ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::DiffRows { x } => {
                let xs = self.val(*x).shape();
                let os = node.value.shape();
                self.accumulate(temp, *x, |dx| {
                    for n in 0..os.n {
                        for ch in 0..os.c {
                            for h in 0..os.h {
                                for w in 0..os.w {
                                    let g = dy[os.idx(n, ch, h, w)];
                                    dx[xs.idx(n, ch, h + 1, w)] += g;
                                    dx[xs.idx(n, ch, h, w)] -= g;
                                }
                            }
                        }
                    }
                });
            }
            Op::DiffCols { x } => {
                let xs = self.val(*x).shape();
                let os = node.value.shape();
                self.accumulate(temp, *x, |dx| {
                    for n in 0..os.n {
                        for ch in 0..os.c {
                            for h in 0..os.h {
                                for w in 0..os.w {
                                    let g = dy[os.idx(n, ch, h, w)];
                                    dx[xs.idx(n, ch, h, w + 1)] += g;
                                    dx[xs.idx(n, ch, h, w)] -= g;
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let g = dy[0];
                self.accumulate(temp, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::Scale { x, k } => {
                self.accumulate(temp, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += dy[i] * k;
                    }
                });
            }
            Op::ClampMin { x, min } => {
                let xv = self.val(*x).data();
                self.accumulate(temp, *x, |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > *min {
                            dx[i] += dy[i];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(temp, *x, |dx| {
                    for (g, d) in dx.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            Op::MaskCompose { pred, keep } => {
                let kv = keep.data();
                self.accumulate(temp, *pred, |dp| {
                    for i in 0..dp.len() {
                        if kv[i] == 0.0 {
                            dp[i] += dy[i];
                        }
                    }
                });
            }
        }
    }
}

/// Overflow-free logistic function.
fn sigmoid_stable(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
