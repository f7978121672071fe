//! Naive reference implementations used as independent oracles in tests.
//!
//! These are deliberately written as plain nested loops with different loop
//! orders and accumulation structure than the production kernels, so that a
//! bug in one path cannot hide in the other. Nothing in the library proper
//! calls into this module.

use crate::tensor::{Real, Shape, Tensor};

/// Plain six-nested-loop convolution with same-padding semantics.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &[Real], stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![0.0; os.numel()];
    for kh in 0..k {
        for kw in 0..k {
            for ci in 0..xs.c {
                for n in 0..xs.n {
                    for o_h in 0..oh {
                        for o_w in 0..ow {
                            let ih = (o_h * stride + kh) as isize - pad as isize;
                            let iw = (o_w * stride + kw) as isize - pad as isize;
                            if ih < 0 || iw < 0 || ih >= xs.h as isize || iw >= xs.w as isize {
                                continue;
                            }
                            for co in 0..ws.n {
                                out[os.idx(n, co, o_h, o_w)] +=
                                    x.at(n, ci, ih as usize, iw as usize) * w.at(co, ci, kh, kw);
                            }
                        }
                    }
                }
            }
        }
    }
    for n in 0..os.n {
        for co in 0..os.c {
            for o_h in 0..oh {
                for o_w in 0..ow {
                    out[os.idx(n, co, o_h, o_w)] += bias[co];
                }
            }
        }
    }
    Tensor::new(os, out).unwrap()
}

/// Transposed convolution by scattering each input element into the output,
/// the hand-unrolled view of the operation. Weight layout (c_in, c_out, k, k);
/// output spatial size stride*h.
pub fn deconv2d(x: &Tensor, w: &Tensor, bias: &[Real], stride: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let pad = (k.saturating_sub(stride) + 1) / 2;
    let os = Shape::new(xs.n, ws.c, stride * xs.h, stride * xs.w);
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for ih in 0..xs.h {
                for iw in 0..xs.w {
                    let v = x.at(n, ci, ih, iw);
                    for co in 0..ws.c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let oh = (ih * stride + kh) as isize - pad as isize;
                                let ow = (iw * stride + kw) as isize - pad as isize;
                                if oh < 0
                                    || ow < 0
                                    || oh >= os.h as isize
                                    || ow >= os.w as isize
                                {
                                    continue;
                                }
                                out[os.idx(n, co, oh as usize, ow as usize)] +=
                                    v * w.at(ci, co, kh, kw);
                            }
                        }
                    }
                }
            }
        }
    }
    for n in 0..os.n {
        for co in 0..os.c {
            for oh in 0..os.h {
                for ow in 0..os.w {
                    out[os.idx(n, co, oh, ow)] += bias[co];
                }
            }
        }
    }
    Tensor::new(os, out).unwrap()
}

/// Row-by-row matrix multiply oracle: out = x * w^T + bias.
pub fn fully_connected(x: &[Real], rows: usize, inner: usize, w: &[Real], outer: usize, bias: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; rows * outer];
    for m in 0..outer {
        for r in 0..rows {
            let mut acc = 0.0;
            for l in (0..inner).rev() {
                acc += x[r * inner + l] * w[m * inner + l];
            }
            out[r * outer + m] = acc + bias[m];
        }
    }
    out
}

/// Two-layer MLP slice oracle: sigmoid(w2 * relu(w1 * f + b1) + b2).
pub fn mlp_gate(f: &[Real], w1: &[Real], b1: &[Real], w2: &[Real], b2: &[Real], hidden: usize) -> Vec<Real> {
    let len = f.len();
    let mut h = vec![0.0; hidden];
    for m in 0..hidden {
        let mut acc = b1[m];
        for l in 0..len {
            acc += w1[m * len + l] * f[l];
        }
        h[m] = acc.max(0.0);
    }
    let mut g = vec![0.0; len];
    for l in 0..len {
        let mut acc = b2[l];
        for m in 0..hidden {
            acc += w2[l * hidden + m] * h[m];
        }
        g[l] = (1.0 / (1.0 + (-(acc as f64)).exp())) as Real;
    }
    g
}

/// Scalar-loop metric oracle over masked pixels. Thresholds are checked with
/// max(pred/gt, gt/pred) < t; percentages in [0, 100].
pub struct MetricOracle {
    pub rmse: f64,
    pub rel: f64,
    pub delta: Vec<f64>,
}

pub fn metrics(pred: &[Real], gt: &[Real], mask: &[bool], thresholds: &[f64]) -> Option<MetricOracle> {
    let mut n = 0usize;
    let mut se = 0.0f64;
    let mut rel = 0.0f64;
    let mut hits = vec![0usize; thresholds.len()];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        n += 1;
        let p = pred[i] as f64;
        let g = gt[i] as f64;
        se += (p - g) * (p - g);
        rel += (p - g).abs() / g;
        let ratio = (p / g).max(g / p);
        for (j, &t) in thresholds.iter().enumerate() {
            if ratio < t {
                hits[j] += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    Some(MetricOracle {
        rmse: (se / n as f64).sqrt(),
        rel: rel / n as f64,
        delta: hits.iter().map(|&h| 100.0 * h as f64 / n as f64).collect(),
    })
}
