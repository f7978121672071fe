//! Dense compute kernels behind the graph operations.
//!
//! Each output element is produced by exactly one task with a fixed inner
//! summation order, so results are bitwise independent of the parallelism
//! degree. `AGGNET_THREADS` caps the pool size (default: all cores).

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use std::sync::OnceLock;

use super::{Real, Shape};

/// Shared kernel pool. Built once; sized from `AGGNET_THREADS` when set.
pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("AGGNET_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&t| t > 0);
        let mut builder = ThreadPoolBuilder::new();
        if let Some(t) = threads {
            builder = builder.num_threads(t);
        }
        builder.build().expect("failed to build kernel thread pool")
    })
}

// Below this element count the parallel dispatch overhead dominates.
const PAR_THRESHOLD: usize = 4096;

fn run_planes(out: &mut [Real], plane: usize, f: impl Fn(usize, &mut [Real]) + Sync) {
    if out.len() < PAR_THRESHOLD {
        for (pi, chunk) in out.chunks_mut(plane).enumerate() {
            f(pi, chunk);
        }
    } else {
        pool().install(|| {
            out.par_chunks_mut(plane)
                .enumerate()
                .for_each(|(pi, chunk)| f(pi, chunk));
        });
    }
}

/// out(n,co,oh,ow) = bias(co) + sum_{ci,kh,kw} x(n,ci,oh*s-p+kh,ow*s-p+kw) * w(co,ci,kh,kw)
pub fn conv2d_forward(
    x: &[Real],
    xs: Shape,
    w: &[Real],
    ws: Shape,
    bias: Option<&[Real]>,
    stride: usize,
    pad: usize,
    out: &mut [Real],
    os: Shape,
) {
    let k = ws.h;
    let plane = os.h * os.w;
    run_planes(out, plane, |pi, chunk| {
        let n = pi / os.c;
        let co = pi % os.c;
        let b = bias.map_or(0.0, |b| b[co]);
        for oh in 0..os.h {
            for ow in 0..os.w {
                let mut acc = b;
                for ci in 0..xs.c {
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= xs.h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= xs.w as isize {
                                continue;
                            }
                            acc += x[xs.idx(n, ci, ih as usize, iw as usize)]
                                * w[ws.idx(co, ci, kh, kw)];
                        }
                    }
                }
                chunk[oh * os.w + ow] = acc;
            }
        }
    });
}

/// dx(n,ci,ih,iw) += sum_{co,kh,kw} dy(n,co,oh,ow) * w(co,ci,kh,kw)
/// where oh*s = ih + p - kh (and likewise for columns).
pub fn conv2d_backward_input(
    dy: &[Real],
    os: Shape,
    w: &[Real],
    ws: Shape,
    stride: usize,
    pad: usize,
    dx: &mut [Real],
    xs: Shape,
) {
    let k = ws.h;
    let plane = xs.h * xs.w;
    run_planes(dx, plane, |pi, chunk| {
        let n = pi / xs.c;
        let ci = pi % xs.c;
        for ih in 0..xs.h {
            for iw in 0..xs.w {
                let mut acc = 0.0;
                for co in 0..os.c {
                    for kh in 0..k {
                        let t = ih + pad;
                        if t < kh {
                            continue;
                        }
                        let num = t - kh;
                        if num % stride != 0 {
                            continue;
                        }
                        let oh = num / stride;
                        if oh >= os.h {
                            continue;
                        }
                        for kw in 0..k {
                            let t = iw + pad;
                            if t < kw {
                                continue;
                            }
                            let num = t - kw;
                            if num % stride != 0 {
                                continue;
                            }
                            let ow = num / stride;
                            if ow >= os.w {
                                continue;
                            }
                            acc += dy[os.idx(n, co, oh, ow)] * w[ws.idx(co, ci, kh, kw)];
                        }
                    }
                }
                chunk[ih * xs.w + iw] += acc;
            }
        }
    });
}

/// dw(co,ci,kh,kw) += sum_{n,oh,ow} dy(n,co,oh,ow) * x(n,ci,oh*s-p+kh,ow*s-p+kw)
pub fn conv2d_backward_weight(
    dy: &[Real],
    os: Shape,
    x: &[Real],
    xs: Shape,
    stride: usize,
    pad: usize,
    dw: &mut [Real],
    ws: Shape,
) {
    let k = ws.h;
    let plane = ws.c * ws.h * ws.w;
    run_planes(dw, plane, |co, chunk| {
        for ci in 0..ws.c {
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = 0.0;
                    for n in 0..os.n {
                        for oh in 0..os.h {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            for ow in 0..os.w {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= xs.w as isize {
                                    continue;
                                }
                                acc += dy[os.idx(n, co, oh, ow)]
                                    * x[xs.idx(n, ci, ih as usize, iw as usize)];
                            }
                        }
                    }
                    chunk[(ci * k + kh) * k + kw] += acc;
                }
            }
        }
    });
}

pub fn conv2d_backward_bias(dy: &[Real], os: Shape, db: &mut [Real]) {
    for co in 0..os.c {
        let mut acc = 0.0;
        for n in 0..os.n {
            for oh in 0..os.h {
                for ow in 0..os.w {
                    acc += dy[os.idx(n, co, oh, ow)];
                }
            }
        }
        db[co] += acc;
    }
}

/// Transposed-convolution padding that makes the output exactly stride*h.
pub fn deconv_pad(k: usize, stride: usize) -> usize {
    (k.saturating_sub(stride) + 1) / 2
}

/// out(n,co,oh,ow) = bias(co) + sum_{ci,kh,kw} x(n,ci,ih,iw) * w(ci,co,kh,kw)
/// where ih = (oh + p - kh)/s when the division is exact and in range.
/// Output spatial size is stride*h by construction.
pub fn deconv2d_forward(
    x: &[Real],
    xs: Shape,
    w: &[Real],
    ws: Shape,
    bias: Option<&[Real]>,
    stride: usize,
    out: &mut [Real],
    os: Shape,
) {
    let k = ws.h;
    let pad = deconv_pad(k, stride);
    let plane = os.h * os.w;
    run_planes(out, plane, |pi, chunk| {
        let n = pi / os.c;
        let co = pi % os.c;
        let b = bias.map_or(0.0, |b| b[co]);
        for oh in 0..os.h {
            for ow in 0..os.w {
                let mut acc = b;
                for ci in 0..xs.c {
                    for kh in 0..k {
                        let t = oh + pad;
                        if t < kh {
                            continue;
                        }
                        let num = t - kh;
                        if num % stride != 0 {
                            continue;
                        }
                        let ih = num / stride;
                        if ih >= xs.h {
                            continue;
                        }
                        for kw in 0..k {
                            let t = ow + pad;
                            if t < kw {
                                continue;
                            }
                            let num = t - kw;
                            if num % stride != 0 {
                                continue;
                            }
                            let iw = num / stride;
                            if iw >= xs.w {
                                continue;
                            }
                            acc += x[xs.idx(n, ci, ih, iw)] * w[ws.idx(ci, co, kh, kw)];
                        }
                    }
                }
                chunk[oh * os.w + ow] = acc;
            }
        }
    });
}

/// dx(n,ci,ih,iw) += sum_{co,kh,kw} dy(n,co,ih*s-p+kh,iw*s-p+kw) * w(ci,co,kh,kw)
pub fn deconv2d_backward_input(
    dy: &[Real],
    os: Shape,
    w: &[Real],
    ws: Shape,
    stride: usize,
    dx: &mut [Real],
    xs: Shape,
) {
    let k = ws.h;
    let pad = deconv_pad(k, stride);
    let plane = xs.h * xs.w;
    run_planes(dx, plane, |pi, chunk| {
        let n = pi / xs.c;
        let ci = pi % xs.c;
        for ih in 0..xs.h {
            for iw in 0..xs.w {
                let mut acc = 0.0;
                for co in 0..os.c {
                    for kh in 0..k {
                        let oh = (ih * stride + kh) as isize - pad as isize;
                        if oh < 0 || oh >= os.h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ow = (iw * stride + kw) as isize - pad as isize;
                            if ow < 0 || ow >= os.w as isize {
                                continue;
                            }
                            acc += dy[os.idx(n, co, oh as usize, ow as usize)]
                                * w[ws.idx(ci, co, kh, kw)];
                        }
                    }
                }
                chunk[ih * xs.w + iw] += acc;
            }
        }
    });
}

/// dw(ci,co,kh,kw) += sum_{n,ih,iw} x(n,ci,ih,iw) * dy(n,co,ih*s-p+kh,iw*s-p+kw)
pub fn deconv2d_backward_weight(
    dy: &[Real],
    os: Shape,
    x: &[Real],
    xs: Shape,
    stride: usize,
    dw: &mut [Real],
    ws: Shape,
) {
    let k = ws.h;
    let pad = deconv_pad(k, stride);
    let plane = ws.c * ws.h * ws.w;
    run_planes(dw, plane, |ci, chunk| {
        for co in 0..ws.c {
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = 0.0;
                    for n in 0..xs.n {
                        for ih in 0..xs.h {
                            let oh = (ih * stride + kh) as isize - pad as isize;
                            if oh < 0 || oh >= os.h as isize {
                                continue;
                            }
                            for iw in 0..xs.w {
                                let ow = (iw * stride + kw) as isize - pad as isize;
                                if ow < 0 || ow >= os.w as isize {
                                    continue;
                                }
                                acc += x[xs.idx(n, ci, ih, iw)]
                                    * dy[os.idx(n, co, oh as usize, ow as usize)];
                            }
                        }
                    }
                    chunk[(co * k + kh) * k + kw] += acc;
                }
            }
        }
    });
}

/// out(r,m) = bias(m) + sum_l x(r,l) * w(m,l)
pub fn fc_forward(
    x: &[Real],
    _rows: usize,
    inner: usize,
    w: &[Real],
    outer: usize,
    bias: Option<&[Real]>,
    out: &mut [Real],
) {
    run_planes(out, outer, |r, chunk| {
        let xr = &x[r * inner..(r + 1) * inner];
        for (m, o) in chunk.iter_mut().enumerate() {
            let wm = &w[m * inner..(m + 1) * inner];
            let mut acc = bias.map_or(0.0, |b| b[m]);
            for l in 0..inner {
                acc += xr[l] * wm[l];
            }
            *o = acc;
        }
    });
}

pub fn fc_backward_input(
    dy: &[Real],
    _rows: usize,
    outer: usize,
    w: &[Real],
    inner: usize,
    dx: &mut [Real],
) {
    run_planes(dx, inner, |r, chunk| {
        let dyr = &dy[r * outer..(r + 1) * outer];
        for (l, d) in chunk.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in 0..outer {
                acc += dyr[m] * w[m * inner + l];
            }
            *d += acc;
        }
    });
}

pub fn fc_backward_weight(
    dy: &[Real],
    rows: usize,
    outer: usize,
    x: &[Real],
    inner: usize,
    dw: &mut [Real],
) {
    run_planes(dw, inner, |m, chunk| {
        for (l, d) in chunk.iter_mut().enumerate() {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += dy[r * outer + m] * x[r * inner + l];
            }
            *d += acc;
        }
    });
}

pub fn fc_backward_bias(dy: &[Real], rows: usize, outer: usize, db: &mut [Real]) {
    for m in 0..outer {
        let mut acc = 0.0;
        for r in 0..rows {
            acc += dy[r * outer + m];
        }
        db[m] += acc;
    }
}
