//! Central finite-difference verification of analytic gradients.
//!
//! A check rebuilds the loss with one coordinate of one parameter nudged by
//! +-h and compares (L+ - L-) / 2h against the recorded gradient. Relative
//! error uses an absolute floor so near-zero coordinates do not amplify
//! finite-difference rounding noise into false alarms.

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Session};
use crate::tensor::{Mode, Real, Tensor, Var};

/// Central-difference step; keyed to the precision of the build.
pub fn fd_step() -> Real {
    if cfg!(feature = "f64") {
        1e-5
    } else {
        1e-3
    }
}

/// Gradient tolerance the build can actually meet (1e-4 needs f64).
pub fn default_tol() -> f64 {
    if cfg!(feature = "f64") {
        1e-4
    } else {
        3e-2
    }
}

/// Tolerance for whole blocks. Batch norm centers activations exactly at the
/// leaky-ReLU kink, so single-precision central differences only resolve
/// gross wiring errors there; the 1e-4 verification level requires the f64
/// build.
pub fn block_tol() -> f64 {
    if cfg!(feature = "f64") {
        1e-4
    } else {
        0.5
    }
}

/// Tolerance for comparing two algebraically identical computations.
pub fn oracle_tol() -> f64 {
    if cfg!(feature = "f64") {
        1e-10
    } else {
        3e-5
    }
}

fn rel_floor() -> f64 {
    if cfg!(feature = "f64") {
        1e-3
    } else {
        5e-2
    }
}

/// |a - n| / max(|a|, |n|, floor).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(rel_floor())
}

/// Worst finite-difference disagreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Result of checking a whole block or model.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Check every trainable parameter the loss touches. `build` must construct
/// the same loss from the current parameter values on every call.
pub fn check_params<F>(params: &mut ParamSet, mode: Mode, mut build: F) -> Result<CheckReport>
where
    F: FnMut(&mut Session, &mut ParamSet) -> Result<Var>,
{
    // Analytic pass.
    let mut session = Session::new(mode);
    let loss = build(&mut session, params)?;
    session.backward(loss)?;

    let touched: Vec<String> = session
        .bindings()
        .filter(|(name, _)| params.get(name).map(|p| p.kind.trainable()).unwrap_or(false))
        .map(|(name, _)| name.to_string())
        .collect();

    let mut grads: Vec<(String, Vec<Real>)> = Vec::with_capacity(touched.len());
    for name in &touched {
        let g = session.grad_of(name).ok_or_else(|| {
            Error::graph(format!("no gradient recorded for trainable parameter {name}"))
        })?;
        grads.push((name.clone(), g.to_vec()));
    }
    drop(session);

    let h = fd_step();
    let mut report = CheckReport { params: Vec::new() };
    for (name, analytic) in &grads {
        let base = params.tensor(name)?.clone();
        let mut worst = 0.0f64;
        for i in 0..base.numel() {
            let orig = base.data()[i];

            let mut plus = base.clone();
            plus.data_mut()[i] = orig + h;
            params.set_tensor(name, plus)?;
            let mut s = Session::new(mode);
            let l = build(&mut s, params)?;
            let lp = s.graph.scalar(l)? as f64;

            let mut minus = base.clone();
            minus.data_mut()[i] = orig - h;
            params.set_tensor(name, minus)?;
            let mut s = Session::new(mode);
            let l = build(&mut s, params)?;
            let lm = s.graph.scalar(l)? as f64;

            let numeric = (lp - lm) / (2.0 * h as f64);
            worst = worst.max(rel_err(analytic[i] as f64, numeric));
        }
        params.set_tensor(name, base)?;
        report.params.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            coords: analytic.len(),
        });
    }
    Ok(report)
}

/// Scalar probe: sum(y * fixed_random_weights). Exercises every output
/// element of `y` so no gradient path escapes the check.
pub fn probe_loss(s: &mut Session, y: Var, probe: &Tensor) -> Result<Var> {
    let r = s.input(probe.clone());
    let weighted = s.graph.mul(y, r)?;
    s.graph.sum(weighted)
}

// ── standard block checks ───────────────────────────────────────────
//
// Inputs enter the ParamSet as pseudo-parameters (names under "in."), so the
// finite-difference sweep verifies input gradients along with the weights.

use crate::nn::{AgGconv, AgSc, BnSpec, Ca, DeGConv, GConv, ParamKind, VConv};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Shape;

fn pseudo_input(p: &mut ParamSet, name: &str, shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Result<()> {
    p.insert(name, ParamKind::Weight, Tensor::uniform(shape, rng, lo, hi))
}

fn probe(shape: Shape, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, rng, -1.0, 1.0)
}

/// Gradient checks for every layer block and the losses, on random inputs no
/// larger than (2,4,8,8). Returns (block name, report) pairs.
pub fn standard_checks(seed: u64) -> Result<Vec<(String, CheckReport)>> {
    let mut out = Vec::new();

    // VConv, stride 1.
    {
        let mut rng = Rng::stream(seed, fnv1a(b"vconv"));
        let blk = VConv::new("blk", 3, 4, 3, 1);
        let mut p = ParamSet::new();
        blk.init(&mut p, &mut rng)?;
        pseudo_input(&mut p, "in.x", Shape::new(2, 3, 6, 6), &mut rng, -1.0, 1.0)?;
        let pr = probe(Shape::new(2, 4, 6, 6), &mut rng);
        let report = check_params(&mut p, Mode::Train, |s, p| {
            let x = s.param(p, "in.x")?;
            let y = blk.forward(s, p, x)?;
            probe_loss(s, y, &pr)
        })?;
        out.push(("vconv".to_string(), report));
    }

    // GConv, stride 2.
    {
        let mut rng = Rng::stream(seed, fnv1a(b"gconv"));
        let blk = GConv::new("blk", 2, 4, 3, 2);
        let mut p = ParamSet::new();
        blk.init(&mut p, &mut rng)?;
        pseudo_input(&mut p, "in.x", Shape::new(2, 2, 8, 8), &mut rng, -1.0, 1.0)?;
        let pr = probe(Shape::new(2, 4, 4, 4), &mut rng);
        let report = check_params(&mut p, Mode::Train, |s, p| {
            let x = s.param(p, "in.x")?;
            let y = blk.forward(s, p, x)?;
            probe_loss(s, y, &pr)
        })?;
        out.push(("gconv".to_string(), report));
    }

    // De-GConv, stride 2 upsampling.
    {
        let mut rng = Rng::stream(seed, fnv1a(b"de_gconv"));
        let blk = DeGConv::new("blk", 3, 2, 3, 2);
        let mut p = ParamSet::new();
        blk.init(&mut p, &mut rng)?;
        pseudo_input(&mut p, "in.x", Shape::new(2, 3, 4, 4), &mut rng, -1.0, 1.0)?;
        let pr = probe(Shape::new(2, 2, 8, 8), &mut rng);
        let report = check_params(&mut p, Mode::Train, |s, p| {
            let x = s.param(p, "in.x")?;
            let y = blk.forward(s, p, x)?;
            probe_loss(s, y, &pr)
        })?;
        out.push(("de_gconv".to_string(), report));
    }

    // Contextual attention on 4x4 slices.
    {
        let mut rng = Rng::stream(seed, fnv1a(b"ca"));
        let blk = Ca::new("blk", 16, 2)?;
        let mut p = ParamSet::new();
        blk.init(&mut p, &mut rng)?;
        pseudo_input(&mut p, "in.x", Shape::new(2, 4, 4, 4), &mut rng, -1.5, 1.5)?;
        let pr = probe(Shape::new(2, 4, 4, 4), &mut rng);
        let report = check_params(&mut p, Mode::Train, |s, p| {
            let x = s.param(p, "in.x")?;
            let y = blk.forward(s, p, x)?;
            probe_loss(s, y, &pr)
        })?;
        out.push(("ca".to_string(), report));
    }

    // AG-GConv: depth (2,2,8,8) fused with color (2,3,4,4).
    {
        let mut rng = Rng::stream(seed, fnv1a(b"ag_gconv"));
        let blk = AgGconv::new("blk", 2, 3, 3, 4, 4, 2)?;
        let mut p = ParamSet::new();
        blk.init(&mut p, &mut rng)?;
        pseudo_input(&mut p, "in.depth", Shape::new(2, 2, 8, 8), &mut rng, -1.0, 1.0)?;
        pseudo_input(&mut p, "in.color", Shape::new(2, 3, 4, 4), &mut rng, -1.0, 1.0)?;
        let pr = probe(Shape::new(2, 3, 4, 4), &mut rng);
        let report = check_params(&mut p, Mode::Train, |s, p| {
            let d = s.param(p, "in.depth")?;
            let c = s.param(p, "in.color")?;
            let y = blk.forward(s, p, d, c)?;
            probe_loss(s, y, &pr)
        })?;
        out.push(("ag_gconv".to_string(), report));
    }

    // AG-SC: color and decoder features of equal shape.
    {
        let mut rng = Rng::stream(seed, fnv1a(b"ag_sc"));
        let blk = AgSc::new("blk", 3, 3);
        let mut p = ParamSet::new();
        blk.init(&mut p, &mut rng)?;
        pseudo_input(&mut p, "in.color", Shape::new(2, 3, 6, 6), &mut rng, -1.0, 1.0)?;
        pseudo_input(&mut p, "in.dec", Shape::new(2, 3, 6, 6), &mut rng, -1.0, 1.0)?;
        let pr = probe(Shape::new(2, 3, 6, 6), &mut rng);
        let report = check_params(&mut p, Mode::Train, |s, p| {
            let c = s.param(p, "in.color")?;
            let d = s.param(p, "in.dec")?;
            let y = blk.forward(s, p, c, d)?;
            probe_loss(s, y, &pr)
        })?;
        out.push(("ag_sc".to_string(), report));
    }

    // Batch norm alone, train and eval modes.
    for (label, mode) in [("batch_norm", Mode::Train), ("batch_norm_eval", Mode::Eval)] {
        let mut rng = Rng::stream(seed, fnv1a(label.as_bytes()));
        let bn = BnSpec::new("blk.bn", 3);
        let mut p = ParamSet::new();
        bn.init(&mut p)?;
        pseudo_input(&mut p, "in.x", Shape::new(2, 3, 5, 5), &mut rng, -2.0, 2.0)?;
        let pr = probe(Shape::new(2, 3, 5, 5), &mut rng);
        let bn2 = bn.clone();
        let report = check_params(&mut p, mode, move |s, p| {
            let x = s.param(p, "in.x")?;
            let y = bn2.forward(s, p, x)?;
            probe_loss(s, y, &pr)
        })?;
        out.push((label.to_string(), report));
    }

    // Losses with respect to the prediction. The ground truth sits a smooth
    // ramp away from the prediction so both the Huber corner (|e| = delta)
    // and the edge-term kink (zero gradient difference) stay out of reach of
    // the finite-difference step.
    {
        let mut rng = Rng::stream(seed, fnv1a(b"losses"));
        let shape = Shape::new(1, 1, 6, 6);
        let mut p = ParamSet::new();
        pseudo_input(&mut p, "in.pred", shape, &mut rng, 1.0, 4.0)?;
        let base = p.tensor("in.pred")?.clone();
        let gt = Tensor::from_fn(shape, |i| {
            let (y, x) = (i / 6, i % 6);
            base.data()[i] + 0.05 * y as crate::tensor::Real + 0.065 * x as crate::tensor::Real
        });
        let w = crate::loss::LossWeights::default();
        let report = check_params(&mut p, Mode::Eval, move |s, p| {
            let pred = s.param(p, "in.pred")?;
            let g = s.input(gt.clone());
            crate::loss::total_loss(&mut s.graph, pred, g, &w)
        })?;
        out.push(("losses".to_string(), report));
    }

    Ok(out)
}
