//! Training losses: Huber reconstruction error plus edge persistence.
//!
//! Both terms are sums over pixels; `total_loss` normalizes by pixel count so
//! the weights keep their meaning across resolutions.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_delta: Real,
    pub lambda_p: Real,
    pub huber_delta: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_delta: 0.7,
            lambda_p: 0.3,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_delta < 0.0 || self.lambda_p < 0.0 {
            return Err(Error::config("loss weights must be non-negative".to_string()));
        }
        if self.lambda_delta + self.lambda_p <= 0.0 {
            return Err(Error::config("at least one loss weight must be positive".to_string()));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::config("huber delta must be positive".to_string()));
        }
        Ok(())
    }
}

/// Sum over pixels of the Huber penalty of pred - gt.
pub fn huber_sum(g: &mut Graph, pred: Var, gt: Var, delta: Real) -> Result<Var> {
    let e = g.huber_elem(pred, gt, delta)?;
    g.sum(e)
}

/// Edge persistence: L1 difference of forward-difference gradients, vertical
/// and horizontal, summed over the interior.
pub fn edge_sum(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let pv = g.diff_rows(pred)?;
    let gv = g.diff_rows(gt)?;
    let ph = g.diff_cols(pred)?;
    let gh = g.diff_cols(gt)?;
    let dv = g.abs_diff(pv, gv)?;
    let dh = g.abs_diff(ph, gh)?;
    let sv = g.sum(dv)?;
    let sh = g.sum(dh)?;
    g.add(sv, sh)
}

/// lambda_delta * huber + lambda_p * edge, divided by the pixel count.
pub fn total_loss(g: &mut Graph, pred: Var, gt: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let count = g.value(pred).numel() as Real;
    let h = huber_sum(g, pred, gt, w.huber_delta)?;
    let e = edge_sum(g, pred, gt)?;
    let h = g.scale(h, w.lambda_delta)?;
    let e = g.scale(e, w.lambda_p)?;
    let t = g.add(h, e)?;
    g.scale(t, 1.0 / count)
}

/// Scalar convenience wrappers for tests and reporting (throwaway graph).
pub fn huber_loss_value(pred: &Tensor, gt: &Tensor, delta: Real) -> Result<Real> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let l = huber_sum(&mut g, p, t, delta)?;
    g.scalar(l)
}

pub fn edge_loss_value(pred: &Tensor, gt: &Tensor) -> Result<Real> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let l = edge_sum(&mut g, p, t)?;
    g.scalar(l)
}

pub fn total_loss_value(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Real> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let l = total_loss(&mut g, p, t, w)?;
    g.scalar(l)
}
