//! Depth completion metrics: RMSE, absolute relative error, and threshold
//! accuracies delta_t over masked pixels.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Thresholds 1.10, 1.25, 1.25^2, 1.25^3.
pub const DELTA_THRESHOLDS: [f64; 4] = [1.10, 1.25, 1.5625, 1.953125];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// Root mean squared error, meters.
    pub rmse: f64,
    /// Mean |pred - gt| / gt.
    pub rel: f64,
    /// Percentage of pixels with max(pred/gt, gt/pred) < t, per threshold.
    pub delta: [f64; 4],
}

impl MetricReport {
    /// Single-line key=value form used by the CLI and the training log.
    pub fn line(&self) -> String {
        format!(
            "rmse={:.6} rel={:.6} d110={:.3} d125={:.3} d156={:.3} d195={:.3}",
            self.rmse, self.rel, self.delta[0], self.delta[1], self.delta[2], self.delta[3]
        )
    }
}

/// Streaming accumulator so dataset-level metrics pool pixels across samples.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    count: u64,
    sq_err: f64,
    rel: f64,
    hits: [u64; 4],
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate pixels where `mask` is true; those must have gt > 0.
    pub fn add(&mut self, pred: &[Real], gt: &[Real], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() != mask.len() {
            return Err(Error::shape(format!(
                "metric inputs differ in length: pred {}, gt {}, mask {}",
                pred.len(),
                gt.len(),
                mask.len()
            )));
        }
        for i in 0..pred.len() {
            if !mask[i] {
                continue;
            }
            let g = gt[i] as f64;
            if g <= 0.0 {
                return Err(Error::numeric(
                    "metric mask selects a pixel with non-positive ground truth".to_string(),
                ));
            }
            let p = pred[i] as f64;
            self.count += 1;
            self.sq_err += (p - g) * (p - g);
            self.rel += (p - g).abs() / g;
            let ratio = (p / g).max(g / p);
            for (j, &t) in DELTA_THRESHOLDS.iter().enumerate() {
                if ratio < t {
                    self.hits[j] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> u64 {
        self.count
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.count as f64;
        let mut delta = [0.0; 4];
        for (d, &h) in delta.iter_mut().zip(&self.hits) {
            *d = 100.0 * h as f64 / n;
        }
        Ok(MetricReport {
            rmse: (self.sq_err / n).sqrt(),
            rel: self.rel / n,
            delta,
        })
    }
}

/// Metrics over one prediction/ground-truth pair.
pub fn evaluate(pred: &[Real], gt: &[Real], mask: &[bool]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.add(pred, gt, mask)?;
    acc.finish()
}
