//! SGD training with momentum and weight decay, a reduce-on-plateau learning
//! rate schedule, and the scheme-ablation runner.
//!
//! Fixed seed and thread-independent kernels make every trajectory
//! reproducible: two runs with the same seed and config produce bitwise
//! identical parameters.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::{save_checkpoint_file, AggNet, ModelConfig, Scheme};
use crate::nn::{ParamKind, ParamSet, Session};
use crate::rng::{fnv1a, mix, Rng};
use crate::synth::dataset::batch_of;
use crate::synth::{crop_resize, RgbdSample};
use crate::tensor::{Mode, Real, Shape, Tensor};

pub const LR_MAX: f64 = 1e-2;
pub const LR_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    /// Relative improvement below which an epoch counts as flat.
    pub improve_tol: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-2,
            momentum: 0.95,
            weight_decay: 1e-4,
            plateau_patience: 5,
            plateau_factor: 0.3,
            min_lr: LR_MIN,
            improve_tol: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(LR_MIN..=LR_MAX).contains(&self.lr) {
            return Err(Error::config(format!(
                "initial learning rate {} outside [{LR_MIN}, {LR_MAX}]",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)".to_string()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative".to_string()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor <= 0.0 {
            return Err(Error::config("plateau factor must be in (0, 1)".to_string()));
        }
        if self.min_lr < LR_MIN {
            return Err(Error::config(format!("min_lr must be at least {LR_MIN}")));
        }
        Ok(())
    }
}

/// Optimizer state: step/epoch counters, momentum buffers, current learning
/// rate, and the plateau tracker.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub best_val: f64,
    pub plateau_count: usize,
    pub seed: u64,
    velocity: IndexMap<String, Tensor>,
}

impl TrainState {
    pub fn new(seed: u64, lr: f64) -> Result<Self> {
        if !(LR_MIN..=LR_MAX).contains(&lr) {
            return Err(Error::config(format!(
                "learning rate {lr} outside [{LR_MIN}, {LR_MAX}]"
            )));
        }
        Ok(TrainState {
            step: 0,
            epoch: 0,
            lr,
            best_val: f64::INFINITY,
            plateau_count: 0,
            seed,
            velocity: IndexMap::new(),
        })
    }

    /// Header line plus the momentum buffers in the flat parameter format.
    pub fn save(&self, w: &mut dyn Write) -> Result<()> {
        // JSON has no infinity literal; null stands for "no best yet".
        let header = format!(
            "{{\"step\":{},\"epoch\":{},\"lr\":{},\"best_val\":{},\"plateau_count\":{},\"seed\":{}}}\n",
            self.step,
            self.epoch,
            self.lr,
            if self.best_val.is_finite() {
                self.best_val.to_string()
            } else {
                "null".to_string()
            },
            self.plateau_count,
            self.seed
        );
        w.write_all(header.as_bytes())
            .map_err(|e| Error::io("<state>", e))?;
        let mut blob = ParamSet::new();
        for (name, t) in &self.velocity {
            blob.insert(name, ParamKind::Weight, t.clone())?;
        }
        blob.save(w)
    }

    /// Restore from `save`; `params` supplies the velocity shapes.
    pub fn load(r: &mut dyn Read, params: &ParamSet) -> Result<Self> {
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match r.read(&mut byte) {
                Ok(0) => return Err(Error::parse("state missing header line", header.len())),
                Ok(_) => {
                    if byte[0] == b'\n' {
                        break;
                    }
                    header.push(byte[0]);
                }
                Err(e) => return Err(Error::io("<state>", e)),
            }
        }
        let text = String::from_utf8(header)
            .map_err(|_| Error::parse("state header is not UTF-8", 0))?;
        let json: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("bad state header: {e}"), 0))?;
        let field = |k: &str| -> Result<f64> {
            json.get(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::parse(format!("state header missing {k}"), 0))
        };
        let best_val = json
            .get("best_val")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::INFINITY);

        // The velocity blob may cover fewer entries than the model has
        // parameters (ones that never received a gradient), so it is parsed
        // entry by entry instead of through a fixed-layout ParamSet.
        let mut probe = Vec::new();
        r.read_to_end(&mut probe).map_err(|e| Error::io("<state>", e))?;
        let mut velocity = IndexMap::new();
        for (name, t) in read_named_entries(&probe)? {
            if let Ok(p) = params.get(&name) {
                if p.tensor.shape() != t.shape() {
                    return Err(Error::shape(format!(
                        "velocity for {name} has shape {}, parameter has {}",
                        t.shape(),
                        p.tensor.shape()
                    )));
                }
            }
            velocity.insert(name, t);
        }
        Ok(TrainState {
            step: field("step")? as u64,
            epoch: field("epoch")? as u64,
            lr: field("lr")?,
            best_val,
            plateau_count: field("plateau_count")? as usize,
            seed: field("seed")? as u64,
            velocity,
        })
    }
}

/// Parse the flat parameter blob into (name, tensor) pairs without a target
/// set; used when the stored entries are a subset of the model parameters.
fn read_named_entries(data: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if data.len() < 12 || &data[..4] != b"AGGN" {
        return Err(Error::parse("bad state blob magic", 0));
    }
    let count = u32::from_le_bytes([data[8], data[9], data[10], data[11]]) as usize;
    let mut pos = 12usize;
    let mut out = Vec::with_capacity(count);
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::parse("truncated state blob", *pos));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, len)?.to_vec())
            .map_err(|_| Error::parse("state entry name is not UTF-8", pos))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = [1usize; 4];
        for d in &mut dims[4 - rank..] {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut vals = vec![0.0 as Real; shape.numel()];
        for v in &mut vals {
            *v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as Real;
        }
        out.push((name, Tensor::new(shape, vals)?));
    }
    Ok(out)
}

/// One momentum-SGD update: v <- momentum*v + grad + wd*param, then
/// param <- param - lr*v. Gradients are consumed by the call.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: IndexMap<String, Vec<Real>>,
    state: &mut TrainState,
    hp: &SgdConfig,
) -> Result<()> {
    for (name, g) in grads {
        let prm = params.get(&name)?;
        if !prm.kind.trainable() {
            return Err(Error::graph(format!(
                "gradient supplied for non-trainable parameter {name}"
            )));
        }
        if g.len() != prm.tensor.numel() {
            return Err(Error::shape(format!(
                "gradient for {name} has {} elements, parameter has {}",
                g.len(),
                prm.tensor.numel()
            )));
        }
        let decay = if prm.kind.decays() { hp.weight_decay } else { 0.0 } as Real;
        let momentum = hp.momentum as Real;
        let lr = state.lr as Real;

        let shape = prm.tensor.shape();
        let mut velocity = state
            .velocity
            .shift_remove(&name)
            .unwrap_or_else(|| Tensor::zeros(shape));
        let mut new_param = prm.tensor.clone();
        {
            let v = velocity.data_mut();
            let pv = new_param.data_mut();
            for i in 0..v.len() {
                v[i] = momentum * v[i] + g[i] + decay * pv[i];
                pv[i] -= lr * v[i];
            }
        }
        state.velocity.insert(name.clone(), velocity);
        params.set_tensor(&name, new_param)?;
    }
    Ok(())
}

/// Reduce-on-plateau: when the validation loss fails to improve by more than
/// `improve_tol` (relative) for `patience` epochs, the learning rate drops to
/// `factor` of itself, floored at `min_lr`. Returns the new rate.
pub fn plateau_schedule(state: &mut TrainState, val_loss: f64, hp: &SgdConfig) -> f64 {
    let improved = if state.best_val.is_finite() {
        val_loss < state.best_val * (1.0 - hp.improve_tol)
    } else {
        true
    };
    if improved {
        state.best_val = val_loss;
        state.plateau_count = 0;
    } else {
        state.plateau_count += 1;
        if state.plateau_count >= hp.plateau_patience {
            state.lr = (state.lr * hp.plateau_factor).max(hp.min_lr);
            state.plateau_count = 0;
        }
    }
    state.lr
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub augment: bool,
    pub min_crop_scale: f64,
    /// When set, best.ckpt and an append-only train.log are written here.
    pub out_dir: Option<PathBuf>,
    /// Print log lines to stdout as they happen.
    pub verbose: bool,
    /// Evaluate the validation split every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch: 8,
            augment: false,
            min_crop_scale: 0.7,
            out_dir: None,
            verbose: false,
            eval_every: 1,
        }
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation loss.
    pub best_params: ParamSet,
    /// Parameters at the end of training.
    pub final_params: ParamSet,
    pub state: TrainState,
    pub log: Vec<String>,
    /// Validation metrics at the last evaluation.
    pub val_metrics: Option<MetricReport>,
}

/// Driver holding the model, parameters, and optimizer state.
pub struct Trainer<'a> {
    pub net: &'a AggNet,
    pub params: ParamSet,
    pub state: TrainState,
    pub sgd: SgdConfig,
    weights: LossWeights,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a AggNet, params: ParamSet, seed: u64, sgd: SgdConfig) -> Result<Self> {
        sgd.validate()?;
        let weights = net.config().loss_weights();
        weights.validate()?;
        Ok(Trainer {
            net,
            params,
            state: TrainState::new(seed, sgd.lr)?,
            sgd,
            weights,
        })
    }

    /// One optimization step over a batch of samples. Returns the loss.
    pub fn step(&mut self, samples: &[&RgbdSample]) -> Result<f64> {
        let (batch, gt) = batch_of(samples)?;
        let mut s = Session::new(Mode::Train);
        let pred = self.net.forward(&mut s, &mut self.params, &batch)?;
        let gt_var = s.input(gt);
        let loss = total_loss(&mut s.graph, pred, gt_var, &self.weights)?;
        let loss_value = s.graph.scalar(loss)? as f64;
        if !loss_value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss {loss_value} at step {} (seed {})",
                self.state.step, self.state.seed
            )));
        }
        s.backward(loss)?;

        let mut grads: IndexMap<String, Vec<Real>> = IndexMap::new();
        for (name, var) in s.bindings() {
            let prm = self.params.get(name)?;
            if !prm.kind.trainable() {
                continue;
            }
            match s.graph.grad(var) {
                Some(g) => {
                    grads.insert(name.to_string(), g.to_vec());
                }
                None => {
                    // The color branch of the fusion-free scheme is computed
                    // but feeds nothing; every other miss is a wiring bug.
                    let exempt = self.net.config().scheme == Scheme::A && name.starts_with("color.");
                    if !exempt {
                        return Err(Error::graph(format!(
                            "trainable parameter {name} received no gradient"
                        )));
                    }
                }
            }
        }
        drop(s);
        sgd_step(&mut self.params, grads, &mut self.state, &self.sgd)?;
        self.state.step += 1;
        Ok(loss_value)
    }

    /// Mean loss and pooled metrics over a sample list (eval mode).
    pub fn evaluate(&mut self, samples: &[&RgbdSample], batch: usize) -> Result<(f64, MetricReport)> {
        evaluate_model(self.net, &mut self.params, samples, batch)
    }

    pub fn save_state(&self, w: &mut dyn Write) -> Result<()> {
        self.state.save(w)
    }

    pub fn load_state(&mut self, r: &mut dyn Read) -> Result<()> {
        self.state = TrainState::load(r, &self.params)?;
        Ok(())
    }
}

/// Forward a sample list in eval mode; mean total loss plus pooled metrics.
pub fn evaluate_model(
    net: &AggNet,
    params: &mut ParamSet,
    samples: &[&RgbdSample],
    batch: usize,
) -> Result<(f64, MetricReport)> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty sample list".to_string()));
    }
    let weights = net.config().loss_weights();
    let mut acc = MetricAccumulator::new();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let (b, gt) = batch_of(chunk)?;
        let mut s = Session::new(Mode::Eval);
        let pred = net.forward(&mut s, params, &b)?;
        let gt_var = s.input(gt.clone());
        let loss = total_loss(&mut s.graph, pred, gt_var, &weights)?;
        loss_sum += s.graph.scalar(loss)? as f64;
        batches += 1;
        let pv = s.graph.value(pred);
        let mask: Vec<bool> = gt.data().iter().map(|&g| g > 0.0).collect();
        acc.add(pv.data(), gt.data(), &mask)?;
    }
    Ok((loss_sum / batches as f64, acc.finish()?))
}

/// Deterministic 90/10 train/val partition by index when the corpus has no
/// separate validation split.
pub fn carve_validation(samples: &[RgbdSample]) -> (Vec<&RgbdSample>, Vec<&RgbdSample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if samples.len() >= 10 && i % 10 == 9 {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    if val.is_empty() {
        // Tiny corpora reuse the training set for the plateau signal.
        val = train.clone();
    }
    (train, val)
}

/// Full training loop: shuffled batches, per-epoch validation, plateau
/// schedule, best-checkpoint tracking.
pub fn train(
    net: &AggNet,
    params: ParamSet,
    train_set: &[&RgbdSample],
    val_set: &[&RgbdSample],
    seed: u64,
    sgd: SgdConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::config("training set is empty".to_string()));
    }
    let mut trainer = Trainer::new(net, params, seed, sgd)?;
    let mut log = Vec::new();
    let mut best_params = trainer.params.clone();
    let mut best_val = f64::INFINITY;
    let mut val_metrics = None;

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        save_checkpoint_file(&dir.join("best.ckpt"), net.config(), &best_params)?;
    }

    for epoch in 1..=opts.epochs {
        trainer.state.epoch = epoch as u64;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = Rng::stream(seed, mix(fnv1a(b"shuffle"), epoch as u64));
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(opts.batch.max(1)) {
            let mut aug_storage;
            let batch_samples: Vec<&RgbdSample> = if opts.augment {
                let mut rng =
                    Rng::stream(seed, mix(fnv1a(b"augment"), trainer.state.step));
                aug_storage = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    aug_storage.push(crop_resize(train_set[i], &mut rng, opts.min_crop_scale)?);
                }
                aug_storage.iter().collect()
            } else {
                chunk.iter().map(|&i| train_set[i]).collect()
            };
            epoch_loss += trainer.step(&batch_samples)?;
            steps += 1;
        }
        epoch_loss /= steps.max(1) as f64;

        if epoch % opts.eval_every.max(1) == 0 || epoch == opts.epochs {
            let (val_loss, report) = trainer.evaluate(val_set, opts.batch)?;
            let lr = plateau_schedule(&mut trainer.state, val_loss, &trainer.sgd.clone());
            let line = format!(
                "epoch={epoch} step={} lr={:.6} loss={:.6} rmse={:.6} rel={:.6} d110={:.3}",
                trainer.state.step, lr, epoch_loss, report.rmse, report.rel, report.delta[0]
            );
            if opts.verbose {
                println!("{line}");
            }
            if let Some(dir) = &opts.out_dir {
                append_log(&dir.join("train.log"), &line)?;
            }
            log.push(line);
            if val_loss < best_val {
                best_val = val_loss;
                best_params = trainer.params.clone();
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint_file(&dir.join("best.ckpt"), net.config(), &best_params)?;
                }
            }
            val_metrics = Some(report);
        }
    }

    Ok(TrainOutcome {
        best_params,
        final_params: trainer.params,
        state: trainer.state,
        log,
        val_metrics,
    })
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

// ── ablations ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub scheme: Scheme,
    pub rmse: f64,
    pub rel: f64,
    pub d110: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, scheme: Scheme) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }
}

impl std::fmt::Display for AblationTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "scheme  rmse    rel     d110   (medians over seeds)")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}       {:.4}  {:.4}  {:5.1}",
                r.scheme, r.rmse, r.rel, r.d110
            )?;
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Train each scheme under identical budgets for every seed; report
/// per-scheme medians of the test metrics, shaped like the pipeline table.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &ModelConfig,
    schemes: &[Scheme],
    train_set: &[RgbdSample],
    test_set: &[RgbdSample],
    seeds: &[u64],
    sgd: SgdConfig,
    opts: &TrainOptions,
    verbose: bool,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed".to_string()));
    }
    let (tr, val) = carve_validation(train_set);
    let test_refs: Vec<&RgbdSample> = test_set.iter().collect();
    let mut rows = Vec::new();
    for &scheme in schemes {
        let cfg = ModelConfig { scheme, ..*base };
        let net = AggNet::new(cfg)?;
        let mut rmses = Vec::new();
        let mut rels = Vec::new();
        let mut d110s = Vec::new();
        for &seed in seeds {
            let params = net.init_params(seed)?;
            let outcome = train(&net, params, &tr, &val, seed, sgd, opts)?;
            let mut best = outcome.best_params;
            let (_, report) = evaluate_model(&net, &mut best, &test_refs, opts.batch)?;
            if verbose {
                println!("scheme {scheme} seed {seed}: {}", report.line());
            }
            rmses.push(report.rmse);
            rels.push(report.rel);
            d110s.push(report.delta[0]);
        }
        rows.push(AblationRow {
            scheme,
            rmse: median(&mut rmses),
            rel: median(&mut rels),
            d110: median(&mut d110s),
            seeds: seeds.len(),
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_identity_when_everything_is_zero() {
        let mut p = ParamSet::new();
        p.insert("x", ParamKind::Weight, Tensor::ones(Shape::new(1, 1, 1, 1)))
            .unwrap();
        let mut state = TrainState::new(0, 1e-2).unwrap();
        let hp = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), vec![0.0 as Real]);
        sgd_step(&mut p, grads, &mut state, &hp).unwrap();
        assert_eq!(p.tensor("x").unwrap().data()[0], 1.0);
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = ParamSet::new();
        p.insert("x", ParamKind::Weight, Tensor::ones(Shape::new(1, 1, 1, 1)))
            .unwrap();
        let mut state = TrainState::new(0, 1e-2).unwrap();
        state.lr = 0.1;
        let hp = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), vec![1.0 as Real]);
        sgd_step(&mut p, grads, &mut state, &hp).unwrap();
        let got = p.tensor("x").unwrap().data()[0];
        assert!((got - 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        // Two steps of v <- m v + g + wd p; p <- p - lr v, against a scalar
        // recurrence evaluated in f64.
        let (m, wd, lr) = (0.95f64, 1e-4f64, 0.01f64);
        let g1 = 0.3f64;
        let g2 = -0.2f64;
        let mut p_ref = 1.0f64;
        let mut v_ref = 0.0f64;
        for g in [g1, g2] {
            v_ref = m * v_ref + g + wd * p_ref;
            p_ref -= lr * v_ref;
        }

        let mut p = ParamSet::new();
        p.insert("x", ParamKind::Weight, Tensor::ones(Shape::new(1, 1, 1, 1)))
            .unwrap();
        let mut state = TrainState::new(0, lr).unwrap();
        let hp = SgdConfig {
            momentum: m,
            weight_decay: wd,
            lr,
            ..SgdConfig::default()
        };
        for g in [g1, g2] {
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), vec![g as Real]);
            sgd_step(&mut p, grads, &mut state, &hp).unwrap();
        }
        let got = p.tensor("x").unwrap().data()[0] as f64;
        let tol = if cfg!(feature = "f64") { 1e-12 } else { 1e-6 };
        assert!((got - p_ref).abs() < tol, "{got} vs {p_ref}");
    }

    #[test]
    fn gradient_for_non_trainable_is_contract_violation() {
        let mut p = ParamSet::new();
        p.insert("bn.running_mean", ParamKind::BnMean, Tensor::zeros(Shape::new(1, 1, 1, 1)))
            .unwrap();
        let mut state = TrainState::new(0, 1e-2).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("bn.running_mean".to_string(), vec![1.0 as Real]);
        let err = sgd_step(&mut p, grads, &mut state, &SgdConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn plateau_keeps_lr_on_improvement() {
        let hp = SgdConfig::default();
        let mut state = TrainState::new(0, 1e-2).unwrap();
        let mut loss = 1.0;
        for _ in 0..20 {
            plateau_schedule(&mut state, loss, &hp);
            loss *= 0.9;
        }
        assert_eq!(state.lr, 1e-2);
    }

    #[test]
    fn plateau_decay_simulation() {
        // Flat losses with patience 2: two decays in four epochs once the
        // baseline is established, 0.01 -> 0.003 -> 0.0009.
        let hp = SgdConfig {
            plateau_patience: 2,
            ..SgdConfig::default()
        };
        let mut state = TrainState::new(0, 1e-2).unwrap();
        plateau_schedule(&mut state, 1.0, &hp); // establishes best
        for _ in 0..4 {
            plateau_schedule(&mut state, 1.0, &hp);
        }
        assert!((state.lr - 0.0009).abs() < 1e-12);
        // And the floor holds no matter how long the plateau lasts.
        for _ in 0..40 {
            plateau_schedule(&mut state, 1.0, &hp);
        }
        assert!(state.lr >= LR_MIN - 1e-15);
    }

    #[test]
    fn lr_bounds_validated() {
        assert!(TrainState::new(0, 0.5).is_err());
        assert!(TrainState::new(0, 1e-5).is_err());
        assert!(TrainState::new(0, 1e-2).is_ok());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
