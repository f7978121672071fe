//! Layer blocks: VConv units, gated (de-)convolutions, contextual attention,
//! and the attention-guided fusion modules built from them.
//!
//! Blocks are descriptors — they carry parameter names and dimensions, while
//! the values live in a [`ParamSet`]. A forward pass runs inside a
//! [`Session`], which owns the op graph and remembers which graph variable
//! each parameter was bound to, so gradients can be read back by name after
//! `backward`.

pub mod params;

pub use params::{fc_uniform, kaiming_uniform, Param, ParamKind, ParamSet};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Mode, Real, Shape, Tensor, Var};

/// Default negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: Real = 0.2;

/// One forward/backward pass: the graph plus the name -> variable bindings
/// of every parameter touched so far.
pub struct Session {
    pub graph: Graph,
    pub mode: Mode,
    bindings: IndexMap<String, Var>,
}

impl Session {
    pub fn new(mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            mode,
            bindings: IndexMap::new(),
        }
    }

    /// Bind a named parameter into the graph (once per session).
    pub fn param(&mut self, p: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let prm = p.get(name)?;
        let v = self.graph.leaf(prm.tensor.clone(), prm.kind.trainable());
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    /// Feed a non-trainable input tensor.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradient of a bound parameter, if backward reached it.
    pub fn grad_of(&self, name: &str) -> Option<&[Real]> {
        self.bindings.get(name).and_then(|&v| self.graph.grad(v))
    }

    /// All parameter bindings made during this session.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

// ── primitive specs ─────────────────────────────────────────────────

/// A 2-D convolution with bias; parameters `{name}.w` and `{name}.b`.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng, bias_value: Real) -> Result<()> {
        let ws = Shape::new(self.c_out, self.c_in, self.k, self.k);
        let fan_in = self.c_in * self.k * self.k;
        p.insert(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            kaiming_uniform(ws, fan_in, LEAKY_SLOPE as f64, rng),
        )?;
        p.insert(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            Tensor::full(Shape::new(1, self.c_out, 1, 1), bias_value),
        )
    }

    pub fn forward(&self, s: &mut Session, p: &ParamSet, x: Var) -> Result<Var> {
        let w = s.param(p, &format!("{}.w", self.name))?;
        let b = s.param(p, &format!("{}.b", self.name))?;
        s.graph.conv2d(x, w, Some(b), self.stride, self.k / 2)
    }
}

/// A transposed convolution with bias; weight layout (c_in, c_out, k, k).
#[derive(Clone, Debug)]
pub struct DeconvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl DeconvSpec {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        DeconvSpec {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        let ws = Shape::new(self.c_in, self.c_out, self.k, self.k);
        let fan_in = self.c_in * self.k * self.k;
        p.insert(
            &format!("{}.w", self.name),
            ParamKind::Weight,
            kaiming_uniform(ws, fan_in, LEAKY_SLOPE as f64, rng),
        )?;
        p.insert(
            &format!("{}.b", self.name),
            ParamKind::Bias,
            Tensor::zeros(Shape::new(1, self.c_out, 1, 1)),
        )
    }

    pub fn forward(&self, s: &mut Session, p: &ParamSet, x: Var) -> Result<Var> {
        let w = s.param(p, &format!("{}.w", self.name))?;
        let b = s.param(p, &format!("{}.b", self.name))?;
        s.graph.deconv2d(x, w, Some(b), self.stride)
    }
}

/// Batch normalization; parameters `{name}.gamma`, `{name}.beta` plus the
/// running statistics.
#[derive(Clone, Debug)]
pub struct BnSpec {
    pub name: String,
    pub c: usize,
}

impl BnSpec {
    pub fn new(name: impl Into<String>, c: usize) -> Self {
        BnSpec { name: name.into(), c }
    }

    pub fn init(&self, p: &mut ParamSet) -> Result<()> {
        let s = Shape::new(1, self.c, 1, 1);
        p.insert(&format!("{}.gamma", self.name), ParamKind::BnGamma, Tensor::ones(s))?;
        p.insert(&format!("{}.beta", self.name), ParamKind::BnBeta, Tensor::zeros(s))?;
        p.insert(&format!("{}.running_mean", self.name), ParamKind::BnMean, Tensor::zeros(s))?;
        p.insert(&format!("{}.running_var", self.name), ParamKind::BnVar, Tensor::ones(s))
    }

    /// Train mode updates the running statistics inside `p`.
    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, x: Var) -> Result<Var> {
        let gamma = s.param(p, &format!("{}.gamma", self.name))?;
        let beta = s.param(p, &format!("{}.beta", self.name))?;
        let stats = p.bn_stats(&self.name)?;
        let (y, new_stats) = s.graph.batch_norm(x, gamma, beta, &stats, s.mode)?;
        if s.mode == Mode::Train {
            p.set_bn_stats(&self.name, &new_stats)?;
        }
        Ok(y)
    }
}

// ── composite blocks ────────────────────────────────────────────────

/// Vanilla convolution unit: conv -> batch norm -> leaky ReLU.
#[derive(Clone, Debug)]
pub struct VConv {
    pub conv: ConvSpec,
    pub bn: BnSpec,
    pub slope: Real,
}

impl VConv {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        VConv {
            conv: ConvSpec::new(format!("{prefix}.conv"), c_in, c_out, k, stride),
            bn: BnSpec::new(format!("{prefix}.bn"), c_out),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.conv.init(p, rng, 0.0)?;
        self.bn.init(p)
    }

    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, p, x)?;
        let y = self.bn.forward(s, p, y)?;
        s.graph.leaky_relu(y, self.slope)
    }
}

/// Vanilla transposed-convolution unit: deconv -> batch norm -> leaky ReLU.
#[derive(Clone, Debug)]
pub struct VDeconv {
    pub deconv: DeconvSpec,
    pub bn: BnSpec,
    pub slope: Real,
}

impl VDeconv {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        VDeconv {
            deconv: DeconvSpec::new(format!("{prefix}.conv"), c_in, c_out, k, stride),
            bn: BnSpec::new(format!("{prefix}.bn"), c_out),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.deconv.init(p, rng)?;
        self.bn.init(p)
    }

    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, x: Var) -> Result<Var> {
        let y = self.deconv.forward(s, p, x)?;
        let y = self.bn.forward(s, p, y)?;
        s.graph.leaky_relu(y, self.slope)
    }
}

/// Gated convolution: the feature path is a VConv, the gate path a parallel
/// sigmoid-only convolution screening unreliable features.
#[derive(Clone, Debug)]
pub struct GConv {
    pub feat: VConv,
    pub gate: ConvSpec,
}

impl GConv {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        GConv {
            feat: VConv::new(prefix, c_in, c_out, k, stride),
            gate: ConvSpec::new(format!("{prefix}.gate"), c_in, c_out, k, stride),
        }
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.feat.init(p, rng)?;
        self.gate.init(p, rng, 0.0)
    }

    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, x: Var) -> Result<Var> {
        let f = self.feat.forward(s, p, x)?;
        let g = self.gate.forward(s, p, x)?;
        let g = s.graph.sigmoid(g)?;
        s.graph.mul(f, g)
    }
}

/// Gated transposed convolution for decoder upsampling.
#[derive(Clone, Debug)]
pub struct DeGConv {
    pub feat: VDeconv,
    pub gate: DeconvSpec,
}

impl DeGConv {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        DeGConv {
            feat: VDeconv::new(prefix, c_in, c_out, k, stride),
            gate: DeconvSpec::new(format!("{prefix}.gate"), c_in, c_out, k, stride),
        }
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.feat.init(p, rng)?;
        self.gate.init(p, rng)
    }

    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, x: Var) -> Result<Var> {
        let f = self.feat.forward(s, p, x)?;
        let g = self.gate.forward(s, p, x)?;
        let g = s.graph.sigmoid(g)?;
        s.graph.mul(f, g)
    }
}

/// Contextual attention: each channel slice, flattened to a length-L vector,
/// runs through one shared FC(L -> M) + ReLU + FC(M -> L) + sigmoid to
/// produce its per-pixel gate. M = r * L.
#[derive(Clone, Debug)]
pub struct Ca {
    pub name: String,
    pub len: usize,
    pub hidden: usize,
}

impl Ca {
    pub fn new(name: impl Into<String>, len: usize, ratio: usize) -> Result<Self> {
        if len == 0 || ratio == 0 {
            return Err(Error::config(format!(
                "contextual attention needs len >= 1 and ratio >= 1, got len={len} ratio={ratio}"
            )));
        }
        Ok(Ca {
            name: name.into(),
            len,
            hidden: ratio * len,
        })
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        let (l, m) = (self.len, self.hidden);
        p.insert(
            &format!("{}.fc1.w", self.name),
            ParamKind::Weight,
            fc_uniform(Shape::new(m, l, 1, 1), l, rng),
        )?;
        p.insert(
            &format!("{}.fc1.b", self.name),
            ParamKind::Bias,
            Tensor::zeros(Shape::new(1, m, 1, 1)),
        )?;
        p.insert(
            &format!("{}.fc2.w", self.name),
            ParamKind::Weight,
            fc_uniform(Shape::new(l, m, 1, 1), m, rng),
        )?;
        p.insert(
            &format!("{}.fc2.b", self.name),
            ParamKind::Bias,
            Tensor::zeros(Shape::new(1, l, 1, 1)),
        )
    }

    pub fn forward(&self, s: &mut Session, p: &ParamSet, x: Var) -> Result<Var> {
        let xs = s.graph.value(x).shape();
        if xs.h * xs.w != self.len {
            return Err(Error::shape(format!(
                "contextual attention expects flattened length {}, input is {}x{}",
                self.len, xs.h, xs.w
            )));
        }
        let w1 = s.param(p, &format!("{}.fc1.w", self.name))?;
        let b1 = s.param(p, &format!("{}.fc1.b", self.name))?;
        let w2 = s.param(p, &format!("{}.fc2.w", self.name))?;
        let b2 = s.param(p, &format!("{}.fc2.b", self.name))?;
        // All n*c slices become rows of one shared matrix product.
        let rows = xs.n * xs.c;
        let flat = s.graph.reshape(x, Shape::new(rows, self.len, 1, 1))?;
        let h = s.graph.fully_connected(flat, w1, Some(b1))?;
        let h = s.graph.relu(h)?;
        let g = s.graph.fully_connected(h, w2, Some(b2))?;
        let g = s.graph.sigmoid(g)?;
        s.graph.reshape(g, xs)
    }
}

/// Attention-guided gated convolution. Downsamples the depth feature through
/// two VConv units, fuses it with the color feature of the same scale, and
/// gates the result with contextual attention.
#[derive(Clone, Debug)]
pub struct AgGconv {
    pub d1: VConv,
    pub d2: VConv,
    pub mix: VConv,
    pub ca: Ca,
}

impl AgGconv {
    /// `c_in` -> `c_out` channels while halving the spatial dims, which must
    /// end up at `half_h` x `half_w`.
    pub fn new(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        half_h: usize,
        half_w: usize,
        ratio: usize,
    ) -> Result<Self> {
        Ok(AgGconv {
            d1: VConv::new(&format!("{prefix}.d1"), c_in, c_out, k, 1),
            d2: VConv::new(&format!("{prefix}.d2"), c_out, c_out, k, 2),
            mix: VConv::new(&format!("{prefix}.mix"), 2 * c_out, c_out, k, 1),
            ca: Ca::new(format!("{prefix}.ca"), half_h * half_w, ratio)?,
        })
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.d1.init(p, rng)?;
        self.d2.init(p, rng)?;
        self.mix.init(p, rng)?;
        self.ca.init(p, rng)
    }

    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, depth: Var, color: Var) -> Result<Var> {
        let ds = s.graph.value(depth).shape();
        let cs = s.graph.value(color).shape();
        if cs.h != ds.h.div_ceil(2) || cs.w != ds.w.div_ceil(2) {
            return Err(Error::shape(format!(
                "guided fusion: color feature {cs} is not the half-scale of depth feature {ds}"
            )));
        }
        let fd = self.d1.forward(s, p, depth)?;
        let fd = self.d2.forward(s, p, fd)?;
        let all = s.graph.concat_channels(&[fd, color])?;
        let all = self.mix.forward(s, p, all)?;
        let gate = self.ca.forward(s, p, all)?;
        s.graph.mul(fd, gate)
    }
}

/// Attention-guided skip connection. Learns a local gate from the decoder
/// feature and the color skip, then suppresses depth-irrelevant color
/// features: out = color ⊙ gate.
#[derive(Clone, Debug)]
pub struct AgSc {
    pub rd: VConv,
    pub fc: VConv,
    pub gate1: ConvSpec,
    pub gate1_bn: BnSpec,
    pub gate2: ConvSpec,
}

impl AgSc {
    pub fn new(prefix: &str, c: usize, k: usize) -> Self {
        AgSc {
            rd: VConv::new(&format!("{prefix}.rd"), c, c, 1, 1),
            fc: VConv::new(&format!("{prefix}.fc"), c, c, 3, 1),
            gate1: ConvSpec::new(format!("{prefix}.gate1"), 2 * c, c, k, 1),
            gate1_bn: BnSpec::new(format!("{prefix}.gate1.bn"), c),
            gate2: ConvSpec::new(format!("{prefix}.gate2"), c, c, 1, 1),
        }
    }

    pub fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.rd.init(p, rng)?;
        self.fc.init(p, rng)?;
        self.gate1.init(p, rng, 0.0)?;
        self.gate1_bn.init(p)?;
        self.gate2.init(p, rng, 0.0)
    }

    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, color: Var, decoder: Var) -> Result<Var> {
        let cs = s.graph.value(color).shape();
        let rs = s.graph.value(decoder).shape();
        if cs != rs {
            return Err(Error::shape(format!(
                "skip gating expects equal shapes, got color {cs} vs decoder {rs}"
            )));
        }
        let rd = self.rd.forward(s, p, decoder)?;
        let fc = self.fc.forward(s, p, color)?;
        let all = s.graph.concat_channels(&[rd, fc])?;
        let g = self.gate1.forward(s, p, all)?;
        let g = self.gate1_bn.forward(s, p, g)?;
        let g = s.graph.relu(g)?;
        let g = self.gate2.forward(s, p, g)?;
        let g = s.graph.sigmoid(g)?;
        s.graph.mul(color, g)
    }
}
