//! The two-stage completion network: a light pre-filling autoencoder followed
//! by a dual-branch encoder-decoder with attention-guided fusion.
//!
//! A `Scheme` (A through G) toggles which modules are wired in: fusion mode
//! (none / concat / guided), pre-filling, gated encoder convolutions, and the
//! gated color skip connections in the decoder. Scheme G is the full model.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    AgGconv, AgSc, ConvSpec, DeGConv, GConv, ParamSet, Session, VConv, VDeconv,
};
use crate::rng::{fnv1a, Rng};
use crate::tensor::{Real, Shape, Tensor, Var};

/// Smallest depth the pre-filling stage will emit, meters.
pub const PREFILL_MIN_DEPTH: Real = 1e-3;
/// Output heads start at roughly the mean scene depth (normalized) so the
/// clamp's dead zone does not swallow the initial gradients.
const HEAD_BIAS_INIT: Real = 0.4;

/// Pipeline ablation schemes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum Scheme {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

/// How color features enter the depth encoder.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Fusion {
    None,
    Concat,
    Guided,
}

/// What the decoder receives from the color branch.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DecoderColor {
    None,
    Raw,
    Gated,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::A,
        Scheme::B,
        Scheme::C,
        Scheme::D,
        Scheme::E,
        Scheme::F,
        Scheme::G,
    ];

    pub fn uses_prefill(self) -> bool {
        !matches!(self, Scheme::F)
    }

    pub fn fusion(self) -> Fusion {
        match self {
            Scheme::A => Fusion::None,
            Scheme::B | Scheme::C | Scheme::E => Fusion::Concat,
            Scheme::D | Scheme::F | Scheme::G => Fusion::Guided,
        }
    }

    /// Gated convolutions in the depth encoder and bottleneck.
    pub fn gated_encoder(self) -> bool {
        matches!(self, Scheme::C | Scheme::E)
    }

    pub fn decoder_color(self) -> DecoderColor {
        match self {
            Scheme::A | Scheme::D | Scheme::F => DecoderColor::None,
            Scheme::B | Scheme::C => DecoderColor::Raw,
            Scheme::E | Scheme::G => DecoderColor::Gated,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Scheme::A),
            "B" => Ok(Scheme::B),
            "C" => Ok(Scheme::C),
            "D" => Ok(Scheme::D),
            "E" => Ok(Scheme::E),
            "F" => Ok(Scheme::F),
            "G" => Ok(Scheme::G),
            other => Err(Error::config(format!(
                "unknown scheme '{other}', expected one of A-G"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Architecture hyperparameters and loss weights.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder/decoder layer count.
    pub m: usize,
    /// Convolution kernel size (odd).
    pub k: usize,
    /// Contextual-attention hidden ratio (hidden width = r * flattened len).
    pub r: usize,
    /// Depth-branch base channels; layer i uses c0 * 2^(i-1).
    pub c0: usize,
    pub height: usize,
    pub width: usize,
    pub scheme: Scheme,
    pub lambda_delta: f64,
    pub lambda_p: f64,
    pub huber_delta: f64,
    /// Depth values are divided by this before the network and multiplied
    /// back after, meters.
    pub max_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 4,
            k: 3,
            r: 4,
            c0: 8,
            height: 64,
            width: 64,
            scheme: Scheme::G,
            lambda_delta: 0.7,
            lambda_p: 0.3,
            huber_delta: 1.0,
            max_depth: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.m) {
            return Err(Error::config(format!("m must be in 2..=6, got {}", self.m)));
        }
        if self.k % 2 == 0 || self.k == 0 || self.k > 9 {
            return Err(Error::config(format!("k must be odd and in 1..=9, got {}", self.k)));
        }
        if self.r == 0 || self.c0 == 0 {
            return Err(Error::config("r and c0 must be at least 1".to_string()));
        }
        let div = 1usize << self.m;
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::config(format!(
                "input dims {}x{} must be divisible by 2^m = {div}",
                self.height, self.width
            )));
        }
        if self.max_depth <= 0.0 {
            return Err(Error::config("max_depth must be positive".to_string()));
        }
        crate::loss::LossWeights {
            lambda_delta: self.lambda_delta as Real,
            lambda_p: self.lambda_p as Real,
            huber_delta: self.huber_delta as Real,
        }
        .validate()
    }

    pub fn loss_weights(&self) -> crate::loss::LossWeights {
        crate::loss::LossWeights {
            lambda_delta: self.lambda_delta as Real,
            lambda_p: self.lambda_p as Real,
            huber_delta: self.huber_delta as Real,
        }
    }

    /// Depth-branch channels at encoder layer i (1-based).
    pub fn channels(&self, i: usize) -> usize {
        self.c0 << (i - 1)
    }
}

/// A single-view depth map in meters; invalid pixels are stored as zero.
#[derive(Clone, Debug)]
pub struct DepthImage {
    pub h: usize,
    pub w: usize,
    values: Vec<Real>,
    valid: Vec<bool>,
}

impl DepthImage {
    /// Valid pixels must be strictly positive; zeros mark invalid pixels.
    pub fn from_values(h: usize, w: usize, values: Vec<Real>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape(format!(
                "depth image {}x{} needs {} values, got {}",
                h,
                w,
                h * w,
                values.len()
            )));
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::numeric(
                "depth values must be finite and non-negative".to_string(),
            ));
        }
        let valid = values.iter().map(|&v| v > 0.0).collect();
        Ok(DepthImage { h, w, values, valid })
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn fully_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| !v).count()
    }
}

/// One forward batch: raw depth (meters, zeros at holes), its validity mask
/// (1/0), and RGB in [0,1]. Shapes (n,1,H,W), (n,1,H,W), (n,3,H,W).
#[derive(Clone, Debug)]
pub struct Batch {
    pub raw: Tensor,
    pub valid: Tensor,
    pub rgb: Tensor,
}

impl Batch {
    pub fn single(depth: &DepthImage, rgb: &Tensor) -> Result<Batch> {
        let (h, w) = (depth.h, depth.w);
        let rs = rgb.shape();
        if rs != Shape::new(1, 3, h, w) {
            return Err(Error::shape(format!(
                "rgb shape {rs} does not match depth {h}x{w}"
            )));
        }
        let raw = Tensor::new(Shape::new(1, 1, h, w), depth.values().to_vec())?;
        let valid = Tensor::from_fn(Shape::new(1, 1, h, w), |i| {
            if depth.valid()[i] {
                1.0
            } else {
                0.0
            }
        });
        Ok(Batch {
            raw,
            valid,
            rgb: rgb.clone(),
        })
    }
}

// ── network pieces ──────────────────────────────────────────────────

struct PrefillNet {
    enc1: VConv,
    enc2: VConv,
    dec1: VDeconv,
    dec2: VDeconv,
    head: ConvSpec,
}

impl PrefillNet {
    fn new(c0: usize) -> Self {
        // Large kernels so the receptive field covers most holes.
        PrefillNet {
            enc1: VConv::new("prefill.enc1", 4, c0, 7, 2),
            enc2: VConv::new("prefill.enc2", c0, 2 * c0, 7, 2),
            dec1: VDeconv::new("prefill.dec1", 2 * c0, c0, 7, 2),
            dec2: VDeconv::new("prefill.dec2", c0, c0, 7, 2),
            head: ConvSpec::new("prefill.head", c0, 1, 1, 1),
        }
    }

    fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        self.enc1.init(p, rng)?;
        self.enc2.init(p, rng)?;
        self.dec1.init(p, rng)?;
        self.dec2.init(p, rng)?;
        self.head.init(p, rng, HEAD_BIAS_INIT)
    }

    /// Dense meters-valued map: raw where valid, prediction elsewhere.
    fn forward(
        &self,
        s: &mut Session,
        p: &mut ParamSet,
        raw: &Tensor,
        valid: &Tensor,
        rgb: Var,
        max_depth: Real,
    ) -> Result<Var> {
        let raw_var = s.input(raw.clone());
        let raw_norm = s.graph.scale(raw_var, 1.0 / max_depth)?;
        let x = s.graph.concat_channels(&[raw_norm, rgb])?;
        let x = self.enc1.forward(s, p, x)?;
        let x = self.enc2.forward(s, p, x)?;
        let x = self.dec1.forward(s, p, x)?;
        let x = self.dec2.forward(s, p, x)?;
        let x = self.head.forward(s, p, x)?;
        let x = s.graph.leaky_relu(x, crate::nn::LEAKY_SLOPE)?;
        let x = s.graph.scale(x, max_depth)?;
        let pred = s.graph.clamp_min(x, PREFILL_MIN_DEPTH)?;
        s.graph.mask_compose(raw, pred, valid)
    }
}

enum ConvUnit {
    V(VConv),
    G(GConv),
}

impl ConvUnit {
    fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize, gated: bool) -> Self {
        if gated {
            ConvUnit::G(GConv::new(prefix, c_in, c_out, k, stride))
        } else {
            ConvUnit::V(VConv::new(prefix, c_in, c_out, k, stride))
        }
    }

    fn init(&self, p: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        match self {
            ConvUnit::V(v) => v.init(p, rng),
            ConvUnit::G(g) => g.init(p, rng),
        }
    }

    fn forward(&self, s: &mut Session, p: &mut ParamSet, x: Var) -> Result<Var> {
        match self {
            ConvUnit::V(v) => v.forward(s, p, x),
            ConvUnit::G(g) => g.forward(s, p, x),
        }
    }
}

enum EncoderLayer {
    /// Depth-only: two conv units, stride 1 then stride 2.
    Plain { d1: VConv, d2: VConv },
    /// Concat fusion: depth units, then color concatenated and a 1x1 unit
    /// restoring the channel count.
    Concat {
        d1: ConvUnit,
        d2: ConvUnit,
        fuse: VConv,
    },
    /// Attention-guided gated convolution.
    Guided(AgGconv),
}

enum Bottleneck {
    Pair(VConv, VConv),
    Gated(GConv),
}

struct DecoderLayer {
    agsc: Option<AgSc>,
    up: DeGConv,
}

/// Everything `encode` hands to `decode`: the bottleneck feature plus the
/// per-scale depth and color skips (index 0 = finest scale).
pub struct EncodeOut {
    pub bottleneck: Var,
    pub depth_skips: Vec<Var>,
    pub color_skips: Vec<Var>,
}

pub struct AggNet {
    cfg: ModelConfig,
    prefill: Option<PrefillNet>,
    color: Vec<VConv>,
    encoder: Vec<EncoderLayer>,
    bottleneck: Bottleneck,
    decoder: Vec<DecoderLayer>,
    head: ConvSpec,
}

impl AggNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, k, c0) = (cfg.m, cfg.k, cfg.c0);

        let prefill = cfg.scheme.uses_prefill().then(|| PrefillNet::new(c0));

        let mut color = Vec::with_capacity(m);
        for i in 1..=m {
            let c_in = if i == 1 { 3 } else { cfg.channels(i - 1) };
            color.push(VConv::new(
                &format!("color.enc{i}"),
                c_in,
                cfg.channels(i),
                k,
                2,
            ));
        }

        let mut encoder = Vec::with_capacity(m);
        for i in 1..=m {
            let prefix = format!("enc{i}");
            let c_in = if i == 1 { 1 } else { cfg.channels(i - 1) };
            let c_out = cfg.channels(i);
            let layer = match cfg.scheme.fusion() {
                Fusion::None => EncoderLayer::Plain {
                    d1: VConv::new(&format!("{prefix}.d1"), c_in, c_out, k, 1),
                    d2: VConv::new(&format!("{prefix}.d2"), c_out, c_out, k, 2),
                },
                Fusion::Concat => {
                    let gated = cfg.scheme.gated_encoder();
                    EncoderLayer::Concat {
                        d1: ConvUnit::new(&format!("{prefix}.d1"), c_in, c_out, k, 1, gated),
                        d2: ConvUnit::new(&format!("{prefix}.d2"), c_out, c_out, k, 2, gated),
                        fuse: VConv::new(&format!("{prefix}.fuse"), 2 * c_out, c_out, 1, 1),
                    }
                }
                Fusion::Guided => EncoderLayer::Guided(AgGconv::new(
                    &prefix,
                    c_in,
                    c_out,
                    k,
                    cfg.height >> i,
                    cfg.width >> i,
                    cfg.r,
                )?),
            };
            encoder.push(layer);
        }

        let cm = cfg.channels(m);
        let bottleneck = if cfg.scheme.gated_encoder() {
            Bottleneck::Gated(GConv::new("bottleneck.g", cm, cm, k, 1))
        } else {
            Bottleneck::Pair(
                VConv::new("bottleneck.v1", cm, cm, k, 1),
                VConv::new("bottleneck.v2", cm, cm, k, 1),
            )
        };

        let mut decoder = Vec::with_capacity(m);
        for i in (1..=m).rev() {
            let ci = cfg.channels(i);
            let color_in = match cfg.scheme.decoder_color() {
                DecoderColor::None => 0,
                DecoderColor::Raw | DecoderColor::Gated => ci,
            };
            let c_in = 2 * ci + color_in;
            let c_out = if i >= 2 { cfg.channels(i - 1) } else { c0 };
            decoder.push(DecoderLayer {
                agsc: (cfg.scheme.decoder_color() == DecoderColor::Gated)
                    .then(|| AgSc::new(&format!("dec{i}.agsc"), ci, k)),
                up: DeGConv::new(&format!("dec{i}.up"), c_in, c_out, k, 2),
            });
        }

        let head = ConvSpec::new("head", c0, 1, 1, 1);

        Ok(AggNet {
            cfg,
            prefill,
            color,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters; fully determined by the seed.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = Rng::stream(seed, fnv1a(b"params"));
        let mut p = ParamSet::new();
        if let Some(pf) = &self.prefill {
            pf.init(&mut p, &mut rng)?;
        }
        for c in &self.color {
            c.init(&mut p, &mut rng)?;
        }
        for layer in &self.encoder {
            match layer {
                EncoderLayer::Plain { d1, d2 } => {
                    d1.init(&mut p, &mut rng)?;
                    d2.init(&mut p, &mut rng)?;
                }
                EncoderLayer::Concat { d1, d2, fuse } => {
                    d1.init(&mut p, &mut rng)?;
                    d2.init(&mut p, &mut rng)?;
                    fuse.init(&mut p, &mut rng)?;
                }
                EncoderLayer::Guided(ag) => ag.init(&mut p, &mut rng)?,
            }
        }
        match &self.bottleneck {
            Bottleneck::Pair(a, b) => {
                a.init(&mut p, &mut rng)?;
                b.init(&mut p, &mut rng)?;
            }
            Bottleneck::Gated(g) => g.init(&mut p, &mut rng)?,
        }
        for layer in &self.decoder {
            if let Some(agsc) = &layer.agsc {
                agsc.init(&mut p, &mut rng)?;
            }
            layer.up.init(&mut p, &mut rng)?;
        }
        self.head.init(&mut p, &mut rng, HEAD_BIAS_INIT)?;
        Ok(p)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let rs = batch.raw.shape();
        if rs.c != 1 || rs.h != h || rs.w != w {
            return Err(Error::shape(format!(
                "raw depth batch {rs} does not match configured {h}x{w}"
            )));
        }
        if batch.valid.shape() != rs {
            return Err(Error::shape("validity mask must match raw depth shape".to_string()));
        }
        let gs = batch.rgb.shape();
        if gs != Shape::new(rs.n, 3, h, w) {
            return Err(Error::shape(format!(
                "rgb batch {gs} does not match raw depth {rs}"
            )));
        }
        Ok(())
    }

    /// Run the pre-filling stage: a dense meters-valued map that keeps valid
    /// raw pixels bitwise unchanged and has no zeros.
    pub fn prefill(
        &self,
        s: &mut Session,
        p: &mut ParamSet,
        batch: &Batch,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let pf = self.prefill.as_ref().ok_or_else(|| {
            Error::config(format!("scheme {} has no pre-filling stage", self.cfg.scheme))
        })?;
        let rgb = s.input(batch.rgb.clone());
        pf.forward(s, p, &batch.raw, &batch.valid, rgb, self.cfg.max_depth as Real)
    }

    /// Encoder over the (normalized) depth input and RGB.
    pub fn encode(
        &self,
        s: &mut Session,
        p: &mut ParamSet,
        depth_norm: Var,
        rgb: Var,
    ) -> Result<EncodeOut> {
        // Color pyramid first; one stride-2 unit per scale.
        let mut color_skips = Vec::with_capacity(self.cfg.m);
        let mut c = rgb;
        for unit in &self.color {
            c = unit.forward(s, p, c)?;
            color_skips.push(c);
        }

        let mut depth_skips = Vec::with_capacity(self.cfg.m);
        let mut d = depth_norm;
        for (j, layer) in self.encoder.iter().enumerate() {
            d = match layer {
                EncoderLayer::Plain { d1, d2 } => {
                    let f = d1.forward(s, p, d)?;
                    d2.forward(s, p, f)?
                }
                EncoderLayer::Concat { d1, d2, fuse } => {
                    let f = d1.forward(s, p, d)?;
                    let f = d2.forward(s, p, f)?;
                    let cat = s.graph.concat_channels(&[f, color_skips[j]])?;
                    fuse.forward(s, p, cat)?
                }
                EncoderLayer::Guided(ag) => ag.forward(s, p, d, color_skips[j])?,
            };
            depth_skips.push(d);
        }

        let bottleneck = match &self.bottleneck {
            Bottleneck::Pair(a, b) => {
                let x = a.forward(s, p, d)?;
                b.forward(s, p, x)?
            }
            Bottleneck::Gated(g) => g.forward(s, p, d)?,
        };

        Ok(EncodeOut {
            bottleneck,
            depth_skips,
            color_skips,
        })
    }

    /// Decoder: per scale, concatenate the running feature with the depth
    /// skip (and the raw or gated color skip where the scheme uses one), then
    /// upsample with a gated transposed convolution. The head emits meters.
    pub fn decode(&self, s: &mut Session, p: &mut ParamSet, enc: &EncodeOut) -> Result<Var> {
        let m = self.cfg.m;
        let mut r = enc.bottleneck;
        for (step, layer) in self.decoder.iter().enumerate() {
            let scale = m - step; // encoder layer whose skips we consume
            let fd = enc.depth_skips[scale - 1];
            let mut parts = vec![r, fd];
            match self.cfg.scheme.decoder_color() {
                DecoderColor::None => {}
                DecoderColor::Raw => parts.push(enc.color_skips[scale - 1]),
                DecoderColor::Gated => {
                    let agsc = layer.agsc.as_ref().expect("gated scheme has agsc");
                    parts.push(agsc.forward(s, p, enc.color_skips[scale - 1], r)?);
                }
            }
            let s_all = s.graph.concat_channels(&parts)?;
            r = layer.up.forward(s, p, s_all)?;
        }
        let y = self.head.forward(s, p, r)?;
        let y = s.graph.leaky_relu(y, crate::nn::LEAKY_SLOPE)?;
        let y = s.graph.scale(y, self.cfg.max_depth as Real)?;
        s.graph.clamp_min(y, 0.0)
    }

    /// Full pipeline: pre-fill (unless the scheme skips it), encode, decode.
    /// Returns the predicted dense depth in meters, shape (n,1,H,W).
    pub fn forward(&self, s: &mut Session, p: &mut ParamSet, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let rgb = s.input(batch.rgb.clone());
        let depth_meters = if self.prefill.is_some() {
            let pf = self.prefill.as_ref().unwrap();
            pf.forward(s, p, &batch.raw, &batch.valid, rgb, self.cfg.max_depth as Real)?
        } else {
            // No pre-fill: the raw map, zeros retained.
            s.input(batch.raw.clone())
        };
        let depth_norm = s.graph.scale(depth_meters, (1.0 / self.cfg.max_depth) as Real)?;
        let enc = self.encode(s, p, depth_norm, rgb)?;
        self.decode(s, p, &enc)
    }
}

// ── checkpoints ─────────────────────────────────────────────────────
//
// A checkpoint is one JSON header line carrying the ModelConfig, followed by
// the flat binary parameter format.

pub fn save_checkpoint(w: &mut dyn Write, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let header = serde_json::to_string(cfg)
        .map_err(|e| Error::config(format!("cannot encode config header: {e}")))?;
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .map_err(|e| Error::io("<checkpoint>", e))?;
    params.save(w)
}

pub fn load_checkpoint(r: &mut dyn Read) -> Result<(AggNet, ParamSet)> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte) {
            Ok(0) => return Err(Error::parse("checkpoint missing header line", header.len())),
            Ok(_) => {
                if byte[0] == b'\n' {
                    break;
                }
                header.push(byte[0]);
                if header.len() > 64 * 1024 {
                    return Err(Error::parse("checkpoint header line too long", header.len()));
                }
            }
            Err(e) => return Err(Error::io("<checkpoint>", e)),
        }
    }
    let text = String::from_utf8(header.clone())
        .map_err(|_| Error::parse("checkpoint header is not UTF-8", 0))?;
    let cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("bad checkpoint header: {e}"), 0))?;
    let net = AggNet::new(cfg)?;
    let mut params = net.init_params(0)?;
    params.load(r)?;
    Ok((net, params))
}

pub fn save_checkpoint_file(path: &std::path::Path, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    save_checkpoint(&mut f, cfg, params)
}

pub fn load_checkpoint_file(path: &std::path::Path) -> Result<(AggNet, ParamSet)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    load_checkpoint(&mut f)
}
