//! Convolutional encoder/decoder height models: the dual-encoder U-Nets with an
//! attention bottleneck and the single-modality teachers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::losses::HeightBinning;
use crate::nn::{BatchNormState, Conv2dParams, ConvT2dParams, Graph, MhsaParams, LEAKY_SLOPE};
use crate::params::ParamSet;
use crate::tensor::Float;

/// Model variant. The two dual-head variants share an architecture and differ only in the regression loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// Two encoders, single regression head.
    TwoMou,
    /// Two encoders, dual head, Huber regression.
    TwoMdu,
    /// Two encoders, dual head, adaptive regression.
    A2Mdu,
    TeacherS1,
    TeacherS2,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::TwoMou, Arch::TwoMdu, Arch::A2Mdu, Arch::TeacherS1, Arch::TeacherS2];

    pub fn is_teacher(self) -> bool {
        matches!(self, Arch::TeacherS1 | Arch::TeacherS2)
    }

    pub fn head(self) -> HeadKind {
        match self {
            Arch::TwoMdu | Arch::A2Mdu => HeadKind::Dual,
            _ => HeadKind::Single,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::TwoMou => "2mou",
            Arch::TwoMdu => "2mdu",
            Arch::A2Mdu => "a2mdu",
            Arch::TeacherS1 => "teacher_s1",
            Arch::TeacherS2 => "teacher_s2",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Single,
    Dual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub arch: Arch,
    pub s2_channels: usize,
    pub s1_channels: usize,
    pub stem_width: usize,
    pub depth: usize,
    pub bins: HeightBinning,
}

impl UNetConfig {
    pub fn new(arch: Arch) -> Self {
        Self { arch, s2_channels: 10, s1_channels: 2, stem_width: 16, depth: 4, bins: HeightBinning::default() }
    }

    pub fn with_stem_width(mut self, width: usize) -> Self {
        self.stem_width = width;
        self
    }

    pub fn head(&self) -> HeadKind {
        self.arch.head()
    }

    /// Channel count of the primary (skip-providing) encoder input.
    pub fn primary_channels(&self) -> usize {
        match self.arch {
            Arch::TeacherS1 => self.s1_channels,
            _ => self.s2_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.stem_width == 0 || self.s2_channels == 0 || self.s1_channels == 0 {
            return Err(Error::Invalid(format!("degenerate U-Net configuration: {self:?}")));
        }
        Ok(())
    }

    /// Input extents must be divisible by `2^depth`.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << self.depth;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("input {h}×{w} is not divisible by {f}")));
        }
        Ok(())
    }
}

/// Conv3×3 (pad 1) → BatchNorm → LeakyReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    conv: Conv2dParams,
    bn: BatchNormState,
}

impl ConvBnAct {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        Self { conv: Conv2dParams::same(format!("{name}.conv"), 3, cin, cout), bn: BatchNormState::new(format!("{name}.bn"), cout) }
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.conv.init(p, rng);
        self.bn.init(p);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.leaky_relu(y, T::c(LEAKY_SLOPE)))
    }
}

/// Encoder block: `W×H×C → W/2×H/2×2C`.
#[derive(Clone, Debug)]
pub struct Ceb {
    pub cin: usize,
    a: ConvBnAct,
    b: ConvBnAct,
    down: Conv2dParams,
}

impl Ceb {
    pub fn new(name: &str, cin: usize) -> Self {
        let c = 2 * cin;
        Self {
            cin,
            a: ConvBnAct::new(&format!("{name}.a"), cin, c),
            b: ConvBnAct::new(&format!("{name}.b"), c, c),
            down: Conv2dParams::new(format!("{name}.down"), 2, c, c, 2, 0),
        }
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.a.init(p, rng);
        self.b.init(p, rng);
        self.down.init(p, rng);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cin {
            return Err(Error::Shape(format!("encoder block expects {} channels, got {s:?}", self.cin)));
        }
        if s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::Shape(format!("encoder block needs even extents, got {}×{}", s[0], s[1])));
        }
        let y = self.a.forward(g, x)?;
        let y = self.b.forward(g, y)?;
        let y = self.down.forward(g, y)?;
        debug_assert_eq!(g.tape.shape(y), &[s[0] / 2, s[1] / 2, 2 * s[2]]);
        Ok(y)
    }
}

/// Decoder block: `W×H×C` plus a `2W×2H×C/2` skip `→ 2W×2H×C/2`.
#[derive(Clone, Debug)]
pub struct Cdb {
    pub cin: usize,
    up: ConvT2dParams,
    a: ConvBnAct,
    b: ConvBnAct,
}

impl Cdb {
    pub fn new(name: &str, cin: usize) -> Result<Self> {
        if cin < 2 || cin % 2 != 0 {
            return Err(Error::Invalid(format!("decoder block needs an even channel count, got {cin}")));
        }
        let h = cin / 2;
        Ok(Self {
            cin,
            up: ConvT2dParams::new(format!("{name}.up"), 2, cin, h, 2),
            a: ConvBnAct::new(&format!("{name}.a"), cin, h),
            b: ConvBnAct::new(&format!("{name}.b"), h, h),
        })
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.up.init(p, rng);
        self.a.init(p, rng);
        self.b.init(p, rng);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var, skip: Var) -> Result<Var> {
        let (s, k) = (g.tape.shape(x).to_vec(), g.tape.shape(skip).to_vec());
        if s.len() != 3 || s[2] != self.cin {
            return Err(Error::Shape(format!("decoder block expects {} channels, got {s:?}", self.cin)));
        }
        if k != [2 * s[0], 2 * s[1], self.cin / 2] {
            return Err(Error::Shape(format!("skip {k:?} does not match decoder input {s:?}")));
        }
        let up = self.up.forward(g, x)?;
        let cat = g.tape.concat(&[up, skip], 2)?;
        let y = self.a.forward(g, cat)?;
        self.b.forward(g, y)
    }
}

/// Global single-head self-attention over flattened bottleneck positions, with a residual.
#[derive(Clone, Debug)]
pub struct Saa {
    attn: MhsaParams,
}

impl Saa {
    pub fn new(name: &str, channels: usize) -> Self {
        Self { attn: MhsaParams::new(name, channels, 1).expect("one head divides any width") }
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.attn.init(p, rng);
    }

    /// Concatenates `e1` and the optional `e2` along channels and attends over all positions.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, e1: Var, e2: Option<Var>) -> Result<Var> {
        let x = match e2 {
            Some(e2) => {
                let (a, b) = (g.tape.shape(e1), g.tape.shape(e2));
                if a.len() != 3 || b.len() != 3 || a[..2] != b[..2] {
                    return Err(Error::Shape(format!("attention inputs {a:?} and {b:?} differ spatially")));
                }
                g.tape.concat(&[e1, e2], 2)?
            }
            None => e1,
        };
        let s = g.tape.shape(x).to_vec();
        let tokens = g.tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let a = self.attn.forward(g, tokens)?;
        let a = g.tape.reshape(a, &s)?;
        g.tape.add(x, a)
    }
}

/// 1×1 conv to one channel, then Softplus.
#[derive(Clone, Debug)]
pub struct SingleHead {
    conv: Conv2dParams,
}

impl SingleHead {
    pub fn new(name: &str, cin: usize) -> Self {
        Self { conv: Conv2dParams::new(format!("{name}.conv"), 1, cin, 1, 1, 0) }
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.conv.init(p, rng);
    }

    /// Returns heights as `[rows, cols]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = g.tape.softplus(y);
        let s = g.tape.shape(y).to_vec();
        g.tape.reshape(y, &s[..2])
    }
}

/// Classification branch (softmax over K bins) gating a regression branch.
///
/// With bin centres set, the head starts out as a mixture of per-bin regressors:
/// the output conv sums the gated channels with unit weights and each regression
/// channel is biased to its bin centre, so the initial height is the
/// probability-weighted centre instead of a product of three small random factors.
#[derive(Clone, Debug)]
pub struct DualHead {
    cls: Conv2dParams,
    reg: Conv2dParams,
    out: Conv2dParams,
    centers: Option<Vec<f64>>,
}

impl DualHead {
    pub fn new(name: &str, cin: usize, k: usize) -> Self {
        Self {
            cls: Conv2dParams::new(format!("{name}.cls"), 1, cin, k, 1, 0),
            reg: Conv2dParams::new(format!("{name}.reg"), 1, cin, k, 1, 0),
            out: Conv2dParams::new(format!("{name}.out"), 1, k, 1, 1, 0),
            centers: None,
        }
    }

    pub fn with_centers(mut self, centers: Vec<f64>) -> Self {
        assert_eq!(centers.len(), self.reg.cout, "one centre per bin");
        self.centers = Some(centers);
        self
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.cls.init(p, rng);
        self.reg.init(p, rng);
        self.out.init(p, rng);
        if let Some(c) = &self.centers {
            let rb = p.get_mut(&format!("{}.b", self.reg.name)).expect("just inserted");
            rb.data_mut().iter_mut().zip(c).for_each(|(v, &c)| *v = T::c(c));
            let ow = p.get_mut(&format!("{}.w", self.out.name)).expect("just inserted");
            ow.data_mut().iter_mut().for_each(|v| *v = T::c(1.0));
        }
    }

    /// Returns `(probs [rows, cols, K], heights [rows, cols])`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let logits = self.cls.forward(g, x)?;
        let probs = g.tape.softmax(logits, 2)?;
        let b = self.reg.forward(g, x)?;
        let gated = g.tape.mul(probs, b)?;
        let h = self.out.forward(g, gated)?;
        let h = g.tape.softplus(h);
        let s = g.tape.shape(h).to_vec();
        Ok((probs, g.tape.reshape(h, &s[..2])?))
    }
}

#[derive(Clone, Debug)]
enum Head {
    Single(SingleHead),
    Dual(DualHead),
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[rows, cols]` heights in meters.
    pub height: Var,
    /// `[rows, cols, K]` class probabilities (dual head only).
    pub probs: Option<Var>,
}

#[derive(Clone, Debug)]
struct EncoderPath {
    stem: ConvBnAct,
    blocks: Vec<Ceb>,
}

impl EncoderPath {
    fn new(name: &str, cin: usize, width: usize, depth: usize) -> Self {
        let stem = ConvBnAct::new(&format!("{name}.stem"), cin, width);
        let blocks = (0..depth).map(|i| Ceb::new(&format!("{name}.ceb{}", i + 1), width << i)).collect();
        Self { stem, blocks }
    }

    fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.stem.init(p, rng);
        self.blocks.iter().for_each(|b| b.init(p, rng));
    }

    /// Returns the bottleneck plus the stem and all but the last block output (the skips).
    fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut y = self.stem.forward(g, x)?;
        let mut skips = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            skips.push(y);
            y = b.forward(g, y)?;
        }
        Ok((y, skips))
    }
}

/// Full encoder/decoder model. Skips come from the primary encoder (S2 for the
/// dual-encoder variants); the secondary encoder only feeds the bottleneck.
#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    primary: EncoderPath,
    secondary: Option<EncoderPath>,
    saa: Saa,
    fuse: Option<Conv2dParams>,
    decoder: Vec<Cdb>,
    head: Head,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, d) = (cfg.stem_width, cfg.depth);
        let bottleneck = w << d;
        let primary = EncoderPath::new("enc_a", cfg.primary_channels(), w, d);
        let secondary = (!cfg.arch.is_teacher()).then(|| EncoderPath::new("enc_b", cfg.s1_channels, w, d));
        let attn_width = if secondary.is_some() { 2 * bottleneck } else { bottleneck };
        let fuse = secondary.is_some().then(|| Conv2dParams::new("fuse", 1, attn_width, bottleneck, 1, 0));
        let decoder = (0..d).map(|i| Cdb::new(&format!("cdb{}", i + 1), bottleneck >> i)).collect::<Result<_>>()?;
        let head = match cfg.head() {
            HeadKind::Single => Head::Single(SingleHead::new("head", w)),
            HeadKind::Dual => Head::Dual(DualHead::new("head", w, cfg.bins.k()).with_centers(cfg.bins.centers())),
        };
        Ok(Self { saa: Saa::new("saa", attn_width), primary, secondary, fuse, decoder, head, cfg })
    }

    pub fn init<T: Float>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut p = ParamSet::new();
        self.primary.init(&mut p, rng);
        if let Some(s) = &self.secondary {
            s.init(&mut p, rng);
        }
        self.saa.init(&mut p, rng);
        if let Some(f) = &self.fuse {
            f.init(&mut p, rng);
        }
        self.decoder.iter().for_each(|b| b.init(&mut p, rng));
        match &self.head {
            Head::Single(h) => h.init(&mut p, rng),
            Head::Dual(h) => h.init(&mut p, rng),
        }
        p
    }

    /// `primary` is the S2 stack (or the teacher's only modality); `secondary` the S1 stack.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, primary: Var, secondary: Option<Var>) -> Result<ModelOutput> {
        let s = g.tape.shape(primary).to_vec();
        if s.len() != 3 || s[2] != self.cfg.primary_channels() {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {s:?}",
                self.cfg.arch,
                self.cfg.primary_channels()
            )));
        }
        self.cfg.check_extent(s[0], s[1])?;
        let (a, skips) = self.primary.forward(g, primary)?;
        let b = match (&self.secondary, secondary) {
            (Some(path), Some(x)) => {
                let t = g.tape.shape(x);
                if t.len() != 3 || t[..2] != s[..2] || t[2] != self.cfg.s1_channels {
                    return Err(Error::Shape(format!("secondary input {t:?} does not match primary {s:?}")));
                }
                Some(path.forward(g, x)?.0)
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::Shape(format!("{} needs both modalities", self.cfg.arch))),
            (None, Some(_)) => return Err(Error::Shape(format!("{} takes a single modality", self.cfg.arch))),
        };
        let mut y = self.saa.forward(g, a, b)?;
        if let Some(f) = &self.fuse {
            y = f.forward(g, y)?;
        }
        for (block, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            y = block.forward(g, y, skip)?;
        }
        let out = match &self.head {
            Head::Single(h) => ModelOutput { height: h.forward(g, y)?, probs: None },
            Head::Dual(h) => {
                let (probs, height) = h.forward(g, y)?;
                ModelOutput { height, probs: Some(probs) }
            }
        };
        debug_assert_eq!(g.tape.shape(out.height), &s[..2]);
        Ok(out)
    }
}
