//! Hy-TeC: a two-group patch-token transformer with a multi-resolution convolutional decoder.
//!
//! The ten S2 bands are split into two groups, each patchified and projected to
//! `D`, then stacked as `2N` tokens with a learnable positional table. Four encoder
//! taps are reprojected to `G/2, G, 2G, 4G` (with `G = W/P`), fused coarse to fine,
//! and a final decoder block brings the finest map up to `W`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::losses::HeightBinning;
use crate::nn::{Conv2dParams, ConvT2dParams, Graph, LayerNormParams, Linear, MhsaParams, LEAKY_SLOPE};
use crate::params::ParamSet;
use crate::tensor::{Float, Tensor};
use crate::unet::DualHead;

/// Band indices into the 10-band S2 stack (B2, B3, B4, B5, B6, B7, B8, B8A, B11, B12).
pub const GROUP_RGBN: [usize; 4] = [2, 1, 0, 6];
pub const GROUP_RE_SWIR: [usize; 6] = [3, 4, 5, 7, 8, 9];

#[derive(Clone, Debug, PartialEq)]
pub struct HyTecConfig {
    /// Input side `W` (square tiles).
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub l_hat: usize,
    pub group1: Vec<usize>,
    pub group2: Vec<usize>,
    /// 1-based encoder block indices feeding the four reprojection blocks.
    pub taps: [usize; 4],
    pub bins: HeightBinning,
}

impl Default for HyTecConfig {
    fn default() -> Self {
        Self {
            image: 256,
            patch: 16,
            dim: 1536,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            l_hat: 256,
            group1: GROUP_RGBN.to_vec(),
            group2: GROUP_RE_SWIR.to_vec(),
            taps: default_taps(12),
            bins: HeightBinning::default(),
        }
    }
}

/// Evenly spaced taps `ceil(i·T/4)` for `i = 1..4`.
pub fn default_taps(depth: usize) -> [usize; 4] {
    [1, 2, 3, 4].map(|i| (i * depth).div_ceil(4).max(1))
}

impl HyTecConfig {
    /// Small model for tests and desk-scale runs: `W=32, P=8, D=32, T=2`.
    pub fn miniature() -> Self {
        Self { image: 32, patch: 8, dim: 32, depth: 2, heads: 2, mlp_ratio: 2, l_hat: 16, taps: default_taps(2), ..Self::default() }
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn tokens_per_group(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Upsampling factor of the final decoder block.
    pub fn db_factor(&self) -> usize {
        self.patch / 4
    }

    /// Side lengths of the three auxiliary outputs.
    pub fn aux_sides(&self) -> [usize; 3] {
        let g = self.grid();
        [g, 2 * g, 4 * g]
    }

    pub fn input_channels(&self) -> usize {
        self.group1.iter().chain(&self.group2).max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.patch < 4 || self.patch % 4 != 0 {
            return bad(format!("patch size {} must be a positive multiple of 4", self.patch));
        }
        if self.image == 0 || self.image % self.patch != 0 || self.grid() % 2 != 0 {
            return bad(format!("image {} must be an even number of {}-pixel patches", self.image, self.patch));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("embedding {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.l_hat < 8 || self.l_hat % 8 != 0 {
            return bad(format!("reprojection width {} must be a multiple of 8", self.l_hat));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("encoder depth and MLP ratio must be positive".into());
        }
        if self.taps.iter().any(|&t| t == 0 || t > self.depth) || self.taps.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!("taps {:?} must be ascending within 1..={}", self.taps, self.depth));
        }
        if self.group1.is_empty() || self.group2.is_empty() {
            return bad("both band groups need at least one band".into());
        }
        Ok(())
    }
}

/// Picks `bands` from a `[rows, cols, C]` image, in order.
fn select_bands<T: Float>(g: &mut Graph<T>, x: Var, bands: &[usize]) -> Result<Var> {
    let parts = bands.iter().map(|&b| g.tape.slice(x, 2, b, 1)).collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.tape.concat(&parts, 2)
    }
}

/// Cuts `[W×H×B]` into `N` row-major patches, each flattened row-major to `P·P·B`.
pub fn patchify<T: Float>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 3 || s[0] % p != 0 || s[1] % p != 0 || p == 0 {
        return Err(Error::Shape(format!("{s:?} is not divisible into {p}×{p} patches")));
    }
    let (gh, gw, b) = (s[0] / p, s[1] / p, s[2]);
    let y = g.tape.reshape(x, &[gh, p, gw, p, b])?;
    let y = g.tape.permute(y, &[0, 2, 1, 3, 4])?;
    g.tape.reshape(y, &[gh * gw, p * p * b])
}

/// Tokens `[N×D]` back onto the `G×G` grid: row `r` lands at `(r / G, r % G)`.
pub fn spatial_concat<T: Float>(g: &mut Graph<T>, tokens: Var) -> Result<Var> {
    let s = g.tape.shape(tokens).to_vec();
    let side = (s[0] as f64).sqrt().round() as usize;
    if s.len() != 2 || side * side != s[0] {
        return Err(Error::Shape(format!("{s:?} tokens do not form a square grid")));
    }
    g.tape.reshape(tokens, &[side, side, s[1]])
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNormParams,
    attn: MhsaParams,
    ln2: LayerNormParams,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormParams::new(format!("{name}.ln1"), dim),
            attn: MhsaParams::new(format!("{name}.attn"), dim, heads)?,
            ln2: LayerNormParams::new(format!("{name}.ln2"), dim),
            fc1: Linear::new(format!("{name}.fc1"), dim, dim * mlp_ratio),
            fc2: Linear::new(format!("{name}.fc2"), dim * mlp_ratio, dim),
        })
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.ln1.init(p);
        self.attn.init(p, rng);
        self.ln2.init(p);
        self.fc1.init(p, rng);
        self.fc2.init(p, rng);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.tape.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.tape.add(x, h)
    }
}

/// Reprojection: 1×1 conv to `L̂`, then resample by stage (½, 1, 2, 4).
#[derive(Clone, Debug)]
pub struct ReprojectionBlock {
    pub stage: usize,
    proj: Conv2dParams,
    down: Option<Conv2dParams>,
    up: Option<ConvT2dParams>,
}

impl ReprojectionBlock {
    pub fn new(name: &str, stage: usize, dim: usize, l_hat: usize) -> Result<Self> {
        let proj = Conv2dParams::new(format!("{name}.proj"), 1, dim, l_hat, 1, 0);
        let (down, up) = match stage {
            1 => (Some(Conv2dParams::new(format!("{name}.down"), 2, l_hat, l_hat, 2, 0)), None),
            2 => (None, None),
            3 => (None, Some(ConvT2dParams::new(format!("{name}.up"), 2, l_hat, l_hat, 2))),
            4 => (None, Some(ConvT2dParams::new(format!("{name}.up"), 4, l_hat, l_hat, 4))),
            _ => return Err(Error::Invalid(format!("reprojection stage {stage} is not in 1..=4"))),
        };
        Ok(Self { stage, proj, down, up })
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.proj.init(p, rng);
        if let Some(d) = &self.down {
            d.init(p, rng);
        }
        if let Some(u) = &self.up {
            u.init(p, rng);
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let side = g.tape.shape(f)[0];
        let y = self.proj.forward(g, f)?;
        let y = match (&self.down, &self.up) {
            (Some(d), _) => d.forward(g, y)?,
            (_, Some(u)) => u.forward(g, y)?,
            _ => y,
        };
        let want = match self.stage {
            1 => side / 2,
            2 => side,
            3 => 2 * side,
            _ => 4 * side,
        };
        if g.tape.shape(y)[0] != want {
            return Err(Error::Shape(format!("reprojection stage {} produced side {}", self.stage, g.tape.shape(y)[0])));
        }
        Ok(y)
    }
}

/// Two Conv3×3 + LeakyReLU, then a transposed conv multiplying the side by `factor`
/// and dividing the channels by 8.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub channels: usize,
    pub factor: usize,
    a: Conv2dParams,
    b: Conv2dParams,
    up: ConvT2dParams,
}

impl DecoderBlock {
    pub fn new(name: &str, channels: usize, factor: usize) -> Result<Self> {
        if channels < 8 || channels % 8 != 0 || factor == 0 {
            return Err(Error::Invalid(format!("decoder block needs channels divisible by 8, got {channels}")));
        }
        Ok(Self {
            channels,
            factor,
            a: Conv2dParams::same(format!("{name}.a"), 3, channels, channels),
            b: Conv2dParams::same(format!("{name}.b"), 3, channels, channels),
            up: ConvT2dParams::new(format!("{name}.up"), factor, channels, channels / 8, factor),
        })
    }

    pub fn init<T: Float>(&self, p: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.a.init(p, rng);
        self.b.init(p, rng);
        self.up.init(p, rng);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let s = g.tape.shape(f).to_vec();
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::Shape(format!("decoder block expects {} channels, got {s:?}", self.channels)));
        }
        let y = self.a.forward(g, f)?;
        let y = g.tape.leaky_relu(y, T::c(LEAKY_SLOPE));
        let y = self.b.forward(g, y)?;
        let y = g.tape.leaky_relu(y, T::c(LEAKY_SLOPE));
        let y = self.up.forward(g, y)?;
        debug_assert_eq!(g.tape.shape(y), &[s[0] * self.factor, s[1] * self.factor, s[2] / 8]);
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HyTecOutputs {
    pub probs: Var,
    /// Full-resolution heights `[W, W]`.
    pub height: Var,
    /// Auxiliary heights, coarse to fine.
    pub aux: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct HyTec {
    pub cfg: HyTecConfig,
    embed1: Linear,
    embed2: Linear,
    blocks: Vec<EncoderBlock>,
    rbs: Vec<ReprojectionBlock>,
    fuse_up: Vec<ConvT2dParams>,
    aux_heads: Vec<Conv2dParams>,
    db: DecoderBlock,
    head: DualHead,
}

pub const POS_TABLE: &str = "embed.pos";

impl HyTec {
    pub fn new(cfg: HyTecConfig) -> Result<Self> {
        cfg.validate()?;
        let (p, d, l) = (cfg.patch, cfg.dim, cfg.l_hat);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&format!("block{}", i + 1), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let rbs = (1..=4).map(|i| ReprojectionBlock::new(&format!("rb{i}"), i, d, l)).collect::<Result<_>>()?;
        Ok(Self {
            embed1: Linear::new("embed.group1", p * p * cfg.group1.len(), d),
            embed2: Linear::new("embed.group2", p * p * cfg.group2.len(), d),
            blocks,
            rbs,
            fuse_up: (1..4).map(|i| ConvT2dParams::new(format!("fuse{i}.up"), 2, l, l, 2)).collect(),
            aux_heads: (1..=3).map(|i| Conv2dParams::new(format!("aux{i}"), 1, l, 1, 1, 0)).collect(),
            db: DecoderBlock::new("db", l, cfg.db_factor())?,
            head: DualHead::new("head", l / 8, cfg.bins.k()).with_centers(cfg.bins.centers()),
            cfg,
        })
    }

    pub fn init<T: Float>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut p = ParamSet::new();
        self.embed1.init(&mut p, rng);
        self.embed2.init(&mut p, rng);
        let n = 2 * self.cfg.tokens_per_group();
        let pos = (0..n * self.cfg.dim).map(|_| T::c(rng.gen_range(-0.02..0.02))).collect();
        p.insert(POS_TABLE, Tensor::new(&[n, self.cfg.dim], pos).expect("positional table").with_grad());
        self.blocks.iter().for_each(|b| b.init(&mut p, rng));
        self.rbs.iter().for_each(|b| b.init(&mut p, rng));
        self.fuse_up.iter().for_each(|b| b.init(&mut p, rng));
        self.aux_heads.iter().for_each(|b| b.init(&mut p, rng));
        self.db.init(&mut p, rng);
        self.head.init(&mut p, rng);
        p
    }

    /// Token matrix `[2N×D]`: group-1 tokens first, then group-2, plus the positional table.
    pub fn embed<T: Float>(&self, g: &mut Graph<T>, s2: Var) -> Result<Var> {
        let s = g.tape.shape(s2).to_vec();
        if s.len() != 3 || s[0] != self.cfg.image || s[1] != self.cfg.image || s[2] < self.cfg.input_channels() {
            return Err(Error::Shape(format!(
                "expected a {0}×{0}×{1} image, got {s:?}",
                self.cfg.image,
                self.cfg.input_channels()
            )));
        }
        let mut rows = Vec::with_capacity(2);
        for (bands, proj) in [(&self.cfg.group1, &self.embed1), (&self.cfg.group2, &self.embed2)] {
            let x = select_bands(g, s2, bands)?;
            let patches = patchify(g, x, self.cfg.patch)?;
            rows.push(proj.forward(g, patches)?);
        }
        let tokens = g.tape.concat(&rows, 0)?;
        let pos = g.p(POS_TABLE)?;
        g.tape.add(tokens, pos)
    }

    /// Runs every encoder block, returning all intermediate outputs.
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(g, x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s2: Var) -> Result<HyTecOutputs> {
        let tokens = self.embed(g, s2)?;
        let layers = self.encode(g, tokens)?;
        let n = self.cfg.tokens_per_group();
        let mut reproj = Vec::with_capacity(4);
        for (rb, &tap) in self.rbs.iter().zip(&self.cfg.taps) {
            // only the group-1 tokens reach the decoder
            let t = g.tape.slice(layers[tap - 1], 0, 0, n)?;
            let f = spatial_concat(g, t)?;
            reproj.push(rb.forward(g, f)?);
        }
        let mut fused = reproj[0];
        let mut aux = Vec::with_capacity(3);
        for ((up, &r), head) in self.fuse_up.iter().zip(&reproj[1..]).zip(&self.aux_heads) {
            let u = up.forward(g, fused)?;
            fused = g.tape.add(u, r)?;
            let h = head.forward(g, fused)?;
            let h = g.tape.softplus(h);
            let side = g.tape.shape(h)[0];
            aux.push(g.tape.reshape(h, &[side, side])?);
        }
        let f = self.db.forward(g, fused)?;
        let (probs, height) = self.head.forward(g, f)?;
        let w = self.cfg.image;
        if g.tape.shape(height) != [w, w] {
            return Err(Error::Shape(format!("decoder produced {:?}, expected {w}×{w}", g.tape.shape(height))));
        }
        Ok(HyTecOutputs { probs, height, aux: [aux[0], aux[1], aux[2]] })
    }

    /// Names of parameters that only feed the auxiliary outputs.
    pub fn aux_head_params(&self) -> Vec<String> {
        self.aux_heads.iter().flat_map(|h| [format!("{}.w", h.name), format!("{}.b", h.name)]).collect()
    }

    /// Names of parameters that only feed the full-resolution outputs.
    pub fn main_head_params<T: Float>(&self, params: &ParamSet<T>) -> Vec<String> {
        params.names().filter(|n| n.starts_with("db.") || n.starts_with("head.")).map(str::to_string).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn taps_are_evenly_spaced() {
        assert_eq!(default_taps(12), [3, 6, 9, 12]);
        assert_eq!(default_taps(2), [1, 1, 2, 2]);
        assert_eq!(default_taps(4), [1, 2, 3, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(HyTecConfig::default().validate().is_ok());
        assert!(HyTecConfig::miniature().validate().is_ok());
        assert!(HyTecConfig { image: 250, ..HyTecConfig::default() }.validate().is_err());
        assert!(HyTecConfig { heads: 7, ..HyTecConfig::default() }.validate().is_err());
        assert!(HyTecConfig { taps: [3, 2, 9, 12], ..HyTecConfig::default() }.validate().is_err());
        assert!(HyTecConfig { l_hat: 20, ..HyTecConfig::default() }.validate().is_err());
        let d = HyTecConfig::default();
        assert_eq!(d.tokens_per_group(), 256);
        assert_eq!(d.aux_sides(), [16, 32, 64]);
        assert_eq!(d.db_factor(), 4);
    }

    #[test]
    fn patch_embedding_full_size() {
        let cfg = HyTecConfig::default();
        let mut p = ParamSet::<f64>::new();
        let e = Linear::new("e", 16 * 16 * 4, 1536);
        e.init(&mut p, &mut rng(1));
        let mut g = Graph::new(&p, Mode::Eval);
        let x = g.input(&random(&[256, 256, 4], 2));
        let patches = patchify(&mut g, x, cfg.patch).unwrap();
        assert_eq!(g.tape.shape(patches), &[256, 1024]);
        let t = e.forward(&mut g, patches).unwrap();
        assert_eq!(g.tape.shape(t), &[256, 1536]);
    }

    #[test]
    fn patchify_is_row_major_and_local() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p, Mode::Eval);
        let img = random(&[8, 8, 2], 3);
        let x = g.input(&img);
        let patches = patchify(&mut g, x, 4).unwrap();
        let v = g.tape.value(patches).to_vec();
        // patch 1 is rows 0..4, cols 4..8; entry (r, c, b) sits at (r·4 + c)·2 + b
        for r in 0..4 {
            for c in 0..4 {
                for b in 0..2 {
                    assert_eq!(v[32 + (r * 4 + c) * 2 + b], img.at(&[r, 4 + c, b]));
                }
            }
        }
        let mut other = img.clone();
        other.set(&[5, 1, 0], 9.0);
        let y = g.input(&other);
        let q = patchify(&mut g, y, 4).unwrap();
        let changed: Vec<usize> = (0..4).filter(|&row| g.tape.value(q)[row * 32..row * 32 + 32] != v[row * 32..row * 32 + 32]).collect();
        assert_eq!(changed, vec![2]);
    }

    #[test]
    fn zero_image_embeds_to_bias() {
        let net = HyTec::new(HyTecConfig::miniature()).unwrap();
        let mut p = net.init::<f64>(&mut rng(4));
        p.get_mut(POS_TABLE).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&p, Mode::Eval);
        let x = g.input(&Tensor::zeros(&[32, 32, 10]));
        let t = net.embed(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(t), &[32, 32]);
        let (b1, b2) = (p.get("embed.group1.b").unwrap().data(), p.get("embed.group2.b").unwrap().data());
        let v = g.tape.value(t);
        for row in 0..32 {
            let want = if row < 16 { b1 } else { b2 };
            assert_eq!(&v[row * 32..row * 32 + 32], want);
        }
    }

    #[test]
    fn spatial_concat_round_trip() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p, Mode::Eval);
        let t = random(&[4, 2], 5);
        let tv = g.input(&t);
        let grid = spatial_concat(&mut g, tv).unwrap();
        assert_eq!(g.tape.shape(grid), &[2, 2, 2]);
        let gt = g.tape.to_tensor(grid);
        assert_eq!(gt.at(&[1, 0, 1]), t.at(&[2, 1]));
        let back = g.tape.reshape(grid, &[4, 2]).unwrap();
        assert_eq!(g.tape.value(back), t.data());
        let bad = g.input(&random(&[5, 2], 6));
        assert!(spatial_concat(&mut g, bad).is_err());
        let big = g.input(&random(&[256, 8], 7));
        let grid = spatial_concat(&mut g, big).unwrap();
        assert_eq!(g.tape.shape(grid), &[16, 16, 8]);
    }

    #[test]
    fn one_full_width_block_preserves_shape() {
        let b = EncoderBlock::new("b", 1536, 12, 4).unwrap();
        let mut p = ParamSet::<f64>::new();
        b.init(&mut p, &mut rng(8));
        let mut g = Graph::new(&p, Mode::Eval);
        let x = g.input(&random(&[512, 1536], 9));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), &[512, 1536]);
    }

    #[test]
    fn zeroed_block_is_identity() {
        let b = EncoderBlock::new("b", 8, 2, 4).unwrap();
        let mut p = ParamSet::<f64>::new();
        b.init(&mut p, &mut rng(10));
        for name in ["b.attn.out.w", "b.attn.out.b", "b.fc2.w", "b.fc2.b"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random(&[5, 8], 11);
        let mut g = Graph::new(&p, Mode::Eval);
        let xv = g.input(&x);
        let y = b.forward(&mut g, xv).unwrap();
        assert_eq!(g.tape.value(y), x.data());
    }

    #[test]
    fn encoder_grad_check_two_blocks() {
        let blocks: Vec<EncoderBlock> = (0..2).map(|i| EncoderBlock::new(&format!("b{i}"), 16, 2, 2).unwrap()).collect();
        let mut p = ParamSet::<f64>::new();
        blocks.iter().for_each(|b| b.init(&mut p, &mut rng(12)));
        let x = random(&[8, 16], 13);
        let probe = random(&[8, 16], 14);
        let err = grad_check_params(
            |g| {
                let mut y = g.input(&x);
                for b in &blocks {
                    y = b.forward(g, y)?;
                }
                let pr = g.input(&probe);
                let y = g.tape.mul(y, pr)?;
                Ok(g.tape.sum(y))
            },
            &p,
            Mode::Eval,
            3,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reprojection_shapes() {
        for (stage, side) in [(1, 8), (2, 16), (3, 32), (4, 64)] {
            let rb = ReprojectionBlock::new("rb", stage, 24, 8).unwrap();
            let mut p = ParamSet::<f64>::new();
            rb.init(&mut p, &mut rng(15));
            let mut g = Graph::new(&p, Mode::Eval);
            let f = g.input(&random(&[16, 16, 24], 16));
            let y = rb.forward(&mut g, f).unwrap();
            assert_eq!(g.tape.shape(y), &[side, side, 8]);
        }
        assert!(ReprojectionBlock::new("rb", 5, 4, 8).is_err());
    }

    #[test]
    fn reprojection_full_width_stages() {
        for (stage, side) in [(1, 8), (4, 64)] {
            let rb = ReprojectionBlock::new("rb", stage, 1536, 256).unwrap();
            let mut p = ParamSet::<f64>::new();
            rb.init(&mut p, &mut rng(17));
            let mut g = Graph::new(&p, Mode::Eval);
            let f = g.input(&random(&[16, 16, 1536], 18));
            let y = rb.forward(&mut g, f).unwrap();
            assert_eq!(g.tape.shape(y), &[side, side, 256]);
        }
    }

    #[test]
    fn decoder_block_shapes_and_grad() {
        for (input, out) in [([8, 8, 256], [32, 32, 32]), ([64, 64, 64], [256, 256, 8])] {
            let db = DecoderBlock::new("db", input[2], 4).unwrap();
            let mut p = ParamSet::<f64>::new();
            db.init(&mut p, &mut rng(19));
            let mut g = Graph::new(&p, Mode::Eval);
            let f = g.input(&random(&input, 20));
            let y = db.forward(&mut g, f).unwrap();
            assert_eq!(g.tape.shape(y), &out);
        }
        assert!(DecoderBlock::new("db", 12, 4).is_err());

        let db = DecoderBlock::new("db", 8, 4).unwrap();
        let mut p = ParamSet::<f64>::new();
        db.init(&mut p, &mut rng(21));
        let x = random(&[3, 3, 8], 22);
        let probe = random(&[12, 12, 1], 23);
        let err = grad_check_params(
            |g| {
                let xv = g.input(&x);
                let y = db.forward(g, xv)?;
                let pr = g.input(&probe);
                let y = g.tape.mul(y, pr)?;
                Ok(g.tape.sum(y))
            },
            &p,
            Mode::Eval,
            4,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn miniature_forward_contract() {
        for (image, patch) in [(32, 8), (64, 16)] {
            let cfg = HyTecConfig { image, patch, ..HyTecConfig::miniature() };
            let net = HyTec::new(cfg.clone()).unwrap();
            let p = net.init::<f64>(&mut rng(24));
            let mut g = Graph::new(&p, Mode::Eval);
            let x = g.input(&random(&[image, image, 10], 25));
            let out = net.forward(&mut g, x).unwrap();
            assert_eq!(g.tape.shape(out.height), &[image, image]);
            assert_eq!(g.tape.shape(out.probs), &[image, image, 10]);
            for (a, side) in out.aux.iter().zip(cfg.aux_sides()) {
                assert_eq!(g.tape.shape(*a), &[side, side]);
                assert!(g.tape.value(*a).iter().all(|&h| h > 0.0));
            }
            assert!(g.tape.value(out.height).iter().all(|&h| h > 0.0));
        }
        let cfg = HyTecConfig { image: 64, patch: 16, ..HyTecConfig::miniature() };
        assert_eq!(cfg.aux_sides(), [4, 8, 16]);
    }

    #[test]
    fn encoder_without_positions_is_permutation_equivariant() {
        // without the positional table the encoder sees an unordered token set
        let net = HyTec::new(HyTecConfig::miniature()).unwrap();
        let p = net.init::<f64>(&mut rng(26));
        let x = random(&[32, 32], 27);
        let perm: Vec<usize> = (0..32).map(|i| (i * 7 + 3) % 32).collect();
        let mut xp = vec![0.0; 32 * 32];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * 32..dst * 32 + 32].copy_from_slice(&x.data()[src * 32..src * 32 + 32]);
        }
        let run = |inp: &Tensor<f64>| {
            let mut g = Graph::new(&p, Mode::Eval);
            let t = g.input(inp);
            let layers = net.encode(&mut g, t).unwrap();
            g.tape.value(*layers.last().unwrap()).to_vec()
        };
        let y = run(&x);
        let yp = run(&Tensor::new(&[32, 32], xp).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..32 {
                let (a, b) = (yp[dst * 32 + j], y[src * 32 + j]);
                // softmax sums run in permuted order, so equality is up to rounding
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn end_to_end_grad_check_miniature() {
        let net = HyTec::new(HyTecConfig::miniature()).unwrap();
        let p = net.init::<f64>(&mut rng(29));
        let x = random(&[32, 32, 10], 30);
        let probes: Vec<Tensor<f64>> = [32, 4, 8, 16].iter().enumerate().map(|(i, &s)| random(&[s, s], 31 + i as u64)).collect();
        let err = grad_check_params(
            |g| {
                let xv = g.input(&x);
                let out = net.forward(g, xv)?;
                let mut total = None;
                for (v, pr) in std::iter::once(out.height).chain(out.aux).zip(&probes) {
                    let pv = g.input(pr);
                    let t = g.tape.mul(v, pv)?;
                    let s = g.tape.sum(t);
                    total = Some(match total {
                        Some(a) => g.tape.add(a, s)?,
                        None => s,
                    });
                }
                Ok(total.unwrap())
            },
            &p,
            Mode::Eval,
            2,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
