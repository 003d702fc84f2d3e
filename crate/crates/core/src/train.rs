//! Training loops: the U-Net family on sparse GEDI targets, and Hy-TeC distilled
//! from two frozen single-modality teachers.
//!
//! A batch is a list of independent samples. Each sample runs its own forward and
//! backward pass (in parallel when a thread pool is available); gradients and
//! BatchNorm statistics are then reduced in sample order, so results do not depend
//! on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::datapipe::{filter_gedi, rasterize_targets, FilterConfig, PatchSpec, SynthDataset};
use crate::error::{Error, Result};
use crate::losses::{
    adaptive_nll, batch_class_weights, huber, kd_teacher_consensus, weighted_cross_entropy, weighted_total, AdaptiveLossState,
    ClassTarget, HeightBinning, HyTecLossConfig,
};
use crate::nn::{bilinear_values, Graph, Mode};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::unet::{Arch, HeadKind, UNet, UNetConfig};
use crate::vit::{default_taps, HyTec, HyTecConfig};

/// Any trainable model variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    UNet(Arch),
    HyTec,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::UNet(Arch::TwoMou),
        ModelKind::UNet(Arch::TwoMdu),
        ModelKind::UNet(Arch::A2Mdu),
        ModelKind::UNet(Arch::TeacherS1),
        ModelKind::UNet(Arch::TeacherS2),
        ModelKind::HyTec,
    ];

    pub fn uses_adaptive(self) -> bool {
        matches!(self, ModelKind::UNet(Arch::A2Mdu) | ModelKind::HyTec)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::UNet(a) => a.fmt(f),
            ModelKind::HyTec => f.write_str("hytec"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "hytec" {
            Ok(ModelKind::HyTec)
        } else {
            s.parse().map(ModelKind::UNet)
        }
    }
}

/// Inputs and sparse targets for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub s2: Tensor<f64>,
    pub s1: Tensor<f64>,
    pub target: Tensor<f64>,
    pub mask: Tensor<f64>,
}

impl Sample {
    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

/// A full tile: inputs, rasterized GEDI targets and (for synthetic data) the dense truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TileData {
    pub id: usize,
    pub sample: Sample,
    pub truth: Option<Tensor<f64>>,
}

impl TileData {
    pub fn rows(&self) -> usize {
        self.sample.target.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.sample.target.shape()[1]
    }

    pub fn patch(&self, spec: &PatchSpec) -> Result<Sample> {
        let s = &self.sample;
        Ok(Sample { s2: spec.apply(&s.s2)?, s1: spec.apply(&s.s1)?, target: spec.apply(&s.target)?, mask: spec.apply(&s.mask)? })
    }
}

/// Filters the shots and rasterizes the survivors onto every tile.
pub fn prepare_tiles(ds: &SynthDataset, filter: &FilterConfig) -> Vec<TileData> {
    let report = filter_gedi(&ds.shots, filter);
    let kept: Vec<_> = report.retained.iter().map(|&i| &ds.shots[i]).collect();
    ds.tiles
        .iter()
        .map(|t| {
            let (target, mask) = rasterize_targets(kept.iter().copied(), &t.bounds);
            TileData {
                id: t.id,
                sample: Sample { s2: t.s2.clone(), s1: t.s1.clone(), target, mask },
                truth: Some(t.heights.clone()),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    /// U-Net stem width `F₀`.
    pub stem_width: usize,
    /// Hy-TeC shape; `image` is overridden by `patch`.
    pub hytec: HyTecConfig,
    pub bins: HeightBinning,
    pub epochs: usize,
    /// Defaults to one pass over the (duplicated) training list.
    pub steps_per_epoch: Option<usize>,
    pub batch: usize,
    pub patch: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub loss: HyTecLossConfig,
    /// Hy-TeC only: include the teacher terms.
    pub kd: bool,
    /// Projection interval for the adaptive loss shape after every step.
    pub alpha_range: (f64, f64),
    pub seed: u64,
}

/// Desk-scale Hy-TeC: 32-px windows, 8-px patches, four blocks of width 32.
pub fn desk_hytec() -> HyTecConfig {
    HyTecConfig { image: 32, patch: 8, dim: 32, depth: 4, heads: 2, mlp_ratio: 2, l_hat: 16, taps: default_taps(4), ..HyTecConfig::default() }
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        let (optimizer, schedule) = match kind {
            ModelKind::HyTec => (OptimizerKind::adamw(), Schedule::hytec_default()),
            ModelKind::UNet(_) => (OptimizerKind::sgd(), Schedule::unet_default()),
        };
        Self {
            kind,
            stem_width: 16,
            hytec: desk_hytec(),
            bins: HeightBinning::default(),
            epochs: 250,
            steps_per_epoch: None,
            batch: 12,
            patch: 32,
            optimizer,
            schedule,
            loss: HyTecLossConfig::default(),
            kd: true,
            alpha_range: (1.0, 2.0),
            seed: 0,
        }
    }

    pub fn hytec_config(&self) -> HyTecConfig {
        HyTecConfig { image: self.patch, bins: self.bins.clone(), ..self.hytec.clone() }
    }

    pub fn unet_config(&self) -> Option<UNetConfig> {
        match self.kind {
            ModelKind::UNet(a) => Some(UNetConfig { bins: self.bins.clone(), ..UNetConfig::new(a).with_stem_width(self.stem_width) }),
            ModelKind::HyTec => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Invalid(format!("batch, epochs and steps per epoch must be positive: {self:?}")));
        }
        let (lo, hi) = self.alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 2.0) {
            return Err(Error::Invalid(format!("alpha range {:?} must be a nonempty part of [0, 2]", self.alpha_range)));
        }
        self.loss.validate()?;
        match self.unet_config() {
            Some(u) => {
                u.validate()?;
                u.check_extent(self.patch, self.patch)
            }
            None => self.hytec_config().validate(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Net {
    UNet(UNet),
    HyTec(HyTec),
}

impl Net {
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.unet_config() {
            Some(u) => Net::UNet(UNet::new(u)?),
            None => Net::HyTec(HyTec::new(cfg.hytec_config())?),
        })
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
        match self {
            Net::UNet(n) => n.init(rng),
            Net::HyTec(n) => n.init(rng),
        }
    }

    /// Window side the model needs, if fixed.
    pub fn window(&self) -> Option<usize> {
        match self {
            Net::UNet(_) => None,
            Net::HyTec(n) => Some(n.cfg.image),
        }
    }
}

/// Model outputs bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub height: Var,
    pub probs: Option<Var>,
    pub aux: Option<[Var; 3]>,
}

fn forward(net: &Net, g: &mut Graph<f64>, s: &Sample) -> Result<Outputs> {
    match net {
        Net::UNet(n) => {
            let (primary, secondary) = match n.cfg.arch {
                Arch::TeacherS1 => (g.input(&s.s1), None),
                Arch::TeacherS2 => (g.input(&s.s2), None),
                _ => {
                    let a = g.input(&s.s2);
                    (a, Some(g.input(&s.s1)))
                }
            };
            let o = n.forward(g, primary, secondary)?;
            Ok(Outputs { height: o.height, probs: o.probs, aux: None })
        }
        Net::HyTec(n) => {
            let x = g.input(&s.s2);
            let o = n.forward(g, x)?;
            Ok(Outputs { height: o.height, probs: Some(o.probs), aux: Some(o.aux) })
        }
    }
}

/// A frozen single-modality U-Net.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub net: UNet,
    pub params: ParamSet<f64>,
}

impl Teacher {
    pub fn new(net: UNet, mut params: ParamSet<f64>) -> Result<Self> {
        if !net.cfg.arch.is_teacher() {
            return Err(Error::Invalid(format!("{} is not a teacher architecture", net.cfg.arch)));
        }
        params.freeze();
        Ok(Self { net, params })
    }

    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        match &t.net {
            Net::UNet(n) => Self::new(n.clone(), t.params.clone()),
            Net::HyTec(_) => Err(Error::Invalid("Hy-TeC cannot act as a teacher".into())),
        }
    }

    pub fn predict(&self, s: &Sample) -> Result<Tensor<f64>> {
        let mut g = Graph::new(&self.params, Mode::Eval);
        let o = forward(&Net::UNet(self.net.clone()), &mut g, s)?;
        Ok(g.tape.to_tensor(o.height))
    }
}

#[derive(Clone, Debug)]
pub struct Teachers {
    pub s1: Teacher,
    pub s2: Teacher,
}

impl Teachers {
    pub fn new(s1: Teacher, s2: Teacher) -> Result<Self> {
        if s1.net.cfg.arch != Arch::TeacherS1 || s2.net.cfg.arch != Arch::TeacherS2 {
            return Err(Error::Invalid(format!("teachers must be teacher_s1 and teacher_s2, got {} and {}", s1.net.cfg.arch, s2.net.cfg.arch)));
        }
        Ok(Self { s1, s2 })
    }
}

/// Teacher-consensus targets at the three auxiliary resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct KdTargets {
    /// `(side, value, valid)` coarse to fine.
    pub levels: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Downsamples both teacher maps to each side, then keeps pixels where they agree.
pub fn kd_targets(t1: &Tensor<f64>, t2: &Tensor<f64>, sides: [usize; 3], tol: f64) -> Result<KdTargets> {
    let s = t1.shape();
    if s.len() != 2 || t2.shape() != s {
        return Err(Error::Shape(format!("teacher maps {:?} and {:?}", s, t2.shape())));
    }
    let levels = sides
        .iter()
        .map(|&side| {
            let a = bilinear_values(t1.data(), s[0], s[1], 1, side, side);
            let b = bilinear_values(t2.data(), s[0], s[1], 1, side, side);
            let (v, m) = kd_teacher_consensus(&a, &b, tol)?;
            Ok((side, v, m))
        })
        .collect::<Result<_>>()?;
    Ok(KdTargets { levels })
}

/// Scalar loss vars of one sample's objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub aux: [Option<Var>; 3],
    pub ce: Option<Var>,
    pub reg: Var,
    /// `ce + α_cr·reg` for the dual heads, `reg` otherwise.
    pub main: Var,
}

/// Mean loss values over a batch; missing parts are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub aux: [Option<f64>; 3],
    pub ce: Option<f64>,
    pub reg: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub parts: LossParts,
}

pub const TRACE_HEADER: &str = "step,epoch,lr,total,aux1,aux2,aux3,ce,reg";

impl TraceRow {
    pub fn csv(&self) -> String {
        let o = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            p.total,
            o(p.aux[0]),
            o(p.aux[1]),
            o(p.aux[2]),
            o(p.ce),
            o(p.reg)
        )
    }
}

pub fn write_trace(rows: &[TraceRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    rows.iter().try_for_each(|r| writeln!(out, "{}", r.csv()))
}

struct SampleResult {
    parts: LossParts,
    grads: Vec<(String, Vec<f64>)>,
    updates: Vec<(String, Vec<f64>)>,
}

const ADAPTIVE: &str = "adaptive";
const STATE_FILE: &str = "state.txt";

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Net,
    pub params: ParamSet<f64>,
    pub opt: Optimizer<f64>,
    adaptive: Option<AdaptiveLossState>,
    teachers: Option<Teachers>,
    pub epochs_done: usize,
    pub steps_done: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, teachers: Option<Teachers>) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind == ModelKind::HyTec && cfg.kd && teachers.is_none() {
            return Err(Error::Missing("Hy-TeC distillation needs teacher_s1 and teacher_s2 checkpoints".into()));
        }
        let net = Net::build(&cfg)?;
        let mut params = net.init(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let adaptive = cfg.kind.uses_adaptive().then(|| AdaptiveLossState::new(ADAPTIVE));
        if let Some(a) = &adaptive {
            a.init(&mut params)?;
        }
        Ok(Self { opt: Optimizer::new(cfg.optimizer), cfg, net, params, adaptive, teachers, epochs_done: 0, steps_done: 0 })
    }

    /// Current adaptive-loss `(alpha, c)`, if the model uses it.
    pub fn adaptive_values(&self) -> Option<(f64, f64)> {
        self.adaptive.as_ref().and_then(|a| a.values(&self.params).ok())
    }

    /// Teacher targets for one sample (Hy-TeC with distillation only).
    pub fn kd_for(&self, s: &Sample) -> Result<Option<KdTargets>> {
        let (Some(t), Net::HyTec(n)) = (&self.teachers, &self.net) else { return Ok(None) };
        if !self.cfg.kd {
            return Ok(None);
        }
        let (a, b) = (t.s1.predict(s)?, t.s2.predict(s)?);
        kd_targets(&a, &b, n.cfg.aux_sides(), self.cfg.loss.consensus_tol).map(Some)
    }

    /// Builds one sample's objective on `g`.
    pub fn objective(&self, g: &mut Graph<f64>, s: &Sample, class: Option<(&ClassTarget, &[f64])>, kd: Option<&KdTargets>) -> Result<Objective> {
        let out = forward(&self.net, g, s)?;
        let lc = &self.cfg.loss;
        let (tgt, mask) = (s.target.data(), s.mask.data());
        let reg = match &self.adaptive {
            Some(a) => {
                let (alpha, c) = a.bind(g)?;
                adaptive_nll(&mut g.tape, out.height, tgt, mask, alpha, c)?
            }
            None => huber(&mut g.tape, out.height, tgt, mask, lc.delta)?,
        };
        let (ce, main) = match (out.probs, class) {
            (Some(p), Some((ct, w))) => {
                let ce = weighted_cross_entropy(&mut g.tape, p, ct, w)?;
                let r = g.tape.scale(reg, lc.alpha_cr);
                (Some(ce), g.tape.add(ce, r)?)
            }
            (None, _) => (None, reg),
            (Some(_), None) => return Err(Error::Invalid("dual head needs class targets and weights".into())),
        };
        let mut aux = [None; 3];
        if let (Some(preds), Some(kd)) = (out.aux, kd) {
            for ((slot, &pred), (_, v, m)) in aux.iter_mut().zip(&preds).zip(&kd.levels) {
                if m.iter().any(|&x| x != 0.0) {
                    *slot = Some(huber(&mut g.tape, pred, v, m, lc.delta)?);
                }
            }
        }
        let total = if self.cfg.kind == ModelKind::HyTec { weighted_total(&mut g.tape, aux, main, lc.betas)? } else { main };
        Ok(Objective { total, aux, ce, reg, main })
    }

    fn class_targets(&self, samples: &[Sample]) -> Result<(Vec<Option<ClassTarget>>, Vec<f64>)> {
        let dual = match &self.net {
            Net::UNet(n) => n.cfg.head() == HeadKind::Dual,
            Net::HyTec(_) => true,
        };
        if !dual {
            return Ok((vec![None; samples.len()], Vec::new()));
        }
        let targets: Vec<Option<ClassTarget>> = samples
            .iter()
            .map(|s| (s.valid_count() > 0).then(|| ClassTarget::from_heights(&s.target, &s.mask, &self.cfg.bins)).transpose())
            .collect::<Result<_>>()?;
        let present: Vec<&ClassTarget> = targets.iter().flatten().collect();
        let w = if present.is_empty() { Vec::new() } else { batch_class_weights(&present)? };
        Ok((targets, w))
    }

    fn run_batch(&self, samples: &[Sample]) -> Result<Vec<SampleResult>> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (class, weights) = self.class_targets(samples)?;
        let results: Vec<Option<SampleResult>> = samples
            .par_iter()
            .zip(&class)
            .map(|(s, ct)| -> Result<Option<SampleResult>> {
                if s.valid_count() == 0 {
                    return Ok(None);
                }
                let kd = self.kd_for(s)?;
                let mut g = Graph::new(&self.params, Mode::Train);
                let obj = self.objective(&mut g, s, ct.as_ref().map(|c| (c, weights.as_slice())), kd.as_ref())?;
                let item = |v: Var| g.tape.item(v);
                let parts = LossParts {
                    total: item(obj.total),
                    aux: obj.aux.map(|a| a.map(item)),
                    ce: obj.ce.map(item),
                    reg: Some(item(obj.reg)),
                };
                let grads = g.tape.backward(obj.total)?;
                let grads = grads.params().filter_map(|(n, v)| v.map(|v| (n.to_string(), v.to_vec()))).collect();
                Ok(Some(SampleResult { parts, grads, updates: g.take_updates() }))
            })
            .collect::<Result<_>>()?;
        let results: Vec<SampleResult> = results.into_iter().flatten().collect();
        if results.is_empty() {
            return Err(Error::EmptyMask("every sample of the batch"));
        }
        Ok(results)
    }

    fn mean_parts(results: &[SampleResult]) -> LossParts {
        let mean = |f: &dyn Fn(&LossParts) -> Option<f64>| {
            let v: Vec<f64> = results.iter().filter_map(|r| f(&r.parts)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        LossParts {
            total: mean(&|p| Some(p.total)).unwrap_or(0.0),
            aux: [mean(&|p| p.aux[0]), mean(&|p| p.aux[1]), mean(&|p| p.aux[2])],
            ce: mean(&|p| p.ce),
            reg: mean(&|p| p.reg),
        }
    }

    /// Mean loss on a batch without touching parameters or statistics.
    pub fn evaluate_loss(&self, samples: &[Sample]) -> Result<LossParts> {
        Ok(Self::mean_parts(&self.run_batch(samples)?))
    }

    /// One optimizer step on a batch at learning rate `lr`.
    pub fn step(&mut self, samples: &[Sample], lr: f64) -> Result<LossParts> {
        let results = self.run_batch(samples)?;
        let parts = Self::mean_parts(&results);
        if let Some(bad) = results.iter().position(|r| !r.parts.total.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss of sample {bad} at step {} (epoch {}): {:?}; adaptive (alpha, c) = {:?}",
                self.steps_done,
                self.epochs_done,
                results[bad].parts,
                self.adaptive_values()
            )));
        }
        let n = results.len() as f64;
        self.params.zero_grad();
        let mut updates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &results {
            for (name, g) in &r.grads {
                let t = self.params.get_mut(name)?;
                if t.requires_grad {
                    t.accumulate_grad(g);
                }
            }
            for (name, v) in &r.updates {
                let acc = updates.entry(name.clone()).or_insert_with(|| vec![0.0; v.len()]);
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b / n);
            }
        }
        for (_, t) in self.params.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.opt.step(&mut self.params, lr)?;
        self.params.apply_updates(updates.into_iter().collect())?;
        if self.adaptive.is_some() {
            let (lo, hi) = self.cfg.alpha_range;
            let a = self.params.get_mut(&format!("{ADAPTIVE}.alpha"))?;
            a.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
        self.steps_done += 1;
        Ok(parts)
    }

    pub fn steps_per_epoch(&self, list_len: usize) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| list_len.div_ceil(self.cfg.batch)).max(1)
    }

    /// Runs one epoch over `list` (indices into `tiles`, duplicates allowed).
    pub fn train_epoch(&mut self, tiles: &[TileData], list: &[usize], mut on_step: impl FnMut(&TraceRow)) -> Result<Vec<TraceRow>> {
        if list.is_empty() {
            return Err(Error::Invalid("empty training list".into()));
        }
        if let Some(&bad) = list.iter().find(|&&i| i >= tiles.len()) {
            return Err(Error::Invalid(format!("training list refers to tile {bad} of {}", tiles.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epochs_done as u64 + 1);
        let mut order = list.to_vec();
        order.shuffle(&mut rng);
        let steps = self.steps_per_epoch(order.len());
        let b = self.cfg.batch;
        let mut rows = Vec::with_capacity(steps);
        for s in 0..steps {
            let samples = (0..b)
                .map(|j| {
                    let t = &tiles[order[(s * b + j) % order.len()]];
                    let spec = PatchSpec::draw(&mut rng, t.rows(), t.cols(), self.cfg.patch)?;
                    t.patch(&spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = self.cfg.schedule.lr(self.epochs_done as f64 + s as f64 / steps as f64);
            let parts = self.step(&samples, lr)?;
            let row = TraceRow { step: self.steps_done, epoch: self.epochs_done + 1, lr, parts };
            on_step(&row);
            rows.push(row);
        }
        self.epochs_done += 1;
        Ok(rows)
    }

    /// Eval-mode height map for one window.
    pub fn predict(&self, s: &Sample) -> Result<Tensor<f64>> {
        let mut g = Graph::new(&self.params, Mode::Eval);
        let o = forward(&self.net, &mut g, s)?;
        Ok(g.tape.to_tensor(o.height))
    }

    /// Heights over a whole tile; fixed-window models are run window by window.
    pub fn predict_tile(&self, t: &TileData) -> Result<Tensor<f64>> {
        let Some(w) = self.net.window() else { return self.predict(&t.sample) };
        let (rows, cols) = (t.rows(), t.cols());
        if rows % w != 0 || cols % w != 0 {
            return Err(Error::Shape(format!("tile {rows}×{cols} is not a multiple of the {w}-px model window")));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for r0 in (0..rows).step_by(w) {
            for c0 in (0..cols).step_by(w) {
                let spec = PatchSpec { row: r0, col: c0, size: w, flip_h: false, flip_v: false };
                let h = self.predict(&t.patch(&spec)?)?;
                for r in 0..w {
                    for c in 0..w {
                        out.set(&[r0 + r, c0 + c], h.at(&[r, c]));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes `params/`, `optim/` and the epoch/step counters.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save_dir(dir.join("params"))?;
        self.opt.state().save_dir(dir.join("optim"))?;
        let state = format!("kind={}\nepochs_done={}\nsteps_done={}\n", self.cfg.kind, self.epochs_done, self.steps_done);
        let p = dir.join(STATE_FILE);
        fs::write(&p, state).map_err(|e| Error::io(&p, e))
    }

    /// Restores a checkpoint written by [`Trainer::save`] for the same configuration.
    pub fn restore(&mut self, dir: &Path) -> Result<()> {
        let p = dir.join(STATE_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("{}: bad line `{line}`", p.display())))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("{}: missing `{k}`", p.display())));
        if get("kind")? != self.cfg.kind.to_string() {
            return Err(Error::Invalid(format!("checkpoint holds a {} model, configuration asks for {}", get("kind")?, self.cfg.kind)));
        }
        let params = load_matching(&dir.join("params"), &self.params)?;
        let mut opt = Optimizer::new(self.cfg.optimizer);
        opt.load_state(ParamSet::load_dir(dir.join("optim"))?)?;
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| Error::Format(format!("{}: `{k}` is not a count", p.display())));
        (self.params, self.opt) = (params, opt);
        self.epochs_done = num("epochs_done")? as usize;
        self.steps_done = num("steps_done")?;
        Ok(())
    }
}

/// Loads a parameter directory and checks it against the expected names and shapes.
pub fn load_matching(dir: &Path, expected: &ParamSet<f64>) -> Result<ParamSet<f64>> {
    let loaded = ParamSet::load_dir(dir)?;
    let names = |p: &ParamSet<f64>| p.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
    if names(&loaded) != names(expected) {
        let missing: Vec<String> = expected.names().filter(|n| !loaded.contains(n)).map(str::to_string).take(3).collect();
        return Err(Error::Invalid(format!("checkpoint {} does not match the model (first missing: {missing:?})", dir.display())));
    }
    Ok(loaded)
}

/// Loads a teacher checkpoint saved by a `teacher_s1`/`teacher_s2` trainer.
pub fn load_teacher(dir: &Path, arch: Arch, stem_width: usize, bins: &HeightBinning) -> Result<Teacher> {
    let net = UNet::new(UNetConfig { bins: bins.clone(), ..UNetConfig::new(arch).with_stem_width(stem_width) })?;
    let expected: ParamSet<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(0));
    Teacher::new(net, load_matching(&dir.join("params"), &expected)?)
}
