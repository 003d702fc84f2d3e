//! Training objectives: masked Huber, weighted cross-entropy over overlapping
//! height bins, the robust adaptive loss, and the distillation total.
//!
//! Every loss averages over valid pixels only. Targets and masks enter the tape as
//! constants; residuals are multiplied by the mask before any nonlinearity so that
//! masked-out predictions cannot reach the value or the gradient.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::params::ParamSet;
use crate::tensor::{Float, Tensor};

pub const CE_FLOOR: f64 = 1e-12;
const CONSENSUS_EPS: f64 = 1e-6;
const SCALE_FLOOR: f64 = 1e-6;

/// `K` height classes built from ascending base edges, each widened by `overlap` on both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightBinning {
    pub base_edges: Vec<f64>,
    pub overlap: f64,
}

impl Default for HeightBinning {
    /// Ten 6 m classes over 0..60 m with 1.5 m overlap.
    fn default() -> Self {
        Self::uniform(10, 6.0, 1.5).expect("valid default binning")
    }
}

impl HeightBinning {
    pub fn new(base_edges: Vec<f64>, overlap: f64) -> Result<Self> {
        if base_edges.len() < 2 {
            return Err(Error::Invalid("binning needs at least two edges".into()));
        }
        if base_edges.windows(2).any(|w| !(w[0] < w[1])) || base_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Invalid(format!("bin edges must be strictly ascending: {base_edges:?}")));
        }
        if !(overlap >= 0.0) {
            return Err(Error::Invalid(format!("bin overlap must be non-negative, got {overlap}")));
        }
        Ok(Self { base_edges, overlap })
    }

    pub fn uniform(k: usize, width: f64, overlap: f64) -> Result<Self> {
        Self::new((0..=k).map(|i| i as f64 * width).collect(), overlap)
    }

    pub fn k(&self) -> usize {
        self.base_edges.len() - 1
    }

    /// Midpoints of the base (unexpanded) bins.
    pub fn centers(&self) -> Vec<f64> {
        self.base_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Expanded half-open interval of bin `j`, clipped at 0 below.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let lo = (self.base_edges[j] - self.overlap).max(0.0);
        (lo, self.base_edges[j + 1] + self.overlap)
    }

    pub fn assign(&self, h: f64) -> Vec<f64> {
        bin_assign(h, self)
    }
}

/// Soft class target: uniform mass over every expanded interval containing `h`.
///
/// Heights beyond the last base edge clamp into the last bin; negative heights clamp to 0.
pub fn bin_assign(h: f64, bins: &HeightBinning) -> Vec<f64> {
    let k = bins.k();
    let top = bins.base_edges[k];
    let h = h.max(bins.base_edges[0]).min(top - top.abs().max(1.0) * 1e-9);
    let hits: Vec<usize> = (0..k)
        .filter(|&j| {
            let (lo, hi) = bins.interval(j);
            lo <= h && h < hi
        })
        .collect();
    let mut p = vec![0.0; k];
    if hits.is_empty() {
        // only reachable for h below the first edge when it is > 0
        p[0] = 1.0;
        return p;
    }
    let m = 1.0 / hits.len() as f64;
    for j in hits {
        p[j] = m;
    }
    p
}

/// Per-pixel class probabilities `[rows, cols, K]` with a `[rows, cols]` validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTarget {
    pub t: Tensor<f64>,
    pub mask: Tensor<f64>,
}

impl ClassTarget {
    pub fn new(t: Tensor<f64>, mask: Tensor<f64>) -> Result<Self> {
        let (ts, ms) = (t.shape(), mask.shape());
        if ts.len() != 3 || ms.len() != 2 || ts[..2] != ms[..] {
            return Err(Error::Shape(format!("class target {ts:?} with mask {ms:?}")));
        }
        let k = ts[2];
        for (i, &m) in mask.data().iter().enumerate() {
            if m != 0.0 {
                let s: f64 = t.data()[i * k..(i + 1) * k].iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("target probabilities at pixel {i} sum to {s}")));
                }
            }
        }
        Ok(Self { t, mask })
    }

    /// Builds soft targets from a height map; pixels with mask 0 get all-zero rows.
    pub fn from_heights(heights: &Tensor<f64>, mask: &Tensor<f64>, bins: &HeightBinning) -> Result<Self> {
        if heights.shape() != mask.shape() || heights.rank() != 2 {
            return Err(Error::Shape(format!("heights {:?} vs mask {:?}", heights.shape(), mask.shape())));
        }
        let k = bins.k();
        let mut t = vec![0.0; heights.len() * k];
        for (i, (&h, &m)) in heights.data().iter().zip(mask.data()).enumerate() {
            if m != 0.0 {
                t[i * k..(i + 1) * k].copy_from_slice(&bin_assign(h, bins));
            }
        }
        let s = heights.shape();
        Self::new(Tensor::new(&[s[0], s[1], k], t)?, mask.clone())
    }

    pub fn k(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

/// Inverse class frequency over every valid pixel of a batch: `w_j = N_valid / count_j`,
/// with absent classes weighted 0.
pub fn batch_class_weights(batch: &[&ClassTarget]) -> Result<Vec<f64>> {
    let k = batch.first().map(|t| t.k()).ok_or(Error::EmptyMask("class weights"))?;
    let mut counts = vec![0.0; k];
    let mut n = 0usize;
    for target in batch {
        if target.k() != k {
            return Err(Error::Shape("class targets with different K in one batch".into()));
        }
        for (i, &m) in target.mask.data().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            n += 1;
            for (c, &p) in counts.iter_mut().zip(&target.t.data()[i * k..(i + 1) * k]) {
                *c += p;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("class weights"));
    }
    Ok(counts.iter().map(|&c| if c > 0.0 { n as f64 / c } else { 0.0 }).collect())
}

fn valid_count(mask: &[f64], what: &'static str) -> Result<usize> {
    match mask.iter().filter(|&&m| m != 0.0).count() {
        0 => Err(Error::EmptyMask(what)),
        n => Ok(n),
    }
}

fn constant<T: Float>(tape: &mut Tape<T>, shape: &[usize], v: impl Iterator<Item = f64>) -> Result<Var> {
    tape.constant(shape, v.map(T::c).collect())
}

/// Residual `(pred − target)·mask`; masked-out targets are ignored (they may be NaN).
fn masked_residual<T: Float>(tape: &mut Tape<T>, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if target.len() != mask.len() || target.len() != tape.value(pred).len() {
        return Err(Error::Shape(format!(
            "prediction {shape:?} with {} targets and {} mask values",
            target.len(),
            mask.len()
        )));
    }
    let tgt = constant(tape, &shape, target.iter().zip(mask).map(|(&t, &m)| if m != 0.0 { t } else { 0.0 }))?;
    let m = constant(tape, &shape, mask.iter().copied())?;
    let r = tape.sub(pred, tgt)?;
    tape.mul(r, m)
}

/// Mean Huber penalty over valid pixels.
pub fn huber<T: Float>(tape: &mut Tape<T>, pred: Var, target: &[f64], mask: &[f64], delta: f64) -> Result<Var> {
    if !(delta > 0.0) {
        return Err(Error::Invalid(format!("Huber delta must be positive, got {delta}")));
    }
    let n = valid_count(mask, "huber")?;
    let r = masked_residual(tape, pred, target, mask)?;
    let h = tape.huber_elem(r, T::c(delta));
    let s = tape.sum(h);
    Ok(tape.scale(s, T::c(1.0 / n as f64)))
}

/// `−(1/N_valid) Σ_valid Σ_j w_j t_ij log(p_ij + 1e-12)` for probabilities `p` of shape `[rows, cols, K]`.
pub fn weighted_cross_entropy<T: Float>(tape: &mut Tape<T>, p: Var, target: &ClassTarget, w: &[f64]) -> Result<Var> {
    if tape.shape(p) != target.t.shape() {
        return Err(Error::Shape(format!("probabilities {:?} vs target {:?}", tape.shape(p), target.t.shape())));
    }
    let k = target.k();
    if w.len() != k || w.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Invalid(format!("class weights must be {k} non-negative values")));
    }
    let n = valid_count(target.mask.data(), "cross-entropy")?;
    let inv = 1.0 / n as f64;
    let coef = target.t.data().iter().enumerate().map(|(i, &t)| {
        let m = target.mask.data()[i / k];
        if m == 0.0 {
            0.0
        } else {
            -w[i % k] * t * m * inv
        }
    });
    let coef = constant(tape, target.t.shape(), coef)?;
    let shifted = tape.offset(p, T::c(CE_FLOOR));
    let lp = tape.log(shifted)?;
    let terms = tape.mul(coef, lp)?;
    Ok(tape.sum(terms))
}

/// Learnable shape `alpha` and scale `c = softplus(raw) + 1e-6` of the adaptive loss,
/// stored in a [`ParamSet`] as `<name>.alpha` and `<name>.c_raw`.
#[derive(Clone, Debug)]
pub struct AdaptiveLossState {
    pub name: String,
    pub alpha0: f64,
    pub c0: f64,
}

impl AdaptiveLossState {
    /// Starts at `alpha = 1`, `c = 1` (a smoothed L1).
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), alpha0: 1.0, c0: 1.0 }
    }

    pub fn with_init(name: impl Into<String>, alpha0: f64, c0: f64) -> Self {
        Self { name: name.into(), alpha0, c0 }
    }

    fn raw_for(c: f64) -> f64 {
        // inverse of softplus(raw) + floor
        let s = (c - SCALE_FLOOR).max(1e-12);
        if s > 30.0 {
            s
        } else {
            s.exp_m1().ln()
        }
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>) -> Result<()> {
        if !(self.c0 > SCALE_FLOOR) {
            return Err(Error::Invalid(format!("adaptive loss scale must exceed {SCALE_FLOOR}, got {}", self.c0)));
        }
        params.insert(format!("{}.alpha", self.name), Tensor::from_f64(&[1], &[self.alpha0])?.with_grad());
        params.insert(format!("{}.c_raw", self.name), Tensor::from_f64(&[1], &[Self::raw_for(self.c0)])?.with_grad());
        Ok(())
    }

    /// Binds `(alpha, c)` on the graph's tape.
    pub fn bind<T: Float>(&self, g: &mut Graph<T>) -> Result<(Var, Var)> {
        let alpha = g.p(&format!("{}.alpha", self.name))?;
        let raw = g.p(&format!("{}.c_raw", self.name))?;
        let sp = g.tape.softplus(raw);
        let c = g.tape.offset(sp, T::c(SCALE_FLOOR));
        Ok((alpha, c))
    }

    /// Current `(alpha, c)` values.
    pub fn values<T: Float>(&self, params: &ParamSet<T>) -> Result<(f64, f64)> {
        let a = params.get(&format!("{}.alpha", self.name))?.data()[0].to_f64_lossy();
        let raw = params.get(&format!("{}.c_raw", self.name))?.data()[0].to_f64_lossy();
        let sp = if raw > 30.0 { raw } else { raw.exp().ln_1p() };
        Ok((a, sp + SCALE_FLOOR))
    }
}

/// Scalar robust penalty `ρ(r; α, c)` in plain `f64`, used as an oracle and for reporting.
pub fn adaptive_rho(r: f64, alpha: f64, c: f64) -> f64 {
    let x2 = (r / c).powi(2);
    if alpha == 2.0 {
        0.5 * x2
    } else if alpha == 0.0 {
        (0.5 * x2).ln_1p()
    } else {
        let b = (alpha - 2.0).abs();
        b / alpha * ((x2 / b + 1.0).powf(alpha / 2.0) - 1.0)
    }
}

/// Mean adaptive penalty over valid pixels; `alpha` and `c` are one-element vars.
///
/// `α = 2` and `α = 0` use their closed-form limits; every other `α` uses the general form.
pub fn adaptive_loss<T: Float>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &[f64],
    mask: &[f64],
    alpha: Var,
    c: Var,
) -> Result<Var> {
    if tape.value(alpha).len() != 1 || tape.value(c).len() != 1 {
        return Err(Error::Shape("adaptive loss parameters must be scalars".into()));
    }
    if !(tape.item(c) > T::zero()) {
        return Err(Error::Invalid("adaptive loss scale must be positive".into()));
    }
    let n = valid_count(mask, "adaptive loss")?;
    let r = masked_residual(tape, pred, target, mask)?;
    let x = tape.div(r, c)?;
    let x2 = tape.mul(x, x)?;
    let a = tape.item(alpha).to_f64_lossy();
    let rho = if a == 2.0 {
        // keep alpha on the tape so it still receives a (zero) gradient
        let z = tape.scale(alpha, T::zero());
        let half = tape.scale(x2, T::c(0.5));
        tape.add(half, z)?
    } else if a == 0.0 {
        let z = tape.scale(alpha, T::zero());
        let half = tape.scale(x2, T::c(0.5));
        let inner = tape.offset(half, T::one());
        let l = tape.log(inner)?;
        tape.add(l, z)?
    } else {
        let am2 = tape.offset(alpha, T::c(-2.0));
        let b = tape.abs(am2);
        let q = tape.div(x2, b)?;
        let base = tape.offset(q, T::one());
        let lg = tape.log(base)?;
        let half_a = tape.scale(alpha, T::c(0.5));
        let e = tape.mul(lg, half_a)?;
        let e = tape.exp(e)?;
        let e = tape.offset(e, -T::one());
        let ratio = tape.div(b, alpha)?;
        tape.mul(e, ratio)?
    };
    let s = tape.sum(rho);
    Ok(tape.scale(s, T::c(1.0 / n as f64)))
}

/// `log Z(α)` and its derivative, where `Z(α) = ∫ exp(-ρ(x; α, 1)) dx` normalizes the
/// penalty into a density. Defined for `0 ≤ α ≤ 2`.
///
/// Quadrature runs on a fixed grid after mapping `x = t/(1-t)`, so the result is a smooth
/// function of `α` and the derivative is taken by a central difference of it.
pub fn adaptive_log_partition(alpha: f64) -> Result<(f64, f64)> {
    if !(0.0..=2.0).contains(&alpha) {
        return Err(Error::Invalid(format!("adaptive loss shape must lie in [0, 2] for a normalized penalty, got {alpha}")));
    }
    let log_z = |a: f64| {
        const N: usize = 4096;
        let f = |t: f64| {
            if t >= 1.0 {
                // the limit is 0 for a > 0; using it at a = 0 too keeps log Z continuous there
                return 0.0;
            }
            let u = 1.0 - t;
            (-adaptive_rho(t / u, a, 1.0)).exp() / (u * u)
        };
        let h = 1.0 / N as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..N {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        (2.0 * s * h / 3.0).ln()
    };
    const H: f64 = 1e-4;
    let (lo, hi) = ((alpha - H).max(0.0), (alpha + H).min(2.0));
    Ok((log_z(alpha), (log_z(hi) - log_z(lo)) / (hi - lo)))
}

/// Negative log-likelihood form of the adaptive loss: `mean ρ(r; α, c) + log c + log Z(α)`.
///
/// Minimizing `ρ` alone over a learnable `c` pays off by growing `c` without bound and
/// pushing `α` to its lower limit; the normalizer makes both parameters trade fit
/// against spread.
pub fn adaptive_nll<T: Float>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &[f64],
    mask: &[f64],
    alpha: Var,
    c: Var,
) -> Result<Var> {
    let rho = adaptive_loss(tape, pred, target, mask, alpha, c)?;
    let a = tape.item(alpha).to_f64_lossy();
    let (lz, dlz) = adaptive_log_partition(a)?;
    // first-order expansion around the current alpha: exact value and slope
    let za = tape.scale(alpha, T::c(dlz));
    let z = tape.offset(za, T::c(lz - dlz * a));
    let lc = tape.log(c)?;
    let t = tape.add(rho, lc)?;
    tape.add(t, z)
}

/// Regression term used inside the combined loss.
#[derive(Clone, Copy, Debug)]
pub enum Regression {
    Huber { delta: f64 },
    Adaptive { alpha: Var, c: Var },
}

/// Loss weights and thresholds for the distillation objective.
#[derive(Clone, Debug, PartialEq)]
pub struct HyTecLossConfig {
    pub betas: [f64; 4],
    pub alpha_cr: f64,
    pub delta: f64,
    pub consensus_tol: f64,
}

impl Default for HyTecLossConfig {
    fn default() -> Self {
        Self { betas: [0.7, 0.7, 0.7, 1.0], alpha_cr: 1.0, delta: 3.0, consensus_tol: 0.10 }
    }
}

impl HyTecLossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self.betas.iter().chain([&self.alpha_cr, &self.delta, &self.consensus_tol]);
        if all.clone().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!("loss configuration has a negative value: {self:?}")));
        }
        if self.delta == 0.0 || self.consensus_tol == 0.0 {
            return Err(Error::Invalid("Huber delta and consensus tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// `ℓ_CE + α_cr·ℓ_R` for one tile. `probs` is `[rows, cols, K]`, `reg` is `[rows, cols, 1]`
/// or `[rows, cols]`, and `target_h` holds one height per pixel.
#[allow(clippy::too_many_arguments)]
pub fn combined_cr_loss<T: Float>(
    tape: &mut Tape<T>,
    probs: Var,
    reg: Var,
    target: &ClassTarget,
    target_h: &[f64],
    weights: &[f64],
    alpha_cr: f64,
    regression: Regression,
) -> Result<Var> {
    let ce = weighted_cross_entropy(tape, probs, target, weights)?;
    let mask = target.mask.data();
    let r = match regression {
        Regression::Huber { delta } => huber(tape, reg, target_h, mask, delta)?,
        Regression::Adaptive { alpha, c } => adaptive_loss(tape, reg, target_h, mask, alpha, c)?,
    };
    let r = tape.scale(r, T::c(alpha_cr));
    tape.add(ce, r)
}

/// Averages two teacher maps where they agree within `tol` (symmetric relative difference).
pub fn kd_teacher_consensus(t1: &[f64], t2: &[f64], tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if t1.len() != t2.len() {
        return Err(Error::Shape(format!("teacher maps of {} and {} pixels", t1.len(), t2.len())));
    }
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("consensus tolerance must be positive, got {tol}")));
    }
    let mut value = vec![0.0; t1.len()];
    let mut valid = vec![0.0; t1.len()];
    for (i, (&a, &b)) in t1.iter().zip(t2).enumerate() {
        let mean = 0.5 * (a + b);
        let d = (a - b).abs() / (mean + CONSENSUS_EPS);
        if d < tol {
            value[i] = mean;
            valid[i] = 1.0;
        }
    }
    Ok((value, valid))
}

/// One auxiliary supervision level: prediction var plus its (downsampled) target and mask.
pub struct AuxTerm<'a> {
    pub pred: Var,
    pub target: &'a [f64],
    pub mask: &'a [f64],
}

/// `β₁a₁ + β₂a₂ + β₃a₃ + β₄m` over already-computed scalar terms; a missing
/// auxiliary term (all-invalid mask) contributes nothing.
pub fn weighted_total<T: Float>(tape: &mut Tape<T>, aux: [Option<Var>; 3], main: Var, betas: [f64; 4]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (a, &beta) in aux.iter().zip(&betas[..3]) {
        let Some(a) = *a else { continue };
        let term = tape.scale(a, T::c(beta));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let m = tape.scale(main, T::c(betas[3]));
    match total {
        Some(t) => tape.add(t, m),
        None => Ok(m),
    }
}

/// Full distillation objective: Huber on the three auxiliary outputs plus the
/// combined classification/adaptive-regression loss at full resolution.
#[allow(clippy::too_many_arguments)]
pub fn hytec_total_loss<T: Float>(
    tape: &mut Tape<T>,
    aux: [AuxTerm<'_>; 3],
    probs: Var,
    reg: Var,
    target: &ClassTarget,
    target_h: &[f64],
    weights: &[f64],
    adaptive: (Var, Var),
    cfg: &HyTecLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut aux_losses = [None; 3];
    for (slot, term) in aux_losses.iter_mut().zip(&aux) {
        if term.mask.iter().any(|&m| m != 0.0) {
            *slot = Some(huber(tape, term.pred, term.target, term.mask, cfg.delta)?);
        }
    }
    let main = combined_cr_loss(
        tape,
        probs,
        reg,
        target,
        target_h,
        weights,
        cfg.alpha_cr,
        Regression::Adaptive { alpha: adaptive.0, c: adaptive.1 },
    )?;
    weighted_total(tape, aux_losses, main, cfg.betas)
}
