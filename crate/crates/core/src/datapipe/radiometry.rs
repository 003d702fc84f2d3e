//! Backscatter angle normalization, rainfall gating and median compositing.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Marker written for pixel-bands with no valid sample.
pub const NODATA: f64 = -9999.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackscatterSample {
    /// Linear-scale σ⁰ at the acquisition incidence angle.
    pub sigma0: f64,
    /// Incidence angle, degrees.
    pub theta: f64,
    /// Reference angle, degrees.
    pub theta_ref: f64,
}

impl BackscatterSample {
    pub fn new(sigma0: f64, theta: f64) -> Self {
        Self { sigma0, theta, theta_ref: 40.0 }
    }
}

/// Square-cosine correction `σ⁰·cos²(θ_ref)/cos²(θ)`.
pub fn normalize_backscatter(s: BackscatterSample) -> Result<f64> {
    let angle_ok = |a: f64| a > 0.0 && a < 90.0;
    if !angle_ok(s.theta) || !angle_ok(s.theta_ref) {
        return Err(Error::Invalid(format!("incidence angles must lie in (0, 90) degrees, got {} and {}", s.theta, s.theta_ref)));
    }
    if !(s.sigma0 >= 0.0) || !s.sigma0.is_finite() {
        return Err(Error::Invalid(format!("backscatter must be finite and non-negative, got {}", s.sigma0)));
    }
    if s.theta == s.theta_ref {
        return Ok(s.sigma0);
    }
    let (c, cr) = (s.theta.to_radians().cos(), s.theta_ref.to_radians().cos());
    Ok(s.sigma0 * (cr * cr) / (c * c))
}

/// Daily precipitation series; `mm[i]` is the total on day `first_day + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DailyRainfall {
    pub first_day: i64,
    pub mm: Vec<f64>,
}

impl DailyRainfall {
    pub fn on(&self, day: i64) -> Option<f64> {
        let i = day.checked_sub(self.first_day)?;
        usize::try_from(i).ok().and_then(|i| self.mm.get(i)).copied()
    }

    /// Writes `day,mm` rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["day", "mm"])?;
        for (i, v) in self.mm.iter().enumerate() {
            w.write_record([(self.first_day + i as i64).to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads `day,mm` rows; days must be consecutive.
    pub fn load(path: &Path) -> Result<Self> {
        let mut first_day = None;
        let mut mm = Vec::new();
        for rec in csv::Reader::from_path(path)?.deserialize::<(i64, f64)>() {
            let (day, v) = rec?;
            let first = *first_day.get_or_insert(day);
            if day != first + mm.len() as i64 {
                return Err(Error::Format(format!("{}: day {day} breaks the daily sequence", path.display())));
            }
            mm.push(v);
        }
        let first_day = first_day.ok_or_else(|| Error::Format(format!("{}: no rows", path.display())))?;
        Ok(Self { first_day, mm })
    }
}

/// Days since the Unix epoch for a timestamp in seconds.
pub fn day_of(unix_seconds: i64) -> i64 {
    unix_seconds.div_euclid(86_400)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainGate {
    /// Strict threshold on a window total, mm.
    pub threshold: f64,
    pub window: usize,
    /// Days before the acquisition that must be clear.
    pub lookback: usize,
}

impl Default for RainGate {
    fn default() -> Self {
        Self { threshold: 40.0, window: 4, lookback: 4 }
    }
}

/// Keeps acquisitions (given as day numbers) for which no `window`-day total inside
/// `[day − lookback, day]` exceeds the threshold. Order is preserved.
pub fn rainfall_gate(acquisitions: &[i64], rain: &DailyRainfall, gate: RainGate) -> Result<Vec<i64>> {
    if gate.window == 0 || gate.window > gate.lookback + 1 {
        return Err(Error::Invalid(format!("rain window {} does not fit a {}-day lookback", gate.window, gate.lookback)));
    }
    let mut kept = Vec::with_capacity(acquisitions.len());
    for &day in acquisitions {
        let start = day - gate.lookback as i64;
        let span: Vec<f64> = (start..=day)
            .map(|d| rain.on(d).ok_or_else(|| Error::Missing(format!("rainfall for day {d} (acquisition day {day})"))))
            .collect::<Result<_>>()?;
        if span.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid(format!("negative or NaN rainfall before day {day}")));
        }
        if span.windows(gate.window).all(|w| w.iter().sum::<f64>() <= gate.threshold) {
            kept.push(day);
        }
    }
    Ok(kept)
}

/// Time series of `[rows, cols, bands]` frames with per-pixel validity.
#[derive(Clone, Debug)]
pub struct ImageStack {
    frames: Vec<Tensor<f64>>,
    masks: Vec<Vec<bool>>,
    pub timestamps: Vec<i64>,
}

impl ImageStack {
    pub fn new(frames: Vec<Tensor<f64>>, masks: Vec<Vec<bool>>, timestamps: Vec<i64>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Invalid("image stack needs at least one frame".into()));
        };
        let shape = first.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("frames must be [rows, cols, bands], got {shape:?}")));
        }
        if frames.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::Shape("frames differ in shape".into()));
        }
        if masks.len() != frames.len() || timestamps.len() != frames.len() {
            return Err(Error::Shape(format!("{} frames, {} masks, {} timestamps", frames.len(), masks.len(), timestamps.len())));
        }
        if masks.iter().any(|m| m.len() != shape[0] * shape[1]) {
            return Err(Error::Shape("validity masks must cover rows × cols".into()));
        }
        Ok(Self { frames, masks, timestamps })
    }

    /// Every pixel valid in every frame.
    pub fn all_valid(frames: Vec<Tensor<f64>>) -> Result<Self> {
        let px = frames.first().map_or(0, |f| f.shape().iter().take(2).product());
        let n = frames.len();
        Self::new(frames, vec![vec![true; px]; n], (0..n as i64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        self.frames[0].shape()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor<f64>] {
        &self.frames
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    /// Keeps the frames whose acquisition day is in `days`, in stack order.
    pub fn retain_days(&self, days: &[i64]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| days.contains(&day_of(self.timestamps[i]))).collect();
        Self::new(
            keep.iter().map(|&i| self.frames[i].clone()).collect(),
            keep.iter().map(|&i| self.masks[i].clone()).collect(),
            keep.iter().map(|&i| self.timestamps[i]).collect(),
        )
    }

    /// Writes `stack.csv` (`frame,timestamp`) with one frame and one mask raster per row.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = self.shape();
        let mut w = csv::Writer::from_path(dir.join("stack.csv"))?;
        w.write_record(["frame", "timestamp"])?;
        for (i, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            w.write_record([i.to_string(), self.timestamps[i].to_string()])?;
            f.save(dir.join(format!("frame_{i:04}.tnsr")))?;
            let mask = Tensor::new(&s[..2], m.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
            mask.save(dir.join(format!("mask_{i:04}.tnsr")))?;
        }
        w.flush().map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (mut frames, mut masks, mut timestamps) = (Vec::new(), Vec::new(), Vec::new());
        for rec in csv::Reader::from_path(dir.join("stack.csv"))?.deserialize::<(usize, i64)>() {
            let (i, t) = rec?;
            frames.push(Tensor::load(dir.join(format!("frame_{i:04}.tnsr")))?);
            let m: Tensor<f64> = Tensor::load(dir.join(format!("mask_{i:04}.tnsr")))?;
            masks.push(m.data().iter().map(|&v| v != 0.0).collect());
            timestamps.push(t);
        }
        Self::new(frames, masks, timestamps)
    }
}

#[derive(Clone, Debug)]
pub struct Composite {
    pub image: Tensor<f64>,
    /// Pixel-bands set to [`NODATA`].
    pub missing: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-pixel, per-band median over valid frames. Independent of frame order.
pub fn median_composite(stack: &ImageStack) -> Result<Composite> {
    let s = stack.shape().to_vec();
    let (px, bands) = (s[0] * s[1], s[2]);
    let mut out = vec![0.0; px * bands];
    let missing: usize = out
        .par_chunks_mut(bands)
        .enumerate()
        .map(|(p, dst)| {
            let valid: Vec<&Tensor<f64>> = stack.frames.iter().zip(&stack.masks).filter(|(_, m)| m[p]).map(|(f, _)| f).collect();
            if valid.is_empty() {
                dst.fill(NODATA);
                return bands;
            }
            let mut buf = Vec::with_capacity(valid.len());
            for (b, d) in dst.iter_mut().enumerate() {
                buf.clear();
                buf.extend(valid.iter().map(|f| f.data()[p * bands + b]));
                *d = median(&mut buf);
            }
            0
        })
        .sum();
    if missing > 0 {
        log::warn!("median composite: {missing} pixel-bands without a valid sample");
    }
    Ok(Composite { image: Tensor::new(&s, out)?, missing })
}
