//! GEDI footprints: quality filtering and rasterization into sparse targets.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PIXEL_M;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamKind {
    Coverage,
    FullPower,
}

/// One footprint. `lon`/`lat` hold easting/northing in local meters for synthetic areas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GediShot {
    pub lon: f64,
    pub lat: f64,
    pub rh98: f64,
    pub num_detectedmodes: u32,
    pub snr_db: f64,
    pub view_angle: f64,
    pub sensitivity: f64,
    pub elm: f64,
    pub srtm: f64,
    pub rx_sample_count: i64,
    pub search_end: i64,
    pub canopy_cover: f64,
    pub ndvi30: f64,
    /// Unix seconds.
    pub acquired_at: i64,
    pub beam_kind: BeamKind,
}

impl GediShot {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sensitivity) || !(self.rh98 >= 0.0) {
            return Err(Error::Invalid(format!("shot at ({}, {}): sensitivity {} rh98 {}", self.lon, self.lat, self.sensitivity, self.rh98)));
        }
        Ok(())
    }

    /// Signed cover/NDVI disagreement used by the consistency rule.
    pub fn cover_gap(&self) -> f64 {
        self.canopy_cover - self.ndvi30
    }
}

pub fn read_shots(r: impl Read) -> Result<Vec<GediShot>> {
    let mut rdr = csv::Reader::from_reader(r);
    let shots: Vec<GediShot> = rdr.deserialize().collect::<Result<_, csv::Error>>()?;
    shots.iter().try_for_each(GediShot::validate)?;
    Ok(shots)
}

pub fn write_shots(shots: &[GediShot], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in shots {
        wtr.serialize(s)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Rejection rules in evaluation order; a shot failing several counts under the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    NoModes,
    SnrOrViewAngle,
    Sensitivity,
    Elevation,
    Waveform,
    CoverConsistency,
}

impl Rule {
    pub const ALL: [Rule; 6] = [Rule::NoModes, Rule::SnrOrViewAngle, Rule::Sensitivity, Rule::Elevation, Rule::Waveform, Rule::CoverConsistency];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::NoModes => "no_modes",
            Rule::SnrOrViewAngle => "snr_view_angle",
            Rule::Sensitivity => "sensitivity",
            Rule::Elevation => "elevation",
            Rule::Waveform => "waveform",
            Rule::CoverConsistency => "cover_consistency",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| Error::Invalid(format!("unknown filter rule `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub enabled: [bool; 6],
    pub min_snr_db: f64,
    pub max_view_angle: f64,
    pub min_sensitivity: f64,
    pub max_elevation_gap: f64,
    pub min_waveform_bins: i64,
    pub cover_sigmas: f64,
    /// σ of the cover gap; computed over the input shots when `None`.
    pub cover_sigma: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: [true; 6],
            min_snr_db: 12.0,
            max_view_angle: 5.0,
            min_sensitivity: 0.95,
            max_elevation_gap: 75.0,
            min_waveform_bins: 1,
            cover_sigmas: 1.5,
            cover_sigma: None,
        }
    }
}

impl FilterConfig {
    pub fn only(rule: Rule) -> Self {
        let mut c = Self { enabled: [false; 6], ..Self::default() };
        c.enabled[rule.index()] = true;
        c
    }

    pub fn with(mut self, rule: Rule, on: bool) -> Self {
        self.enabled[rule.index()] = on;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    /// Indices into the input, ascending.
    pub retained: Vec<usize>,
    pub rejected: [usize; 6],
    /// First failing rule per input shot.
    pub verdicts: Vec<Option<Rule>>,
    pub cover_mean: f64,
    pub cover_sigma: f64,
}

impl FilterReport {
    pub fn rejected_by(&self, rule: Rule) -> usize {
        self.rejected[rule.index()]
    }
}

/// Population mean and standard deviation of the signed cover gap.
pub fn cover_gap_stats(shots: &[GediShot]) -> (f64, f64) {
    if shots.is_empty() {
        return (0.0, 0.0);
    }
    let n = shots.len() as f64;
    let mean = shots.iter().map(GediShot::cover_gap).sum::<f64>() / n;
    let var = shots.iter().map(|s| (s.cover_gap() - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn filter_gedi(shots: &[GediShot], cfg: &FilterConfig) -> FilterReport {
    let (cover_mean, sigma) = cover_gap_stats(shots);
    let cover_sigma = cfg.cover_sigma.unwrap_or(sigma);
    let fails = |rule: Rule, s: &GediShot| match rule {
        Rule::NoModes => s.num_detectedmodes == 0,
        Rule::SnrOrViewAngle => s.snr_db < cfg.min_snr_db || s.view_angle > cfg.max_view_angle,
        Rule::Sensitivity => s.sensitivity < cfg.min_sensitivity,
        Rule::Elevation => (s.elm - s.srtm).abs() > cfg.max_elevation_gap,
        Rule::Waveform => s.rx_sample_count - s.search_end <= cfg.min_waveform_bins,
        Rule::CoverConsistency => (s.cover_gap() - cover_mean).abs() > cfg.cover_sigmas * cover_sigma,
    };
    let verdicts: Vec<Option<Rule>> =
        shots.iter().map(|s| Rule::ALL.into_iter().find(|&r| cfg.enabled[r.index()] && fails(r, s))).collect();
    let mut rejected = [0; 6];
    let mut retained = Vec::new();
    for (i, v) in verdicts.iter().enumerate() {
        match v {
            Some(r) => rejected[r.index()] += 1,
            None => retained.push(i),
        }
    }
    FilterReport { retained, rejected, verdicts, cover_mean, cover_sigma }
}

/// Axis-aligned area in local meters: `x` grows with columns, `y` with rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileBounds {
    pub x0: f64,
    pub y0: f64,
    pub rows: usize,
    pub cols: usize,
}

impl TileBounds {
    pub fn width_m(&self) -> f64 {
        self.cols as f64 * PIXEL_M
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * PIXEL_M
    }

    /// Containing pixel `(row, col)`, if inside.
    pub fn pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (c, r) = (((x - self.x0) / PIXEL_M).floor(), ((y - self.y0) / PIXEL_M).floor());
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows).then(|| (r as usize, c as usize))
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (self.x0 + (col as f64 + 0.5) * PIXEL_M, self.y0 + (row as f64 + 0.5) * PIXEL_M)
    }
}

/// Writes `rh98` into the containing pixel of each shot; on collision the later
/// acquisition wins (input order breaks ties). Shots outside the tile are skipped.
pub fn rasterize_targets<'a>(shots: impl IntoIterator<Item = &'a GediShot>, bounds: &TileBounds) -> (Tensor<f64>, Tensor<f64>) {
    let n = bounds.rows * bounds.cols;
    let mut target = vec![0.0; n];
    let mut mask = vec![0.0; n];
    let mut stamp = vec![i64::MIN; n];
    for s in shots {
        if let Some((r, c)) = bounds.pixel(s.lon, s.lat) {
            let i = r * bounds.cols + c;
            if mask[i] == 0.0 || s.acquired_at >= stamp[i] {
                target[i] = s.rh98;
                mask[i] = 1.0;
                stamp[i] = s.acquired_at;
            }
        }
    }
    let shape = [bounds.rows, bounds.cols];
    (Tensor::new(&shape, target).expect("sized above"), Tensor::new(&shape, mask).expect("sized above"))
}
