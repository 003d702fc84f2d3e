//! Desk-scale synthetic area: blobby forest over low vegetation, S2/S1-like bands
//! that saturate with height, and GEDI-like shots with planted quality faults.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::gedi::{read_shots, write_shots};
use super::radiometry::day_of;
use super::{BeamKind, DailyRainfall, GediShot, ImageStack, Rule, TileBounds, PIXEL_M};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const S2_BANDS: usize = 10;
pub const S1_BANDS: usize = 2;
pub const MAX_HEIGHT: f64 = 55.0;

// (base reflectance, response to canopy) per band
const S2_RESPONSE: [(f64, f64); S2_BANDS] = [
    (0.08, -0.05),
    (0.10, -0.04),
    (0.12, -0.08),
    (0.15, -0.03),
    (0.20, 0.05),
    (0.22, 0.10),
    (0.25, 0.15),
    (0.26, 0.14),
    (0.30, -0.10),
    (0.22, -0.12),
];
const S1_RESPONSE: [(f64, f64); S1_BANDS] = [(0.08, 0.06), (0.015, 0.03)];
// e-folding height of the band response; taller canopies are barely distinguishable
const SATURATION_M: f64 = 12.0;
const EPOCH_2020: i64 = 1_577_836_800;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub tiles: usize,
    /// Tile side in pixels.
    pub size: usize,
    pub shots_per_tile: usize,
    /// Fraction of shots given exactly one planted fault.
    pub fault_rate: f64,
    /// Additive band noise σ.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { tiles: 16, size: 64, shots_per_tile: 400, fault_rate: 0.12, noise: 0.01, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 || self.size < 16 || self.shots_per_tile == 0 {
            return Err(Error::Invalid(format!("synthetic config needs tiles ≥ 1, size ≥ 16, shots ≥ 1: {self:?}")));
        }
        if !(0.0..0.5).contains(&self.fault_rate) || !(self.noise >= 0.0) {
            return Err(Error::Invalid(format!("fault rate must be in [0, 0.5) and noise ≥ 0: {self:?}")));
        }
        Ok(())
    }

    pub fn tile_columns(&self) -> usize {
        (self.tiles as f64).sqrt().ceil() as usize
    }

    /// Side of one tile in meters; used as the grid cell size.
    pub fn tile_m(&self) -> f64 {
        self.size as f64 * PIXEL_M
    }

    pub fn area(&self) -> (f64, f64, f64, f64) {
        let cols = self.tile_columns();
        let rows = self.tiles.div_ceil(cols);
        (0.0, 0.0, cols as f64 * self.tile_m(), rows as f64 * self.tile_m())
    }

    pub fn bounds(&self, tile: usize) -> TileBounds {
        let cols = self.tile_columns();
        TileBounds {
            x0: (tile % cols) as f64 * self.tile_m(),
            y0: (tile / cols) as f64 * self.tile_m(),
            rows: self.size,
            cols: self.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTile {
    pub id: usize,
    pub bounds: TileBounds,
    /// `[size, size]`, meters.
    pub heights: Tensor<f64>,
    /// `[size, size, 10]`.
    pub s2: Tensor<f64>,
    /// `[size, size, 2]`, linear backscatter.
    pub s1: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotLabel {
    pub shot: usize,
    pub tile: usize,
    /// Planted fault, by rule name; empty for clean shots.
    pub rule: String,
}

impl ShotLabel {
    pub fn expected(&self) -> Result<Option<Rule>> {
        if self.rule.is_empty() {
            Ok(None)
        } else {
            self.rule.parse().map(Some)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub tiles: Vec<SynthTile>,
    pub shots: Vec<GediShot>,
    pub labels: Vec<ShotLabel>,
}

/// Fraction of canopy signal seen by the sensors at height `h`.
pub fn canopy_signal(h: f64) -> f64 {
    1.0 - (-h.max(0.0) / SATURATION_M).exp()
}

fn height_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // smooth low background from a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(0..=3))
        .map(|_| {
            let u: f64 = rng.gen();
            (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64), rng.gen_range(4.0..12.0), 12.0 + 38.0 * u.powf(1.5))
        })
        .collect();
    let texture = Normal::new(0.0, 0.5).expect("positive sigma");
    let mut h = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64, c as f64);
            let w: f64 = waves.iter().map(|(a, b, p)| (a * x + b * y + p).sin()).sum::<f64>() / 3.0;
            let mut v = 4.0 + 2.5 * w;
            for &(by, bx, rad, peak) in &blobs {
                let d2 = ((y - by).powi(2) + (x - bx).powi(2)) / (rad * rad);
                v = v.max(peak * (1.25 * (1.0 - d2)).clamp(0.0, 1.0));
            }
            h.push((v + texture.sample(rng)).clamp(0.0, MAX_HEIGHT));
        }
    }
    h
}

fn bands(rng: &mut ChaCha8Rng, heights: &[f64], response: &[(f64, f64)], noise: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(heights.len() * response.len());
    for &h in heights {
        let s = canopy_signal(h);
        for &(base, slope) in response {
            let e = if noise > 0.0 { noise * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { 0.0 };
            out.push((base + slope * s + e).max(0.0));
        }
    }
    out
}

fn clean_shot(rng: &mut ChaCha8Rng, x: f64, y: f64, h: f64) -> GediShot {
    let cover = (0.9 * canopy_signal(h)).clamp(0.0, 1.0);
    let rx = rng.gen_range(800..1200);
    let srtm = rng.gen_range(50.0..400.0);
    GediShot {
        lon: x,
        lat: y,
        rh98: h,
        num_detectedmodes: rng.gen_range(1..=4),
        snr_db: rng.gen_range(14.0..30.0),
        view_angle: rng.gen_range(0.0..4.0),
        sensitivity: rng.gen_range(0.96..0.99),
        elm: srtm + rng.gen_range(-20.0..20.0),
        srtm,
        rx_sample_count: rx,
        search_end: rx - rng.gen_range(10..200),
        canopy_cover: cover,
        ndvi30: cover - rng.gen_range(-0.02..0.02),
        acquired_at: EPOCH_2020 + rng.gen_range(0..2 * 365 * 86_400),
        beam_kind: if rng.gen_bool(0.5) { BeamKind::FullPower } else { BeamKind::Coverage },
    }
}

fn plant(rng: &mut ChaCha8Rng, s: &mut GediShot, rule: Rule, sign: f64) {
    match rule {
        Rule::NoModes => s.num_detectedmodes = 0,
        Rule::SnrOrViewAngle => {
            if rng.gen_bool(0.5) {
                s.snr_db = rng.gen_range(5.0..11.9);
            } else {
                s.view_angle = rng.gen_range(5.5..10.0);
            }
        }
        Rule::Sensitivity => s.sensitivity = rng.gen_range(0.80..0.94),
        Rule::Elevation => s.elm = s.srtm + sign * rng.gen_range(80.0..150.0),
        Rule::Waveform => s.search_end = s.rx_sample_count - rng.gen_range(0..=1),
        Rule::CoverConsistency => s.ndvi30 = s.canopy_cover - sign * rng.gen_range(0.5..0.7),
    }
}

/// Generates tiles and shots; the same config always yields bit-identical output.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let n = cfg.size;
    let mut tiles = Vec::with_capacity(cfg.tiles);
    let mut shots = Vec::with_capacity(cfg.tiles * cfg.shots_per_tile);
    let mut labels = Vec::with_capacity(shots.capacity());
    for t in 0..cfg.tiles {
        // per-tile streams so tiles do not depend on each other's draws
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64 + 1);
        let heights = height_field(&mut rng, n);
        let s2 = bands(&mut rng, &heights, &S2_RESPONSE, cfg.noise);
        let s1 = bands(&mut rng, &heights, &S1_RESPONSE, cfg.noise * 0.3);
        let bounds = cfg.bounds(t);
        for _ in 0..cfg.shots_per_tile {
            let (x, y) = (bounds.x0 + rng.gen_range(0.0..bounds.width_m()), bounds.y0 + rng.gen_range(0.0..bounds.height_m()));
            let (r, c) = bounds.pixel(x, y).expect("drawn inside the tile");
            labels.push(ShotLabel { shot: shots.len(), tile: t, rule: String::new() });
            shots.push(clean_shot(&mut rng, x, y, heights[r * n + c]));
        }
        tiles.push(SynthTile {
            id: t,
            bounds,
            heights: Tensor::new(&[n, n], heights)?,
            s2: Tensor::new(&[n, n, S2_BANDS], s2)?,
            s1: Tensor::new(&[n, n, S1_BANDS], s1)?,
        });
    }
    // exact fault quotas keep the cover-gap σ well away from the clean spread
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..shots.len()).collect();
    order.shuffle(&mut rng);
    let per_rule = (cfg.fault_rate * shots.len() as f64 / 6.0).round() as usize;
    let mut next = order.into_iter();
    for rule in Rule::ALL {
        let quota = if rule == Rule::CoverConsistency { per_rule.max(2) } else { per_rule };
        for (k, i) in next.by_ref().take(quota).enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            plant(&mut rng, &mut shots[i], rule, sign);
            labels[i].rule = rule.name().to_string();
        }
    }
    Ok(SynthDataset { config: cfg.clone(), tiles, shots, labels })
}

/// A cloudy acquisition series over one tile's S2 bands and the daily rainfall around
/// it. Frames are five days apart; each carries fresh noise and up to three opaque
/// cloud discs that its validity mask flags out.
pub fn synth_stack(tile: &SynthTile, frames: usize, seed: u64) -> Result<(ImageStack, DailyRainfall)> {
    if frames == 0 {
        return Err(Error::Invalid("a stack needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | tile.id as u64);
    let s = tile.s2.shape().to_vec();
    let (rows, cols, nb) = (s[0], s[1], s[2]);
    let noise = Normal::new(0.0, 0.005).expect("positive sigma");
    let t0 = EPOCH_2020 + 10 * 86_400 + 37_800;
    let (mut out, mut masks, mut stamps) = (Vec::new(), Vec::new(), Vec::new());
    for f in 0..frames {
        let clouds: Vec<(f64, f64, f64)> = (0..rng.gen_range(0..=3))
            .map(|_| (rng.gen_range(0.0..rows as f64), rng.gen_range(0.0..cols as f64), rng.gen_range(3.0..10.0)))
            .collect();
        let mut data = tile.s2.data().to_vec();
        let mut mask = vec![true; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let p = r * cols + c;
                let cloudy = clouds.iter().any(|&(y, x, rad)| (r as f64 - y).powi(2) + (c as f64 - x).powi(2) < rad * rad);
                for v in &mut data[p * nb..(p + 1) * nb] {
                    *v = if cloudy { 0.6 } else { (*v + noise.sample(&mut rng)).max(0.0) };
                }
                mask[p] = !cloudy;
            }
        }
        out.push(Tensor::new(&s, data)?);
        masks.push(mask);
        stamps.push(t0 + 5 * 86_400 * f as i64);
    }
    let first_day = day_of(t0) - 10;
    let days = (day_of(stamps[frames - 1]) - first_day + 1) as usize;
    let mm = (0..days)
        .map(|_| if rng.gen_bool(0.08) { rng.gen_range(30.0..60.0) } else if rng.gen_bool(0.3) { rng.gen_range(0.0..8.0) } else { 0.0 })
        .collect();
    Ok((ImageStack::new(out, masks, stamps)?, DailyRainfall { first_day, mm }))
}

impl SynthDataset {
    pub fn tile(&self, id: usize) -> Result<&SynthTile> {
        self.tiles.get(id).ok_or_else(|| Error::Invalid(format!("no tile {id}")))
    }

    /// Writes `tiles.csv`, `shots.csv`, `labels.csv` and three TNSR/1 rasters per tile.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let mut w = csv::Writer::from_path(dir.join("tiles.csv"))?;
        w.write_record(["id", "x0", "y0", "rows", "cols", "seed", "shots_per_tile", "fault_rate", "noise"])?;
        for t in &self.tiles {
            let b = t.bounds;
            w.write_record([
                t.id.to_string(),
                b.x0.to_string(),
                b.y0.to_string(),
                b.rows.to_string(),
                b.cols.to_string(),
                c.seed.to_string(),
                c.shots_per_tile.to_string(),
                c.fault_rate.to_string(),
                c.noise.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        for t in &self.tiles {
            t.heights.save(dir.join(format!("tile_{:04}_height.tnsr", t.id)))?;
            t.s2.save(dir.join(format!("tile_{:04}_s2.tnsr", t.id)))?;
            t.s1.save(dir.join(format!("tile_{:04}_s1.tnsr", t.id)))?;
        }
        let p = dir.join("shots.csv");
        write_shots(&self.shots, fs::File::create(&p).map_err(|e| Error::io(&p, e))?)?;
        let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
        for l in &self.labels {
            w.serialize(l)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(dir.join("tiles.csv"))?;
        let mut tiles = Vec::new();
        let mut config = None;
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("tiles.csv row {rec:?} is short")));
            let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| Error::Format(format!("tiles.csv field {i} in {rec:?}"))) };
            let id = num(0)? as usize;
            let bounds = TileBounds { x0: num(1)?, y0: num(2)?, rows: num(3)? as usize, cols: num(4)? as usize };
            config.get_or_insert(SynthConfig {
                tiles: 0,
                size: bounds.rows,
                shots_per_tile: num(6)? as usize,
                fault_rate: num(7)?,
                noise: num(8)?,
                seed: field(5)?.parse().map_err(|_| Error::Format("tiles.csv seed".into()))?,
            });
            let load = |kind: &str| Tensor::load(dir.join(format!("tile_{id:04}_{kind}.tnsr")));
            tiles.push(SynthTile { id, bounds, heights: load("height")?, s2: load("s2")?, s1: load("s1")? });
        }
        let mut config = config.ok_or_else(|| Error::Format(format!("{} lists no tiles", dir.join("tiles.csv").display())))?;
        config.tiles = tiles.len();
        let p = dir.join("shots.csv");
        let shots = read_shots(fs::File::open(&p).map_err(|e| Error::io(&p, e))?)?;
        let labels_path = dir.join("labels.csv");
        let labels = if labels_path.exists() {
            csv::Reader::from_path(&labels_path)?.deserialize().collect::<Result<Vec<ShotLabel>, csv::Error>>()?
        } else {
            Vec::new()
        };
        Ok(Self { config, tiles, shots, labels })
    }

    /// Which tile contains a point, if any.
    pub fn tile_at(&self, x: f64, y: f64) -> Option<usize> {
        self.tiles.iter().position(|t| t.bounds.pixel(x, y).is_some())
    }
}
