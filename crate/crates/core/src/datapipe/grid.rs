//! Grid-cell selection by height-range ratios, train/val split, duplication of
//! under-represented sets, and random crop/flip patch sampling.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GediShot;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Height-range sets: `(lower, upper, minimum ratio, duplications)`. Set 1 is `h ≤ 5`,
/// sets 2–8 are `lower < h ≤ upper`, set 9 is `h ≥ 40`.
pub const SET_TABLE: [(f64, f64, f64, usize); 9] = [
    (f64::NEG_INFINITY, 5.0, 0.50, 0),
    (5.0, 10.0, 0.25, 1),
    (10.0, 15.0, 0.10, 0),
    (15.0, 20.0, 0.10, 3),
    (20.0, 25.0, 0.05, 4),
    (25.0, 30.0, 0.025, 4),
    (30.0, 35.0, 0.025, 8),
    (35.0, 40.0, 0.025, 8),
    (40.0, f64::INFINITY, 0.025, 4),
];

fn in_set(set: usize, h: f64) -> bool {
    let (lo, hi, _, _) = SET_TABLE[set];
    match set {
        0 => h <= hi,
        8 => h >= lo,
        _ => lo < h && h <= hi,
    }
}

/// Fraction of heights falling in each set's range.
pub fn set_ratios(heights: &[f64]) -> [f64; 9] {
    let mut r = [0.0; 9];
    if heights.is_empty() {
        return r;
    }
    for &h in heights {
        for (s, v) in r.iter_mut().enumerate() {
            if in_set(s, h) {
                *v += 1.0;
            }
        }
    }
    r.iter_mut().for_each(|v| *v /= heights.len() as f64);
    r
}

/// First matching set (1-based) scanning from the tallest range down.
pub fn assign_set(ratios: &[f64; 9]) -> Option<u8> {
    (0..9).rev().find(|&s| ratios[s] > SET_TABLE[s].2).map(|s| s as u8 + 1)
}

pub fn duplications(set: u8) -> usize {
    SET_TABLE[usize::from(set) - 1].3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    /// `row · columns + col` in the area grid.
    pub id: usize,
    pub row: usize,
    pub col: usize,
    /// `(x0, y0, x1, y1)` in meters.
    pub bounds: (f64, f64, f64, f64),
    /// Indices into the input shots, ascending.
    pub shots: Vec<usize>,
    pub ratios: [f64; 9],
    pub set: u8,
    pub split: Split,
    /// Extra copies in the training list (0 for validation cells).
    pub duplication: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridConfig {
    pub cell_m: f64,
    pub min_shots: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { cell_m: 7680.0, min_shots: 600, train_fraction: 0.75, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSummary {
    /// Selected cells ordered by id.
    pub cells: Vec<GridCell>,
    /// Cells holding some shots but fewer than the minimum.
    pub sparse: usize,
    /// Eligible cells matching no set.
    pub unmatched: Vec<usize>,
}

impl GridSummary {
    /// Training cell ids, each repeated `1 + duplication` times.
    pub fn training_list(&self) -> Vec<usize> {
        self.cells
            .iter()
            .filter(|c| c.split == Split::Train)
            .flat_map(|c| std::iter::repeat(c.id).take(1 + c.duplication))
            .collect()
    }

    pub fn validation_list(&self) -> Vec<usize> {
        self.cells.iter().filter(|c| c.split == Split::Val).map(|c| c.id).collect()
    }

    pub fn write_manifest(&self, out: &mut impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell_id", "x0", "y0", "x1", "y1", "shots", "set", "split", "duplication"])?;
        for c in &self.cells {
            let (x0, y0, x1, y1) = c.bounds;
            w.write_record([
                c.id.to_string(),
                x0.to_string(),
                y0.to_string(),
                x1.to_string(),
                y1.to_string(),
                c.shots.len().to_string(),
                c.set.to_string(),
                c.split.to_string(),
                c.duplication.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Tiles `(x0, y0, x1, y1)` into square cells and selects, splits and duplicates them.
pub fn build_grid(shots: &[GediShot], area: (f64, f64, f64, f64), cfg: &GridConfig) -> Result<GridSummary> {
    let (x0, y0, x1, y1) = area;
    if !(x1 > x0 && y1 > y0) || !(cfg.cell_m > 0.0) || !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Invalid(format!("grid area {area:?}, cell {} m, train fraction {}", cfg.cell_m, cfg.train_fraction)));
    }
    let cols = ((x1 - x0) / cfg.cell_m).ceil() as usize;
    let rows = ((y1 - y0) / cfg.cell_m).ceil() as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); rows * cols];
    for (i, s) in shots.iter().enumerate() {
        if !(s.lon >= x0 && s.lon < x1 && s.lat >= y0 && s.lat < y1) {
            continue;
        }
        let c = (((s.lon - x0) / cfg.cell_m) as usize).min(cols - 1);
        let r = (((s.lat - y0) / cfg.cell_m) as usize).min(rows - 1);
        members[r * cols + c].push(i);
    }
    let mut cells = Vec::new();
    let (mut sparse, mut unmatched) = (0, Vec::new());
    for (id, idx) in members.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < cfg.min_shots {
            sparse += 1;
            continue;
        }
        let heights: Vec<f64> = idx.iter().map(|&i| shots[i].rh98).collect();
        let ratios = set_ratios(&heights);
        let Some(set) = assign_set(&ratios) else {
            unmatched.push(id);
            continue;
        };
        let (row, col) = (id / cols, id % cols);
        let cx = x0 + col as f64 * cfg.cell_m;
        let cy = y0 + row as f64 * cfg.cell_m;
        cells.push(GridCell {
            id,
            row,
            col,
            bounds: (cx, cy, cx + cfg.cell_m, cy + cfg.cell_m),
            shots: idx,
            ratios,
            set,
            split: Split::Val,
            duplication: 0,
        });
    }
    for set in 1..=9u8 {
        let mut pos: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].set == set).collect();
        let n_train = (cfg.train_fraction * pos.len() as f64).ceil() as usize;
        pos.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(set) << 32)));
        for &i in &pos[..n_train] {
            cells[i].split = Split::Train;
            cells[i].duplication = duplications(set);
        }
    }
    Ok(GridSummary { cells, sparse, unmatched })
}

/// A crop window plus flips, applied identically to every raster of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    /// Mirror columns.
    pub flip_h: bool,
    /// Mirror rows.
    pub flip_v: bool,
}

impl PatchSpec {
    pub fn draw(rng: &mut impl Rng, rows: usize, cols: usize, size: usize) -> Result<Self> {
        if size == 0 || size > rows || size > cols {
            return Err(Error::Shape(format!("cannot crop {size}×{size} from {rows}×{cols}")));
        }
        Ok(Self {
            row: rng.gen_range(0..=rows - size),
            col: rng.gen_range(0..=cols - size),
            size,
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
        })
    }

    /// Crops and flips a `[rows, cols]` or `[rows, cols, ch]` raster.
    pub fn apply(&self, t: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = t.shape();
        if !(s.len() == 2 || s.len() == 3) || self.row + self.size > s[0] || self.col + self.size > s[1] {
            return Err(Error::Shape(format!("patch {self:?} does not fit {s:?}")));
        }
        let ch = if s.len() == 3 { s[2] } else { 1 };
        let n = self.size;
        let mut out = Vec::with_capacity(n * n * ch);
        for r in 0..n {
            let sr = self.row + if self.flip_v { n - 1 - r } else { r };
            for c in 0..n {
                let sc = self.col + if self.flip_h { n - 1 - c } else { c };
                let at = (sr * s[1] + sc) * ch;
                out.extend_from_slice(&t.data()[at..at + ch]);
            }
        }
        let shape: Vec<usize> = if s.len() == 3 { vec![n, n, ch] } else { vec![n, n] };
        Tensor::new(&shape, out)
    }
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub inputs: Vec<Tensor<f64>>,
    pub target: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub spec: PatchSpec,
}

/// Random crop with independent horizontal/vertical flips.
pub fn sample_patch(inputs: &[&Tensor<f64>], target: &Tensor<f64>, mask: &Tensor<f64>, size: usize, rng: &mut impl Rng) -> Result<Patch> {
    let s = target.shape();
    if s.len() != 2 || mask.shape() != s || inputs.iter().any(|t| t.shape().len() < 2 || &t.shape()[..2] != s) {
        return Err(Error::Shape(format!("inputs, target {s:?} and mask {:?} must share rows × cols", mask.shape())));
    }
    let spec = PatchSpec::draw(rng, s[0], s[1], size)?;
    Ok(Patch {
        inputs: inputs.iter().map(|t| spec.apply(t)).collect::<Result<_>>()?,
        target: spec.apply(target)?,
        mask: spec.apply(mask)?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::gedi::tests::good_shot;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn set_assignment_examples() {
        assert_eq!(assign_set(&set_ratios(&[3.0; 100])), Some(1));
        assert_eq!(duplications(1), 0);
        let mut h = vec![3.0; 97];
        h.extend([41.0, 45.0, 50.0]);
        assert_eq!(assign_set(&set_ratios(&h)), Some(9));
        assert_eq!(duplications(9), 4);
        // exactly at a threshold does not qualify
        let mut h = vec![3.0; 50];
        h.extend(vec![7.0; 50]);
        assert_eq!(assign_set(&set_ratios(&h)), Some(2));
        let mut h = vec![3.0; 40];
        h.extend(vec![7.0; 25]);
        h.extend(vec![11.0; 35]);
        assert_eq!(assign_set(&set_ratios(&h)), Some(3));
        // 40 m counts for both the 35–40 and ≥40 ranges
        assert_eq!(set_ratios(&[40.0])[7], 1.0);
        assert_eq!(set_ratios(&[40.0])[8], 1.0);
        let mixed = [3.0, 3.0, 8.0, 12.0];
        assert_eq!(assign_set(&set_ratios(&mixed)), Some(3));
        assert_eq!(assign_set(&[0.4, 0.2, 0.1, 0.1, 0.05, 0.025, 0.025, 0.025, 0.025]), None);
    }

    fn shots_at(x: f64, y: f64, heights: &[f64]) -> Vec<GediShot> {
        heights.iter().enumerate().map(|(i, &h)| GediShot { lon: x + (i % 97) as f64, lat: y + (i / 97) as f64, rh98: h, ..good_shot() }).collect()
    }

    #[test]
    fn grid_excludes_sparse_cells() {
        let cell = 7680.0;
        let mut shots = shots_at(10.0, 10.0, &[3.0; 599]);
        shots.extend(shots_at(cell + 10.0, 10.0, &[3.0; 600]));
        let g = build_grid(&shots, (0.0, 0.0, 2.0 * cell, cell), &GridConfig::default()).unwrap();
        assert_eq!(g.sparse, 1);
        assert_eq!(g.cells.len(), 1);
        assert_eq!((g.cells[0].id, g.cells[0].set), (1, 1));
        assert_eq!(g.cells[0].shots.len(), 600);
    }

    #[test]
    fn split_and_duplication() {
        let cfg = GridConfig { cell_m: 100.0, min_shots: 10, ..GridConfig::default() };
        let mut tall = vec![3.0; 97];
        tall.extend([41.0, 45.0, 50.0]);
        let mut shots = Vec::new();
        for k in 0..8 {
            shots.extend(shots_at(100.0 * k as f64, 0.0, &tall));
        }
        let g = build_grid(&shots, (0.0, 0.0, 800.0, 100.0), &cfg).unwrap();
        assert_eq!(g.cells.len(), 8);
        assert!(g.cells.iter().all(|c| c.set == 9));
        let train: Vec<&GridCell> = g.cells.iter().filter(|c| c.split == Split::Train).collect();
        assert_eq!(train.len(), 6);
        assert!(train.iter().all(|c| c.duplication == 4));
        assert!(g.cells.iter().filter(|c| c.split == Split::Val).all(|c| c.duplication == 0));
        assert_eq!(g.training_list().len(), 30);
        assert_eq!(g.validation_list().len(), 2);
        let again = build_grid(&shots, (0.0, 0.0, 800.0, 100.0), &cfg).unwrap();
        assert_eq!(g, again);

        let mut csv = Vec::new();
        g.write_manifest(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("cell_id,x0,y0,x1,y1,shots,set,split,duplication\n"));
        assert_eq!(text.lines().count(), 9);
    }

    fn marker(rows: usize, cols: usize, ch: usize) -> Tensor<f64> {
        Tensor::new(&[rows, cols, ch], (0..rows * cols * ch).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn patch_flips_are_involutions() {
        let img = marker(12, 12, 3);
        let spec = PatchSpec { row: 0, col: 0, size: 12, flip_h: true, flip_v: true };
        let once = spec.apply(&img).unwrap();
        assert_ne!(once, img);
        assert_eq!(spec.apply(&once).unwrap(), img);
        let crop = PatchSpec { row: 2, col: 3, size: 4, flip_h: false, flip_v: false }.apply(&img).unwrap();
        assert_eq!(crop.at(&[0, 0, 1]), img.at(&[2, 3, 1]));
        assert!(PatchSpec { row: 9, col: 0, size: 4, flip_h: false, flip_v: false }.apply(&img).is_err());
    }

    #[test]
    fn patch_co_transforms_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = marker(20, 20, 2);
        let mut target = Tensor::zeros(&[20, 20]);
        let mut mask = Tensor::zeros(&[20, 20]);
        for (r, c) in [(7, 9), (12, 11), (10, 10)] {
            target.set(&[r, c], img.at(&[r, c, 0]));
            mask.set(&[r, c], 1.0);
        }
        for _ in 0..50 {
            let p = sample_patch(&[&img], &target, &mask, 8, &mut rng).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    if p.mask.at(&[r, c]) == 1.0 {
                        assert_eq!(p.target.at(&[r, c]), p.inputs[0].at(&[r, c, 0]));
                    }
                }
            }
        }
        let a = sample_patch(&[&img], &target, &mask, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_patch(&[&img], &target, &mask, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.spec, a.inputs, a.target), (b.spec, b.inputs, b.target));
    }

    fn chi_square_p(counts: &[usize]) -> f64 {
        let total: usize = counts.iter().sum();
        let expected = total as f64 / counts.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn crops_and_flips_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut offsets, mut flips) = (vec![0usize; 81], [0usize; 4]);
        for _ in 0..10_000 {
            let s = PatchSpec::draw(&mut rng, 40, 40, 32).unwrap();
            offsets[s.row * 9 + s.col] += 1;
            flips[usize::from(s.flip_h) * 2 + usize::from(s.flip_v)] += 1;
        }
        assert!(chi_square_p(&offsets) > 1e-3);
        assert!(chi_square_p(&flips) > 1e-3);

        // full-size tiles: 513 offsets per axis, binned by 27
        let (mut rows, mut cols) = (vec![0usize; 19], vec![0usize; 19]);
        for _ in 0..10_000 {
            let s = PatchSpec::draw(&mut rng, 768, 768, 256).unwrap();
            rows[s.row / 27] += 1;
            cols[s.col / 27] += 1;
        }
        assert!(chi_square_p(&rows) > 1e-3);
        assert!(chi_square_p(&cols) > 1e-3);
    }
}
