//! Synthetic data through filtering, gridding and a few training steps.

use canopy_core::datapipe::{build_grid, filter_gedi, synth_dataset, FilterConfig, GridConfig, PatchSpec, Split, SynthConfig};
use canopy_core::train::{prepare_tiles, ModelKind, TrainConfig, Trainer};
use canopy_core::unet::Arch;

fn small() -> SynthConfig {
    SynthConfig { tiles: 4, size: 32, shots_per_tile: 200, seed: 5, ..SynthConfig::default() }
}

#[test]
fn synth_is_reproducible_and_skewed() {
    let a = synth_dataset(&small()).unwrap();
    let b = synth_dataset(&small()).unwrap();
    assert_eq!(a.shots.len(), 800);
    assert_eq!(a.shots.len(), b.shots.len());
    assert!(a.shots.iter().zip(&b.shots).all(|(x, y)| x.rh98.to_bits() == y.rh98.to_bits() && x.lon == y.lon));
    let short = a.shots.iter().filter(|s| s.rh98 < 15.0).count() as f64 / a.shots.len() as f64;
    assert!(short > 0.8, "{short}");
}

#[test]
fn filter_counts_add_up() {
    let ds = synth_dataset(&small()).unwrap();
    let rep = filter_gedi(&ds.shots, &FilterConfig::default());
    let rejected: usize = rep.rejected.iter().sum();
    assert_eq!(rep.retained.len() + rejected, ds.shots.len());
    assert_eq!(rep.verdicts.iter().filter(|v| v.is_none()).count(), rep.retained.len());
    assert!(rep.retained.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn grid_splits_every_set_and_duplicates_only_training_cells() {
    let ds = synth_dataset(&SynthConfig { tiles: 16, size: 32, shots_per_tile: 160, seed: 9, ..SynthConfig::default() }).unwrap();
    let rep = filter_gedi(&ds.shots, &FilterConfig::default());
    let kept: Vec<_> = rep.retained.iter().map(|&i| ds.shots[i].clone()).collect();
    let side = 32.0 * 10.0;
    let area = (0.0, 0.0, 4.0 * side, 4.0 * side);
    let cfg = GridConfig { cell_m: side, min_shots: 40, train_fraction: 0.75, seed: 1 };
    let summary = build_grid(&kept, area, &cfg).unwrap();
    assert!(!summary.cells.is_empty());
    for c in &summary.cells {
        assert!((1..=9).contains(&c.set));
        if c.split == Split::Val {
            assert_eq!(c.duplication, 0);
        }
    }
    let again = build_grid(&kept, area, &cfg).unwrap();
    assert_eq!(summary.training_list(), again.training_list());
}

#[test]
fn a_few_steps_reduce_the_loss_on_a_fixed_batch() {
    let ds = synth_dataset(&small()).unwrap();
    let tiles = prepare_tiles(&ds, &FilterConfig::default());
    let batch: Vec<_> = (0..2).map(|i| tiles[i].patch(&PatchSpec { row: 0, col: 0, size: 32, flip_h: false, flip_v: false }).unwrap()).collect();
    let mut cfg = TrainConfig::new(ModelKind::UNet(Arch::TwoMou));
    cfg.stem_width = 4;
    cfg.seed = 2;
    let mut t = Trainer::new(cfg, None).unwrap();
    let before = t.evaluate_loss(&batch).unwrap().total;
    for _ in 0..30 {
        t.step(&batch, 1e-2).unwrap();
    }
    let after = t.evaluate_loss(&batch).unwrap().total;
    assert!(after < before, "{before} -> {after}");
    let pred = t.predict_tile(&tiles[0]).unwrap();
    assert_eq!(pred.shape(), &[32, 32]);
    assert!(pred.data().iter().all(|v| v.is_finite()));
}
