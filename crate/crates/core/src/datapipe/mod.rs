//! Inputs to training batches: radiometric preprocessing, GEDI shot filtering,
//! target rasterization, grid rebalancing, patch sampling and a synthetic dataset.

pub mod gedi;
pub mod grid;
pub mod radiometry;
pub mod synth;

pub use gedi::{filter_gedi, rasterize_targets, BeamKind, FilterConfig, FilterReport, GediShot, Rule, TileBounds};
pub use grid::{build_grid, sample_patch, GridCell, GridConfig, GridSummary, Patch, PatchSpec, Split};
pub use radiometry::{
    day_of, median_composite, normalize_backscatter, rainfall_gate, BackscatterSample, Composite, DailyRainfall, ImageStack, RainGate,
    NODATA,
};
pub use synth::{synth_dataset, synth_stack, ShotLabel, SynthConfig, SynthDataset, SynthTile};

/// Pixel size of every raster, in meters.
pub const PIXEL_M: f64 = 10.0;
