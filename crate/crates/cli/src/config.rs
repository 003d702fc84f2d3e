//! Sectioned `key = value` run configuration. Unknown sections and keys are errors;
//! serializing and parsing again yields the same configuration.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use canopy_core::datapipe::{FilterConfig, GridConfig, RainGate, Rule, SynthConfig};
use canopy_core::losses::{HeightBinning, HyTecLossConfig};
use canopy_core::optim::{OptimizerKind, Schedule};
use canopy_core::train::{desk_hytec, ModelKind, TrainConfig};
use canopy_core::unet::Arch;
use canopy_core::vit::{default_taps, HyTecConfig};

/// A value that can sit on the right of `key = value`.
pub trait Value: Sized {
    fn parse(s: &str) -> Result<Self>;
    /// `None` leaves the key out of the serialized file.
    fn render(&self) -> Option<String>;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self> {
                s.parse().map_err(|e| anyhow::anyhow!("`{s}`: {e}"))
            }
            fn render(&self) -> Option<String> {
                Some(self.to_string())
            }
        }
    )*};
}

display_value!(u64, usize, f64, bool, String, ModelKind, OptName);

impl<T: Value> Value for Option<T> {
    fn parse(s: &str) -> Result<Self> {
        T::parse(s).map(Some)
    }
    fn render(&self) -> Option<String> {
        self.as_ref().and_then(Value::render)
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Result<Self> {
        s.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn render(&self) -> Option<String> {
        Some(self.iter().filter_map(Value::render).collect::<Vec<_>>().join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptName {
    Sgd,
    AdamW,
}

impl std::fmt::Display for OptName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptName::Sgd => "sgd",
            OptName::AdamW => "adamw",
        })
    }
}

impl std::str::FromStr for OptName {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptName::Sgd),
            "adamw" => Ok(OptName::AdamW),
            _ => bail!("unknown optimizer `{s}` (sgd, adamw)"),
        }
    }
}

macro_rules! section {
    ($name:ident, $tag:literal { $($(#[$m:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name { $($(#[$m])* pub $field: $ty),* }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default),* }
            }
        }

        impl $name {
            pub const TAG: &'static str = $tag;

            fn set(&mut self, key: &str, value: &str) -> Result<bool> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as Value>::parse(value).with_context(|| format!("[{}] {key}", $tag))?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }

            fn write(&self, out: &mut String) {
                let _ = writeln!(out, "[{}]", $tag);
                $(if let Some(v) = self.$field.render() {
                    let _ = writeln!(out, "{} = {}", stringify!($field), v);
                })*
            }
        }
    };
}

fn all_rules() -> Vec<String> {
    Rule::ALL.iter().map(|r| r.name().to_string()).collect()
}

section!(RunSection, "run" {
    seed: u64 = 0,
    /// Output directory for every command except `synth`.
    out: String = "out".into(),
});

section!(DataSection, "data" {
    dataset: String = "data".into(),
    tiles: usize = 16,
    tile_size: usize = 64,
    shots_per_tile: usize = 400,
    fault_rate: f64 = 0.12,
    noise: f64 = 0.01,
    stack_frames: usize = 7,
});

section!(FilterSection, "filter" {
    rules: Vec<String> = all_rules(),
    min_snr_db: f64 = FilterConfig::default().min_snr_db,
    max_view_angle: f64 = FilterConfig::default().max_view_angle,
    min_sensitivity: f64 = FilterConfig::default().min_sensitivity,
    max_elevation_gap: f64 = FilterConfig::default().max_elevation_gap,
    min_waveform_bins: u64 = FilterConfig::default().min_waveform_bins as u64,
    cover_sigmas: f64 = FilterConfig::default().cover_sigmas,
});

section!(GridSection, "grid" {
    /// Defaults to one synthetic tile.
    cell_m: Option<f64> = None,
    min_shots: usize = 100,
    train_fraction: f64 = 0.75,
});

section!(ModelSection, "model" {
    arch: ModelKind = ModelKind::UNet(Arch::A2Mdu),
    stem_width: usize = 16,
    patch: usize = 32,
    vit_patch: usize = desk_hytec().patch,
    vit_dim: usize = desk_hytec().dim,
    vit_depth: usize = desk_hytec().depth,
    vit_heads: usize = desk_hytec().heads,
    vit_mlp_ratio: usize = desk_hytec().mlp_ratio,
    vit_l_hat: usize = desk_hytec().l_hat,
    kd: bool = true,
    /// Teacher run directories or checkpoints (Hy-TeC only).
    teacher_s1: Option<String> = None,
    teacher_s2: Option<String> = None,
});

section!(OptimSection, "optim" {
    /// Defaults: SGD for U-Nets, AdamW for Hy-TeC.
    kind: Option<OptName> = None,
    /// Defaults: 1e-2 for U-Nets, 1e-4 for Hy-TeC.
    lr: Option<f64> = None,
    warmup_start: f64 = 1e-6,
    /// Defaults: 0 for U-Nets, 20 for Hy-TeC.
    warmup_epochs: Option<f64> = None,
    epochs: usize = 250,
    /// 0 means one pass over the training list.
    steps_per_epoch: usize = 0,
    batch: usize = 12,
    momentum: f64 = 0.9,
    weight_decay: f64 = 0.01,
    keep_checkpoints: usize = 3,
});

section!(LossSection, "loss" {
    delta: f64 = 3.0,
    alpha_cr: f64 = 1.0,
    betas: Vec<f64> = HyTecLossConfig::default().betas.to_vec(),
    consensus_tol: f64 = 0.10,
    bin_edges: Vec<f64> = HeightBinning::default().base_edges,
    bin_overlap: f64 = HeightBinning::default().overlap,
    alpha_min: f64 = 1.0,
    alpha_max: f64 = 2.0,
});

section!(CompositeSection, "composite" {
    /// Defaults to `<dataset>/stack_0000`.
    stack: Option<String> = None,
    /// Defaults to `<dataset>/rainfall.csv` when present; no gating otherwise.
    rainfall: Option<String> = None,
    rain_threshold: f64 = 40.0,
    rain_window: usize = 4,
    rain_lookback: usize = 4,
});

section!(EvalSection, "eval" {
    /// Defaults to the latest checkpoint under `<out>/checkpoints`.
    checkpoint: Option<String> = None,
    /// `val` (grid validation cells) or `all`.
    split: String = "val".into(),
    bin_step: f64 = 5.0,
    bin_top: f64 = 50.0,
    gsi_patch: usize = 32,
});

section!(GsiSection, "gsi" {
    /// `[rows, cols]` height raster; defaults to every prediction under `<out>/predictions`.
    height: Option<String> = None,
    /// `[rows, cols, bands]` S2 raster matching `height`.
    reference: Option<String> = None,
});

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub filter: FilterSection,
    pub grid: GridSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub loss: LossSection,
    pub composite: CompositeSection,
    pub eval: EvalSection,
    pub gsi: GsiSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = || format!("line {}", no + 1);
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').with_context(|| format!("{}: unterminated section header", at()))?.trim();
                section = Some(name.to_string());
                if !cfg.has_section(name) {
                    bail!("{}: unknown section [{name}]", at());
                }
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("{}: expected `key = value`", at()))?;
            let s = section.as_deref().with_context(|| format!("{}: key outside any section", at()))?;
            let (k, v) = (k.trim(), v.trim());
            if !cfg.set(s, k, v).with_context(at)? {
                bail!("{}: unknown key `{k}` in [{s}]", at());
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        self.run.write(&mut out);
        out.push('\n');
        self.data.write(&mut out);
        out.push('\n');
        self.filter.write(&mut out);
        out.push('\n');
        self.grid.write(&mut out);
        out.push('\n');
        self.model.write(&mut out);
        out.push('\n');
        self.optim.write(&mut out);
        out.push('\n');
        self.loss.write(&mut out);
        out.push('\n');
        self.composite.write(&mut out);
        out.push('\n');
        self.eval.write(&mut out);
        out.push('\n');
        self.gsi.write(&mut out);
        out
    }

    fn has_section(&self, name: &str) -> bool {
        [
            RunSection::TAG,
            DataSection::TAG,
            FilterSection::TAG,
            GridSection::TAG,
            ModelSection::TAG,
            OptimSection::TAG,
            LossSection::TAG,
            CompositeSection::TAG,
            EvalSection::TAG,
            GsiSection::TAG,
        ]
        .contains(&name)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<bool> {
        match section {
            RunSection::TAG => self.run.set(key, value),
            DataSection::TAG => self.data.set(key, value),
            FilterSection::TAG => self.filter.set(key, value),
            GridSection::TAG => self.grid.set(key, value),
            ModelSection::TAG => self.model.set(key, value),
            OptimSection::TAG => self.optim.set(key, value),
            LossSection::TAG => self.loss.set(key, value),
            CompositeSection::TAG => self.composite.set(key, value),
            EvalSection::TAG => self.eval.set(key, value),
            GsiSection::TAG => self.gsi.set(key, value),
            _ => Ok(false),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            tiles: d.tiles,
            size: d.tile_size,
            shots_per_tile: d.shots_per_tile,
            fault_rate: d.fault_rate,
            noise: d.noise,
            seed: self.run.seed,
        }
    }

    pub fn filter(&self) -> Result<FilterConfig> {
        let f = &self.filter;
        let mut cfg = FilterConfig {
            enabled: [false; 6],
            min_snr_db: f.min_snr_db,
            max_view_angle: f.max_view_angle,
            min_sensitivity: f.min_sensitivity,
            max_elevation_gap: f.max_elevation_gap,
            min_waveform_bins: f.min_waveform_bins as i64,
            cover_sigmas: f.cover_sigmas,
            cover_sigma: None,
        };
        for name in f.rules.iter().filter(|n| !n.is_empty()) {
            let rule: Rule = name.parse().with_context(|| format!("[filter] rules: `{name}`"))?;
            cfg.enabled[rule.index()] = true;
        }
        Ok(cfg)
    }

    pub fn grid(&self, tile_m: f64) -> GridConfig {
        GridConfig {
            cell_m: self.grid.cell_m.unwrap_or(tile_m),
            min_shots: self.grid.min_shots,
            train_fraction: self.grid.train_fraction,
            seed: self.run.seed,
        }
    }

    pub fn rain_gate(&self) -> RainGate {
        let c = &self.composite;
        RainGate { threshold: c.rain_threshold, window: c.rain_window, lookback: c.rain_lookback }
    }

    pub fn bins(&self) -> Result<HeightBinning> {
        Ok(HeightBinning::new(self.loss.bin_edges.clone(), self.loss.bin_overlap)?)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let m = &self.model;
        let o = &self.optim;
        let l = &self.loss;
        let hytec = m.arch == ModelKind::HyTec;
        let opt = match o.kind.unwrap_or(if hytec { OptName::AdamW } else { OptName::Sgd }) {
            OptName::Sgd => OptimizerKind::Sgd { momentum: o.momentum },
            OptName::AdamW => match OptimizerKind::adamw() {
                OptimizerKind::AdamW { beta1, beta2, eps, .. } => OptimizerKind::AdamW { beta1, beta2, eps, weight_decay: o.weight_decay },
                other => other,
            },
        };
        let lr = o.lr.unwrap_or(if hytec { 1e-4 } else { 1e-2 });
        let warmup = o.warmup_epochs.unwrap_or(if hytec { 20.0 } else { 0.0 });
        let total = o.epochs as f64;
        let schedule = if warmup > 0.0 {
            Schedule::WarmupCosine { start: o.warmup_start, base: lr, warmup, total }
        } else {
            Schedule::Cosine { base: lr, total }
        };
        let betas: [f64; 4] = l.betas.as_slice().try_into().map_err(|_| anyhow::anyhow!("[loss] betas needs four values"))?;
        let cfg = TrainConfig {
            kind: m.arch,
            stem_width: m.stem_width,
            hytec: HyTecConfig {
                patch: m.vit_patch,
                dim: m.vit_dim,
                depth: m.vit_depth,
                heads: m.vit_heads,
                mlp_ratio: m.vit_mlp_ratio,
                l_hat: m.vit_l_hat,
                taps: default_taps(m.vit_depth),
                ..desk_hytec()
            },
            bins: self.bins()?,
            epochs: o.epochs,
            steps_per_epoch: (o.steps_per_epoch > 0).then_some(o.steps_per_epoch),
            batch: o.batch,
            patch: m.patch,
            optimizer: opt,
            schedule,
            loss: HyTecLossConfig { betas, alpha_cr: l.alpha_cr, delta: l.delta, consensus_tol: l.consensus_tol },
            kd: m.kd,
            alpha_range: (l.alpha_min, l.alpha_max),
            seed: self.run.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
