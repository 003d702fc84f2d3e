//! One function per subcommand. Each reads what it needs from the dataset directory
//! and writes CSV reports and TNSR/1 rasters under the output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use canopy_core::datapipe::gedi::{read_shots, write_shots};
use canopy_core::datapipe::{
    build_grid, day_of, filter_gedi, median_composite, rainfall_gate, synth_dataset, synth_stack, DailyRainfall, FilterReport,
    GridSummary, ImageStack, Rule, SynthDataset, PIXEL_M,
};
use canopy_core::metrics::{
    binned_report, gsi, gsi_to_resolution, report_csv_row, summary_stats, uniform_edges, write_binned_csv, MetricsReport,
    SharpnessReport, REPORT_HEADER, TEN_METER_BANDS,
};
use canopy_core::train::{prepare_tiles, write_trace, ModelKind, Teacher, Teachers, TileData, Trainer, TRACE_HEADER};
use canopy_core::unet::Arch;
use canopy_core::Tensor;
use rayon::prelude::*;

use crate::config::RunConfig;

const CHECKPOINTS: &str = "checkpoints";
const CONFIG_FILE: &str = "config.ini";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.run.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn load_dataset(cfg: &RunConfig) -> Result<SynthDataset> {
    let dir = Path::new(&cfg.data.dataset);
    SynthDataset::load(dir).with_context(|| format!("loading dataset {} (run `canopy synth` first)", dir.display()))
}

/// Writes the synthetic tiles, shots, planted labels, one cloudy S2 stack and rainfall.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.data.dataset);
    let ds = synth_dataset(&cfg.synth())?;
    ds.save(&dir)?;
    let (stack, rain) = synth_stack(&ds.tiles[0], cfg.data.stack_frames, cfg.run.seed)?;
    stack.save(&dir.join("stack_0000"))?;
    rain.save(&dir.join("rainfall.csv"))?;
    let mut m = create(&dir.join("manifest.csv"))?;
    writeln!(m, "key,value")?;
    writeln!(m, "tiles,{}", ds.tiles.len())?;
    writeln!(m, "tile_size,{}", ds.config.size)?;
    writeln!(m, "shots,{}", ds.shots.len())?;
    writeln!(m, "planted_faults,{}", ds.labels.iter().filter(|l| !l.rule.is_empty()).count())?;
    writeln!(m, "stack_frames,{}", stack.len())?;
    writeln!(m, "seed,{}", cfg.run.seed)?;
    m.flush()?;
    log::info!("wrote {} tiles and {} shots to {}", ds.tiles.len(), ds.shots.len(), dir.display());
    Ok(dir)
}

/// Per-rule rejection counts, with planted counts and agreement when labels exist.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub report: FilterReport,
    /// `(planted, agreement)` per rule, in [`Rule::ALL`] order.
    pub planted: Option<Vec<(usize, f64)>>,
}

pub fn filter(cfg: &RunConfig) -> Result<FilterOutcome> {
    let out = out_dir(cfg)?;
    let data = Path::new(&cfg.data.dataset);
    let shots_path = data.join("shots.csv");
    let shots = read_shots(fs::File::open(&shots_path).with_context(|| format!("opening {}", shots_path.display()))?)?;
    let report = filter_gedi(&shots, &cfg.filter()?);
    let kept: Vec<_> = report.retained.iter().map(|&i| shots[i].clone()).collect();
    write_shots(&kept, create(&out.join("retained_shots.csv"))?)?;

    let labels_path = data.join("labels.csv");
    let planted = if labels_path.exists() {
        let labels = SynthDataset::load(data)?.labels;
        ensure!(labels.len() == shots.len(), "labels.csv has {} rows for {} shots", labels.len(), shots.len());
        let expected: Vec<Option<Rule>> = labels.iter().map(|l| l.expected()).collect::<std::result::Result<_, _>>()?;
        Some(
            Rule::ALL
                .iter()
                .map(|&r| {
                    let planted = expected.iter().filter(|&&e| e == Some(r)).count();
                    let agree = expected.iter().zip(&report.verdicts).filter(|(e, v)| (**e == Some(r)) == (**v == Some(r))).count();
                    (planted, agree as f64 / shots.len().max(1) as f64)
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut w = create(&out.join("filter_report.csv"))?;
    writeln!(w, "rule,enabled,rejected,planted,agreement")?;
    let enabled = cfg.filter()?.enabled;
    for (i, r) in Rule::ALL.iter().enumerate() {
        let (p, a) = planted.as_ref().map_or((String::new(), String::new()), |v| (v[i].0.to_string(), v[i].1.to_string()));
        writeln!(w, "{},{},{},{},{}", r.name(), enabled[i], report.rejected[i], p, a)?;
        println!("{:<18} rejected {:>6}{}", r.name(), report.rejected[i], if p.is_empty() { String::new() } else { format!("  planted {p:>6}  agreement {a}") });
    }
    writeln!(w, "retained,,{},,", report.retained.len())?;
    w.flush()?;
    println!("retained {} of {} shots", report.retained.len(), shots.len());
    Ok(FilterOutcome { report, planted })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeOutcome {
    pub frames: usize,
    pub kept: usize,
    pub missing: usize,
    pub image: Tensor<f64>,
}

pub fn composite(cfg: &RunConfig) -> Result<CompositeOutcome> {
    let out = out_dir(cfg)?;
    let data = Path::new(&cfg.data.dataset);
    let stack_dir = cfg.composite.stack.as_ref().map_or_else(|| data.join("stack_0000"), PathBuf::from);
    let stack = ImageStack::load(&stack_dir).with_context(|| format!("loading stack {}", stack_dir.display()))?;
    let rain_path = match &cfg.composite.rainfall {
        Some(p) => Some(PathBuf::from(p)),
        None => Some(data.join("rainfall.csv")).filter(|p| p.exists()),
    };
    let frames = stack.len();
    let stack = match rain_path {
        Some(p) => {
            let rain = DailyRainfall::load(&p)?;
            let days: Vec<i64> = stack.timestamps.iter().map(|&t| day_of(t)).collect();
            let kept = rainfall_gate(&days, &rain, cfg.rain_gate())?;
            ensure!(!kept.is_empty(), "rainfall gate rejected all {frames} acquisitions");
            stack.retain_days(&kept)?
        }
        None => stack,
    };
    let c = median_composite(&stack)?;
    c.image.save(out.join("composite.tnsr"))?;
    let mut w = create(&out.join("composite.csv"))?;
    writeln!(w, "frames,kept,missing_pixel_bands")?;
    writeln!(w, "{},{},{}", frames, stack.len(), c.missing)?;
    w.flush()?;
    println!("composited {} of {frames} frames, {} pixel-bands missing", stack.len(), c.missing);
    Ok(CompositeOutcome { frames, kept: stack.len(), missing: c.missing, image: c.image })
}

/// Grid over the filtered shots, with each selected cell mapped to the tile under its centre.
pub struct TileSplit {
    pub summary: GridSummary,
    /// Training list (with duplicates) as tile indices.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_tiles(cfg: &RunConfig, ds: &SynthDataset) -> Result<TileSplit> {
    let report = filter_gedi(&ds.shots, &cfg.filter()?);
    let kept: Vec<_> = report.retained.iter().map(|&i| ds.shots[i].clone()).collect();
    let summary = build_grid(&kept, ds.config.area(), &cfg.grid(ds.config.tile_m()))?;
    let tile_of = |id: usize| -> Result<usize> {
        let c = summary.cells.iter().find(|c| c.id == id).expect("listed cells exist");
        let (x0, y0, x1, y1) = c.bounds;
        ds.tile_at((x0 + x1) / 2.0, (y0 + y1) / 2.0).with_context(|| format!("grid cell {id} lies outside every tile"))
    };
    let train = summary.training_list().into_iter().map(tile_of).collect::<Result<_>>()?;
    let val = summary.validation_list().into_iter().map(tile_of).collect::<Result<_>>()?;
    Ok(TileSplit { summary, train, val })
}

pub fn grid(cfg: &RunConfig) -> Result<GridSummary> {
    let out = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let split = split_tiles(cfg, &ds)?;
    let mut w = create(&out.join("grid.csv"))?;
    split.summary.write_manifest(&mut w)?;
    w.flush()?;
    for set in 1..=9u8 {
        let cells: Vec<_> = split.summary.cells.iter().filter(|c| c.set == set).collect();
        if !cells.is_empty() {
            let train = cells.iter().filter(|c| c.split.to_string() == "train").count();
            println!("set {set}: {} cells ({train} train)", cells.len());
        }
    }
    println!(
        "{} cells selected, {} sparse, {} unmatched; training list {} entries",
        split.summary.cells.len(),
        split.summary.sparse,
        split.summary.unmatched.len(),
        split.train.len()
    );
    Ok(split.summary)
}

/// Resolves a run directory (latest checkpoint) or a checkpoint directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("state.txt").exists() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(&path.join(CHECKPOINTS))?.with_context(|| format!("no checkpoint under {}", path.display()))
}

fn list_checkpoints(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("state.txt").exists() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("epoch_")))
        .collect();
    v.sort();
    Ok(v)
}

fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    Ok(list_checkpoints(root)?.pop())
}

/// Loads a checkpoint for inference, together with the configuration it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Trainer)> {
    let dir = resolve_checkpoint(path)?;
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut tcfg = cfg.train()?;
    tcfg.kd = false;
    let mut t = Trainer::new(tcfg, None)?;
    t.restore(&dir).with_context(|| format!("restoring {}", dir.display()))?;
    Ok((cfg, t))
}

fn load_teacher(path: &str, arch: Arch) -> Result<Teacher> {
    let (cfg, t) = load_checkpoint(Path::new(path))?;
    ensure!(cfg.model.arch == ModelKind::UNet(arch), "{path} holds a {} model, expected {arch}", cfg.model.arch);
    Ok(Teacher::from_trainer(&t)?)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = out_dir(cfg)?;
    let tcfg = cfg.train()?;
    let teachers = if tcfg.kind == ModelKind::HyTec && tcfg.kd {
        let (Some(s1), Some(s2)) = (&cfg.model.teacher_s1, &cfg.model.teacher_s2) else {
            bail!("Hy-TeC distillation needs [model] teacher_s1 and teacher_s2 checkpoints (or kd = false)");
        };
        Some(Teachers::new(load_teacher(s1, Arch::TeacherS1)?, load_teacher(s2, Arch::TeacherS2)?)?)
    } else {
        None
    };
    let ds = load_dataset(cfg)?;
    let tiles = prepare_tiles(&ds, &cfg.filter()?);
    let split = split_tiles(cfg, &ds)?;
    ensure!(!split.train.is_empty(), "the grid selected no training cells; check [grid] min_shots and cell_m");

    let mut trainer = Trainer::new(tcfg, teachers)?;
    let root = out.join(CHECKPOINTS);
    let trace_path = out.join("trace.csv");
    let mut kept_trace = Vec::new();
    if let Some(latest) = latest_checkpoint(&root)? {
        trainer.restore(&latest).with_context(|| format!("resuming from {}", latest.display()))?;
        log::info!("resuming after epoch {} from {}", trainer.epochs_done, latest.display());
        if let Ok(text) = fs::read_to_string(&trace_path) {
            kept_trace = text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= trainer.steps_done))
                .map(str::to_string)
                .collect();
        }
    }
    fs::write(out.join(CONFIG_FILE), cfg.serialize()).context("writing config.ini")?;
    let mut trace = create(&trace_path)?;
    writeln!(trace, "{TRACE_HEADER}")?;
    for l in &kept_trace {
        writeln!(trace, "{l}")?;
    }
    trace.flush()?;

    while trainer.epochs_done < trainer.cfg.epochs {
        let mut io: std::io::Result<()> = Ok(());
        let rows = trainer.train_epoch(&tiles, &split.train, |r| {
            if io.is_ok() {
                io = writeln!(trace, "{}", r.csv()).and_then(|_| trace.flush());
            }
        });
        io.context("writing trace.csv")?;
        let rows = rows.with_context(|| format!("training aborted in epoch {}; see {}", trainer.epochs_done + 1, trace_path.display()))?;
        let mean = rows.iter().map(|r| r.parts.total).sum::<f64>() / rows.len() as f64;
        log::info!("epoch {}/{}: mean loss {mean:.5}", trainer.epochs_done, trainer.cfg.epochs);
        let dir = root.join(format!("epoch_{:04}", trainer.epochs_done));
        trainer.save(&dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.serialize())?;
        let all = list_checkpoints(&root)?;
        for old in &all[..all.len().saturating_sub(cfg.optim.keep_checkpoints.max(1))] {
            fs::remove_dir_all(old).with_context(|| format!("removing {}", old.display()))?;
        }
    }
    let checkpoint = latest_checkpoint(&root)?.context("training finished without a checkpoint")?;
    Ok(TrainOutcome { trainer, checkpoint })
}

/// One row of the GSI report.
#[derive(Clone, Debug, PartialEq)]
pub struct GsiRow {
    pub tile: usize,
    pub row: usize,
    pub col: usize,
    pub report: Option<SharpnessReport>,
}

/// GSI on non-overlapping `patch`-sized windows.
pub fn gsi_patches(tile: usize, height: &Tensor<f64>, reference: &Tensor<f64>, patch: usize) -> Result<Vec<GsiRow>> {
    let s = height.shape();
    ensure!(s.len() == 2 && reference.shape().len() == 3 && reference.shape()[..2] == *s, "height {s:?} vs reference {:?}", reference.shape());
    ensure!(patch >= 8 && patch <= s[0].min(s[1]), "GSI patch {patch} does not fit a {s:?} raster");
    let mut rows = Vec::new();
    for r0 in (0..=s[0] - patch).step_by(patch) {
        for c0 in (0..=s[1] - patch).step_by(patch) {
            let spec = canopy_core::datapipe::PatchSpec { row: r0, col: c0, size: patch, flip_h: false, flip_v: false };
            let report = gsi(&spec.apply(height)?, &spec.apply(reference)?, &TEN_METER_BANDS)?;
            rows.push(GsiRow { tile, row: r0, col: c0, report });
        }
    }
    Ok(rows)
}

fn write_gsi(rows: &[GsiRow], path: &Path) -> Result<Option<(f64, f64)>> {
    let mut w = create(path)?;
    writeln!(w, "tile,row,col,si_output,si_reference,gsi,effective_resolution")?;
    for r in rows {
        match &r.report {
            Some(g) => writeln!(w, "{},{},{},{},{},{},{}", r.tile, r.row, r.col, g.si_output, g.si_reference, g.gsi, g.effective_resolution)?,
            None => writeln!(w, "{},{},{},,,,", r.tile, r.row, r.col)?,
        }
    }
    let valid: Vec<f64> = rows.iter().filter_map(|r| r.report.as_ref().map(|g| g.gsi)).collect();
    let agg = (!valid.is_empty()).then(|| {
        let m = valid.iter().sum::<f64>() / valid.len() as f64;
        (m, gsi_to_resolution(m))
    });
    if let Some((m, res)) = agg {
        writeln!(w, "all,,,,,{m},{res}")?;
    }
    w.flush()?;
    Ok(agg)
}

pub struct EvalOutcome {
    pub gedi: MetricsReport,
    pub dense: Option<MetricsReport>,
    pub tiles: Vec<usize>,
    pub gsi: Option<(f64, f64)>,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let out = out_dir(cfg)?;
    let ck = cfg.eval.checkpoint.as_ref().map_or_else(|| out.clone(), PathBuf::from);
    let (ck_cfg, trainer) = load_checkpoint(&ck)?;
    ensure!(
        ck_cfg.model.arch == cfg.model.arch,
        "checkpoint {} holds a {} model but the configuration asks for {}",
        ck.display(),
        ck_cfg.model.arch,
        cfg.model.arch
    );
    let ds = load_dataset(cfg)?;
    let tiles = prepare_tiles(&ds, &cfg.filter()?);
    let ids: Vec<usize> = match cfg.eval.split.as_str() {
        "all" => (0..tiles.len()).collect(),
        "val" => {
            let mut v = split_tiles(cfg, &ds)?.val;
            v.sort_unstable();
            v.dedup();
            ensure!(!v.is_empty(), "the grid has no validation cells; use [eval] split = all");
            v
        }
        other => bail!("[eval] split must be `val` or `all`, got `{other}`"),
    };
    let chosen: Vec<&TileData> = ids.iter().map(|&i| &tiles[i]).collect();
    let preds: Vec<Tensor<f64>> = chosen.par_iter().map(|t| trainer.predict_tile(t)).collect::<std::result::Result<_, _>>()?;

    let pred_dir = out.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let (mut y, mut yhat, mut ty, mut tyhat) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut gsi_rows = Vec::new();
    for (t, p) in chosen.iter().zip(&preds) {
        p.save(pred_dir.join(format!("tile_{:04}.tnsr", t.id)))?;
        for ((&m, &g), &h) in t.sample.mask.data().iter().zip(t.sample.target.data()).zip(p.data()) {
            if m != 0.0 {
                y.push(g);
                yhat.push(h);
            }
        }
        if let Some(truth) = &t.truth {
            ty.extend_from_slice(truth.data());
            tyhat.extend_from_slice(p.data());
        }
        gsi_rows.extend(gsi_patches(t.id, p, &t.sample.s2, cfg.eval.gsi_patch)?);
    }
    let gedi = summary_stats(&y, &yhat).context("too few GEDI targets on the evaluation tiles")?;
    let dense = (!ty.is_empty()).then(|| summary_stats(&ty, &tyhat)).transpose()?;
    let mut w = create(&out.join("overall.csv"))?;
    writeln!(w, "{REPORT_HEADER}")?;
    writeln!(w, "{}", report_csv_row("gedi", &gedi))?;
    if let Some(d) = &dense {
        writeln!(w, "{}", report_csv_row("dense", d))?;
    }
    w.flush()?;
    let bins = binned_report(&y, &yhat, &uniform_edges(cfg.eval.bin_step, cfg.eval.bin_top))?;
    let mut w = create(&out.join("binned.csv"))?;
    write_binned_csv(&bins, &mut w)?;
    w.flush()?;
    let agg = write_gsi(&gsi_rows, &out.join("gsi.csv"))?;
    println!("{} tiles, {} GEDI targets: rmse {:.3} m, bias {:.3} m", ids.len(), gedi.n, gedi.rmse, gedi.bias);
    if let Some(d) = &dense {
        println!("dense truth: rmse {:.3} m, bias {:.3} m", d.rmse, d.bias);
    }
    if let Some((g, res)) = agg {
        println!("mean GSI {g:.3} (~{res:.1} m effective resolution at {PIXEL_M} m pixels)");
    }
    Ok(EvalOutcome { gedi, dense, tiles: ids, gsi: agg })
}

pub fn gsi_cmd(cfg: &RunConfig) -> Result<Vec<GsiRow>> {
    let out = out_dir(cfg)?;
    let patch = cfg.eval.gsi_patch;
    let rows = match (&cfg.gsi.height, &cfg.gsi.reference) {
        (Some(h), Some(r)) => gsi_patches(0, &Tensor::load(h)?, &Tensor::load(r)?, patch)?,
        (None, None) => {
            let ds = load_dataset(cfg)?;
            let pred_dir = out.join("predictions");
            let mut rows = Vec::new();
            for t in &ds.tiles {
                let p = pred_dir.join(format!("tile_{:04}.tnsr", t.id));
                if p.exists() {
                    rows.extend(gsi_patches(t.id, &Tensor::load(&p)?, &t.s2, patch)?);
                }
            }
            ensure!(!rows.is_empty(), "no predictions under {} (run `canopy eval` first)", pred_dir.display());
            rows
        }
        _ => bail!("[gsi] needs both height and reference, or neither"),
    };
    if let Some((g, res)) = write_gsi(&rows, &out.join("gsi.csv"))? {
        println!("{} patches, mean GSI {g:.4}, effective resolution {res:.1} m", rows.len());
    }
    Ok(rows)
}

/// Writes a loss trace to `path` (used by tests and tools).
pub fn save_trace(rows: &[canopy_core::train::TraceRow], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_trace(rows, &mut w)?;
    w.flush()?;
    Ok(())
}
