//! Accuracy statistics, the mean-squared-deviation decomposition, the Crete blur
//! metric and its sharpness index, CDF upscaling and canopy-height differencing.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Accuracy summary of estimates `ŷ` against measurements `y`.
///
/// `bias` is `mean(ŷ − y)`. Standard deviations use the population (1/N) form.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    /// Missing when either vector has zero variance.
    pub r: Option<f64>,
    pub rmse: f64,
    /// Percent, over pairs with `y ≥ 1 m`; missing when there are none.
    pub rmspe: Option<f64>,
    pub bias: f64,
    pub sdsd: f64,
    pub lcs: f64,
    pub sd_measured: f64,
    pub sd_estimated: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_pairs(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(format!("{} measurements vs {} estimates", y.len(), yhat.len())));
    }
    if y.len() < 2 {
        return Err(Error::Invalid(format!("need at least two pairs, got {}", y.len())));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric inputs".into()));
    }
    Ok(())
}

pub fn summary_stats(y: &[f64], yhat: &[f64]) -> Result<MetricsReport> {
    check_pairs(y, yhat)?;
    let n = y.len() as f64;
    let (my, ms) = (mean(y), mean(yhat));
    let var_m = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let var_s = yhat.iter().map(|v| (v - ms).powi(2)).sum::<f64>() / n;
    let cov = y.iter().zip(yhat).map(|(a, b)| (a - my) * (b - ms)).sum::<f64>() / n;
    let (sd_m, sd_s) = (var_m.sqrt(), var_s.sqrt());
    let r = (sd_m > 0.0 && sd_s > 0.0).then(|| (cov / (sd_m * sd_s)).clamp(-1.0, 1.0));
    let mse = y.iter().zip(yhat).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n;
    let pct: Vec<f64> = y.iter().zip(yhat).filter(|(a, _)| **a >= 1.0).map(|(a, b)| ((b - a) / a).powi(2)).collect();
    let rmspe = (!pct.is_empty()).then(|| 100.0 * mean(&pct).sqrt());
    // with a zero SD the correlation term vanishes whatever r would be
    let lcs = 2.0 * sd_s * sd_m * (1.0 - r.unwrap_or(1.0));
    Ok(MetricsReport {
        n: y.len(),
        r,
        rmse: mse.sqrt(),
        rmspe,
        bias: ms - my,
        sdsd: (sd_s - sd_m).powi(2),
        lcs,
        sd_measured: sd_m,
        sd_estimated: sd_s,
    })
}

/// Components of the mean squared deviation: `(bias², SDSD, LCS, residual)` where
/// `residual = mse − (bias² + SDSD + LCS)`.
pub fn msd_decomposition(y: &[f64], yhat: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let rep = summary_stats(y, yhat)?;
    let b2 = rep.bias * rep.bias;
    let mse = rep.rmse * rep.rmse;
    Ok((b2, rep.sdsd, rep.lcs, mse - (b2 + rep.sdsd + rep.lcs)))
}

/// One row of a per-height-range report; `report` is `None` when fewer than two pairs fall in the range.
#[derive(Clone, Debug, PartialEq)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub report: Option<MetricsReport>,
}

/// Buckets pairs by `y` into `[e_k, e_{k+1})` and summarizes each bucket.
pub fn binned_report(y: &[f64], yhat: &[f64], edges: &[f64]) -> Result<Vec<BinRow>> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(format!("{} measurements vs {} estimates", y.len(), yhat.len())));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Invalid(format!("report edges must be ascending: {edges:?}")));
    }
    edges
        .windows(2)
        .map(|w| {
            let (a, b): (Vec<f64>, Vec<f64>) = y.iter().zip(yhat).filter(|(v, _)| w[0] <= **v && **v < w[1]).map(|(a, b)| (*a, *b)).unzip();
            let report = if a.len() >= 2 { Some(summary_stats(&a, &b)?) } else { None };
            Ok(BinRow { lo: w[0], hi: w[1], n: a.len(), report })
        })
        .collect()
}

/// `lo, hi` edges at a fixed step covering `[0, top]`.
pub fn uniform_edges(step: f64, top: f64) -> Vec<f64> {
    let n = (top / step).ceil() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub const REPORT_HEADER: &str = "range,n,r,rmse,rmspe,bias,sdsd,lcs";

pub fn report_csv_row(label: &str, rep: &MetricsReport) -> String {
    format!("{label},{},{},{},{},{},{},{}", rep.n, opt(rep.r), rep.rmse, opt(rep.rmspe), rep.bias, rep.sdsd, rep.lcs)
}

pub fn write_binned_csv(rows: &[BinRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for row in rows {
        let label = format!("{}-{}", row.lo, row.hi);
        match &row.report {
            Some(rep) => writeln!(out, "{}", report_csv_row(&label, rep))?,
            None => writeln!(out, "{label},{},,,,,,", row.n)?,
        }
    }
    Ok(())
}

// ---- sharpness -----------------------------------------------------------

const BLUR_TAPS: usize = 9;

/// Single-channel image view `[rows, cols]` with replicate-border access.
struct Plane<'a> {
    v: &'a [f64],
    h: usize,
    w: usize,
}

impl Plane<'_> {
    fn at(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.h as isize - 1) as usize;
        let c = c.clamp(0, self.w as isize - 1) as usize;
        self.v[r * self.w + c]
    }
}

fn box_blur(p: &Plane<'_>, vertical: bool) -> Vec<f64> {
    let half = (BLUR_TAPS / 2) as isize;
    let mut out = vec![0.0; p.h * p.w];
    for r in 0..p.h as isize {
        for c in 0..p.w as isize {
            let s: f64 = (-half..=half).map(|k| if vertical { p.at(r + k, c) } else { p.at(r, c + k) }).sum();
            out[r as usize * p.w + c as usize] = s / BLUR_TAPS as f64;
        }
    }
    out
}

/// Crete et al. no-reference blur estimate in `[0, 1]`; higher is blurrier.
///
/// `None` for images without any intensity variation.
pub fn blur_metric(img: &Tensor<f64>) -> Result<Option<f64>> {
    let s = img.shape();
    if s.len() != 2 || s[0] < 8 || s[1] < 8 {
        return Err(Error::Shape(format!("blur metric needs a single-channel image of at least 8×8, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let f = Plane { v: img.data(), h, w };
    let mut ratios = Vec::with_capacity(2);
    for vertical in [true, false] {
        let blurred = box_blur(&f, vertical);
        let b = Plane { v: &blurred, h, w };
        let (mut s_f, mut s_v) = (0.0, 0.0);
        for r in 0..h as isize {
            for c in 0..w as isize {
                let (pr, pc) = if vertical { (r - 1, c) } else { (r, c - 1) };
                if pr < 0 || pc < 0 {
                    continue;
                }
                let d_f = (f.at(r, c) - f.at(pr, pc)).abs();
                let d_b = (b.at(r, c) - b.at(pr, pc)).abs();
                s_f += d_f;
                s_v += (d_f - d_b).max(0.0);
            }
        }
        if s_f > 0.0 {
            ratios.push((s_f - s_v) / s_f);
        }
    }
    Ok(ratios.into_iter().reduce(f64::max))
}

/// Separable Gaussian blur with replicate borders (kernel radius `ceil(3σ)`).
pub fn gaussian_blur(img: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    let s = img.shape();
    if s.len() != 2 || !(sigma > 0.0) {
        return Err(Error::Invalid(format!("gaussian blur of {s:?} with sigma {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    let (h, w) = (s[0], s[1]);
    let pass = |src: &[f64], vertical: bool| -> Vec<f64> {
        let p = Plane { v: src, h, w };
        let mut out = vec![0.0; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                out[r as usize * w + c as usize] = (-radius..=radius)
                    .zip(&k)
                    .map(|(i, kv)| kv * if vertical { p.at(r + i, c) } else { p.at(r, c + i) })
                    .sum();
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    Tensor::new(s, pass(&tmp, false))
}

/// Sharpness index of an output map relative to reference imagery.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessReport {
    pub si_output: f64,
    pub si_reference: f64,
    pub gsi: f64,
    pub effective_resolution: f64,
}

/// Table 2: GSI → effective ground resolution (m).
pub const GSI_TABLE: [(f64, f64); 13] = [
    (1.00, 10.0),
    (1.03, 12.5),
    (1.08, 15.0),
    (1.14, 17.5),
    (1.21, 20.0),
    (1.29, 22.5),
    (1.37, 25.0),
    (1.46, 27.5),
    (1.56, 30.0),
    (1.68, 32.5),
    (1.77, 35.0),
    (1.88, 37.5),
    (2.00, 40.0),
];

/// Piecewise-linear lookup in [`GSI_TABLE`], clamped to its end points.
pub fn gsi_to_resolution(gsi: f64) -> f64 {
    let (first, last) = (GSI_TABLE[0], GSI_TABLE[GSI_TABLE.len() - 1]);
    if gsi <= first.0 {
        return first.1;
    }
    if gsi >= last.0 {
        return last.1;
    }
    for w in GSI_TABLE.windows(2) {
        let ((g0, r0), (g1, r1)) = (w[0], w[1]);
        if gsi == g0 {
            return r0;
        }
        if gsi < g1 {
            return r0 + (r1 - r0) * (gsi - g0) / (g1 - g0);
        }
    }
    last.1
}

/// The 10 m bands (B2, B3, B4, B8) of the 10-band S2 stack.
pub const TEN_METER_BANDS: [usize; 4] = [0, 1, 2, 6];

/// `SM(output) / mean_b SM(reference[.., .., b])` over `bands`; `None` when any metric is undefined.
pub fn gsi(output: &Tensor<f64>, reference: &Tensor<f64>, bands: &[usize]) -> Result<Option<SharpnessReport>> {
    let (os, rs) = (output.shape(), reference.shape());
    if os.len() != 2 || rs.len() != 3 || os != &rs[..2] {
        return Err(Error::Shape(format!("output {os:?} vs reference {rs:?}")));
    }
    if bands.is_empty() || bands.iter().any(|&b| b >= rs[2]) {
        return Err(Error::Invalid(format!("reference bands {bands:?} out of range for {} channels", rs[2])));
    }
    let Some(si_output) = blur_metric(output)? else { return Ok(None) };
    let mut total = 0.0;
    for &b in bands {
        let plane: Vec<f64> = reference.data().iter().skip(b).step_by(rs[2]).copied().collect();
        match blur_metric(&Tensor::new(os, plane)?)? {
            Some(v) => total += v,
            None => return Ok(None),
        }
    }
    let si_reference = total / bands.len() as f64;
    if si_reference <= 0.0 {
        return Ok(None);
    }
    let g = si_output / si_reference;
    Ok(Some(SharpnessReport { si_output, si_reference, gsi: g, effective_resolution: gsi_to_resolution(g) }))
}

// ---- reference processing -------------------------------------------------

/// Per `factor×factor` block: the smallest 0.1 m level whose empirical CDF reaches `q`.
pub fn cdf_upscale(high: &Tensor<f64>, factor: usize, q: f64) -> Result<Tensor<f64>> {
    let s = high.shape();
    if s.len() != 2 || factor == 0 || s[0] % factor != 0 || s[1] % factor != 0 {
        return Err(Error::Shape(format!("{s:?} is not divisible into {factor}×{factor} blocks")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Invalid(format!("quantile must be in (0, 1], got {q}")));
    }
    let (oh, ow) = (s[0] / factor, s[1] / factor);
    let n = factor * factor;
    let needed = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(oh * ow);
    let mut levels = Vec::with_capacity(n);
    for by in 0..oh {
        for bx in 0..ow {
            levels.clear();
            for r in 0..factor {
                for c in 0..factor {
                    let v = high.data()[(by * factor + r) * s[1] + bx * factor + c];
                    levels.push((v * 10.0).round() as i64);
                }
            }
            // counting CDF over integer decimeter levels
            let (lo, hi) = (*levels.iter().min().unwrap(), *levels.iter().max().unwrap());
            let mut counts = vec![0usize; (hi - lo + 1) as usize];
            for &l in &levels {
                counts[(l - lo) as usize] += 1;
            }
            let mut cum = 0;
            let mut pick = hi;
            for (i, &cnt) in counts.iter().enumerate() {
                cum += cnt;
                if cum >= needed {
                    pick = lo + i as i64;
                    break;
                }
            }
            out.push(pick as f64 / 10.0);
        }
    }
    Tensor::new(&[oh, ow], out)
}

/// Canopy height `max(DSM − DEM, 0)`.
pub fn chm(dsm: &Tensor<f64>, dem: &Tensor<f64>) -> Result<Tensor<f64>> {
    if dsm.shape() != dem.shape() {
        return Err(Error::Shape(format!("DSM {:?} vs DEM {:?}", dsm.shape(), dem.shape())));
    }
    let v = dsm.data().iter().zip(dem.data()).map(|(s, e)| (s - e).max(0.0)).collect();
    Tensor::new(dsm.shape(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn summary_examples() {
        let y = [1.0, 2.0, 3.0, 7.5];
        let r = summary_stats(&y, &y).unwrap();
        assert_eq!((r.r, r.rmse, r.sdsd, r.lcs), (Some(1.0), 0.0, 0.0, 0.0));

        let r = summary_stats(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        close(r.rmse, 1.0, 1e-15);
        close(r.bias, 1.0, 1e-15);
        close(r.sdsd, 0.0, 1e-15);
        close(r.lcs, 0.0, 1e-15);
        close(r.r.unwrap(), 1.0, 1e-15);

        let r = summary_stats(&[1.0, 2.0], &[2.0, 3.0]).unwrap();
        close(r.rmspe.unwrap(), 100.0 * ((1.0 + 0.25) / 2.0f64).sqrt(), 1e-12);
        close(r.rmspe.unwrap(), 79.06, 5e-3);
    }

    #[test]
    fn summary_edge_cases() {
        assert!(summary_stats(&[1.0], &[1.0]).is_err());
        assert!(summary_stats(&[1.0, 2.0], &[1.0]).is_err());
        let r = summary_stats(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.r, None);
        let r = summary_stats(&[0.2, 0.5], &[1.0, 1.0]).unwrap();
        assert_eq!(r.rmspe, None);
    }

    #[test]
    fn decomposition_examples() {
        let y = [1.0, 4.0, 2.0, 8.0];
        let (b, s, l, res) = msd_decomposition(&y, &y).unwrap();
        assert_eq!((b, s, l, res), (0.0, 0.0, 0.0, 0.0));
        let shifted: Vec<f64> = y.iter().map(|v| v + 2.5).collect();
        let (b, s, l, _) = msd_decomposition(&y, &shifted).unwrap();
        close(b, 6.25, 1e-12);
        close(s, 0.0, 1e-12);
        close(l, 0.0, 1e-12);
    }

    #[test]
    fn decomposition_identity_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(2..60);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
            let yhat: Vec<f64> = y.iter().map(|v| 0.7 * v + rng.gen_range(-8.0..8.0)).collect();
            let (b, s, l, res) = msd_decomposition(&y, &yhat).unwrap();
            let mse = b + s + l + res;
            assert!(res.abs() <= 1e-9 * mse.max(f64::MIN_POSITIVE), "{res} of {mse}");
        }
    }

    proptest! {
        #[test]
        fn correlation_is_affine_invariant(
            y in proptest::collection::vec(-50.0f64..50.0, 3..30),
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            b in -10.0f64..10.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let yhat: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-3.0..3.0)).collect();
            let base = summary_stats(&y, &yhat).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let moved = summary_stats(&ys, &yhat).unwrap();
            if let (Some(r0), Some(r1)) = (base.r, moved.r) {
                prop_assert!((r1 - a.signum() * r0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn binned_report_examples() {
        let y = [1.0, 2.0, 3.0, 6.0, 7.0, 8.0];
        let yhat = [1.0, 2.0, 3.0, 7.0, 7.0, 10.0];
        let rows = binned_report(&y, &yhat, &[0.0, 5.0, 10.0, 15.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].report.as_ref().unwrap().rmse, 0.0);
        close(rows[1].report.as_ref().unwrap().rmse, (5.0f64 / 3.0).sqrt(), 1e-12);
        assert_eq!(rows[2].n, 0);
        assert!(rows[2].report.is_none());
        let one = binned_report(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(one.iter().filter(|r| r.report.is_some()).count(), 1);
        let mut csv = Vec::new();
        write_binned_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("\n10-15,0,,,,,,\n"));
        assert_eq!(uniform_edges(5.0, 50.0).len(), 11);
    }

    fn noise(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn blur_metric_behaviour() {
        let img = noise(64, 64, 1);
        let sharp = blur_metric(&img).unwrap().unwrap();
        let soft = blur_metric(&gaussian_blur(&img, 2.0).unwrap()).unwrap().unwrap();
        assert!(soft > sharp);

        let mut t = vec![0.0; 64 * 64];
        for r in 0..64 {
            for c in 0..64 {
                t[c * 64 + r] = img.data()[r * 64 + c];
            }
        }
        let st = blur_metric(&Tensor::new(&[64, 64], t).unwrap()).unwrap().unwrap();
        close(st, sharp, 0.05);

        let checker = Tensor::new(&[32, 32], (0..1024).map(|i| ((i / 32 + i % 32) % 2) as f64).collect()).unwrap();
        assert!(blur_metric(&checker).unwrap().unwrap() < 0.3);

        assert_eq!(blur_metric(&Tensor::full(&[16, 16], 3.0)).unwrap(), None);
        assert!(blur_metric(&Tensor::full(&[4, 16], 3.0)).is_err());
    }

    #[test]
    fn blur_metric_is_affine_invariant() {
        let img = gaussian_blur(&noise(32, 32, 2), 1.0).unwrap();
        let a = blur_metric(&img).unwrap().unwrap();
        let b = blur_metric(&img.map(|v| 3.5 * v - 2.0)).unwrap().unwrap();
        close(a, b, 1e-12);
    }

    #[test]
    fn table_lookup() {
        assert_eq!(gsi_to_resolution(1.0), 10.0);
        assert_eq!(gsi_to_resolution(1.21), 20.0);
        assert_eq!(gsi_to_resolution(1.37), 25.0);
        assert_eq!(gsi_to_resolution(2.0), 40.0);
        assert_eq!(gsi_to_resolution(0.7), 10.0);
        assert_eq!(gsi_to_resolution(3.1), 40.0);
        close(gsi_to_resolution(1.25), 21.25, 1e-12);
        for (g, res) in GSI_TABLE {
            assert_eq!(gsi_to_resolution(g), res);
        }
    }

    #[test]
    fn self_gsi_is_one() {
        let img = noise(32, 32, 3);
        let mut stack = vec![0.0; 32 * 32 * 10];
        for (i, &v) in img.data().iter().enumerate() {
            for b in 0..10 {
                stack[i * 10 + b] = v;
            }
        }
        let reference = Tensor::new(&[32, 32, 10], stack).unwrap();
        let rep = gsi(&img, &reference, &TEN_METER_BANDS).unwrap().unwrap();
        assert_eq!(rep.gsi, 1.0);
        assert_eq!(rep.effective_resolution, 10.0);
        let blurred = gaussian_blur(&img, 1.0).unwrap();
        assert!(gsi(&blurred, &reference, &TEN_METER_BANDS).unwrap().unwrap().gsi > 1.0);
        assert!(gsi(&img, &reference, &[11]).is_err());
    }

    fn cdf_oracle(vals: &[f64], q: f64) -> f64 {
        let mut levels: Vec<i64> = vals.iter().map(|v| (v * 10.0).round() as i64).collect();
        levels.sort_unstable();
        let k = (q * vals.len() as f64 - 1e-9).ceil().max(1.0) as usize;
        levels[k - 1] as f64 / 10.0
    }

    #[test]
    fn cdf_examples() {
        let c = cdf_upscale(&Tensor::full(&[4, 4], 12.34), 4, 0.97).unwrap();
        assert_eq!(c.data(), &[12.3]);
        let mut block = vec![0.0; 100];
        block[97..].iter_mut().for_each(|v| *v = 30.0);
        assert_eq!(cdf_upscale(&Tensor::new(&[10, 10], block).unwrap(), 10, 0.97).unwrap().data(), &[0.0]);
        let ramp: Vec<f64> = (1..=100).map(|i| i as f64 / 10.0).collect();
        assert_eq!(cdf_upscale(&Tensor::new(&[10, 10], ramp).unwrap(), 10, 0.97).unwrap().data(), &[9.7]);
        assert!(cdf_upscale(&Tensor::full(&[5, 5], 1.0), 2, 0.97).is_err());
    }

    #[test]
    fn cdf_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let f = rng.gen_range(2..8);
            let img = Tensor::new(&[2 * f, 3 * f], (0..6 * f * f).map(|_| rng.gen_range(0.0..45.0)).collect()).unwrap();
            let up = cdf_upscale(&img, f, 0.97).unwrap();
            for by in 0..2 {
                for bx in 0..3 {
                    let vals: Vec<f64> = (0..f * f).map(|i| img.at(&[by * f + i / f, bx * f + i % f])).collect();
                    assert_eq!(up.at(&[by, bx]), cdf_oracle(&vals, 0.97));
                }
            }
        }
    }

    #[test]
    fn chm_examples() {
        let dem = Tensor::new(&[2, 2], vec![100.0, 110.0, 95.0, 120.0]).unwrap();
        assert!(chm(&dem, &dem).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(chm(&dem.map(|v| v + 20.0), &dem).unwrap().data().iter().all(|&v| v == 20.0));
        let mut dsm = dem.map(|v| v + 5.0);
        dsm.set(&[1, 0], 90.0);
        assert_eq!(chm(&dsm, &dem).unwrap().at(&[1, 0]), 0.0);
        assert!(chm(&dem, &Tensor::zeros(&[3])).is_err());
    }
}
