use canopy_core::losses::{adaptive_log_partition, adaptive_rho, batch_class_weights, bin_assign, huber, kd_teacher_consensus, ClassTarget, HeightBinning};
use canopy_core::metrics::{binned_report, gaussian_blur, gsi, msd_decomposition, summary_stats, uniform_edges};
use canopy_core::{Tape, Tensor};
use proptest::prelude::*;

fn huber_value(r: f64, delta: f64) -> f64 {
    let mut t = Tape::<f64>::new();
    let p = t.leaf(&Tensor::from_f64(&[1], &[r]).unwrap());
    let l = huber(&mut t, p, &[0.0], &[1.0], delta).unwrap();
    t.item(l)
}

proptest! {
    #[test]
    fn adaptive_rho_is_even_and_grows_with_the_residual(r in -60.0f64..60.0, alpha in 0.0f64..2.0, c in 0.2f64..5.0, grow in 0.0f64..10.0) {
        let a = adaptive_rho(r, alpha, c);
        prop_assert!(a >= 0.0);
        prop_assert!((a - adaptive_rho(-r, alpha, c)).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(adaptive_rho(r.abs() + grow, alpha, c) >= a - 1e-12);
    }

    #[test]
    fn adaptive_rho_at_one_has_bounded_slope(r in -60.0f64..60.0, c in 0.2f64..5.0) {
        let h = 1e-6;
        let slope = (adaptive_rho(r + h, 1.0, c) - adaptive_rho(r - h, 1.0, c)) / (2.0 * h);
        prop_assert!(slope.abs() <= 1.0 / c + 1e-6);
    }

    #[test]
    fn huber_matches_its_two_branches(r in -20.0f64..20.0, delta in 0.5f64..6.0) {
        let want = if r.abs() <= delta { 0.5 * r * r } else { delta * (r.abs() - 0.5 * delta) };
        prop_assert!((huber_value(r, delta) - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn soft_bins_are_distributions(h in -5.0f64..80.0) {
        let bins = HeightBinning::default();
        let p = bin_assign(h, &bins);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mse_splits_into_bias_sdsd_and_lcs(pairs in prop::collection::vec((0.0f64..50.0, -10.0f64..10.0), 2..200)) {
        let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let yh: Vec<f64> = pairs.iter().map(|p| p.0 * 0.8 + p.1).collect();
        let (b2, sdsd, lcs, residual) = msd_decomposition(&y, &yh).unwrap();
        let mse = y.iter().zip(&yh).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        prop_assert!((b2 + sdsd + lcs - mse).abs() <= 1e-9 * mse.max(1e-12));
        prop_assert!(residual.abs() <= 1e-9 * mse.max(1.0));
    }
}

#[test]
fn teacher_consensus_keeps_agreeing_pixels() {
    let (value, mask) = kd_teacher_consensus(&[10.0, 10.0, 0.0, 30.0], &[10.5, 14.0, 0.0, 31.0], 0.10).unwrap();
    assert_eq!(mask, vec![1.0, 0.0, 1.0, 1.0]);
    assert_eq!(value[0], 10.25);
    assert_eq!(value[2], 0.0);
    assert_eq!(value[3], 30.5);
}

#[test]
fn rare_classes_get_larger_weights() {
    let h = Tensor::new(&[2, 4], vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 45.0]).unwrap();
    let m = Tensor::full(&[2, 4], 1.0);
    let t = ClassTarget::from_heights(&h, &m, &HeightBinning::default()).unwrap();
    let w = batch_class_weights(&[&t]).unwrap();
    let bins = HeightBinning::default();
    let argmax = |p: Vec<f64>| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    let (short, tall) = (w[argmax(bin_assign(2.0, &bins))], w[argmax(bin_assign(45.0, &bins))]);
    assert!(tall > short, "{w:?}");
}

#[test]
fn partition_shrinks_toward_the_gaussian() {
    let (z0, _) = adaptive_log_partition(0.5).unwrap();
    let (z1, _) = adaptive_log_partition(1.5).unwrap();
    let (z2, _) = adaptive_log_partition(2.0).unwrap();
    assert!(z0 > z1 && z1 > z2);
    assert!((z2 - (2.0 * std::f64::consts::PI).sqrt().ln()).abs() < 1e-4);
}

#[test]
fn summary_stats_on_a_known_pair() {
    let y = [10.0, 20.0, 30.0, 40.0];
    let yh = [12.0, 22.0, 32.0, 42.0];
    let rep = summary_stats(&y, &yh).unwrap();
    assert_eq!(rep.n, 4);
    assert!((rep.bias - 2.0).abs() < 1e-12);
    assert!((rep.rmse - 2.0).abs() < 1e-12);
    assert!((rep.r.unwrap() - 1.0).abs() < 1e-12);
    assert!(rep.sdsd.abs() < 1e-12 && rep.lcs.abs() < 1e-12);
}

#[test]
fn binned_report_splits_by_measured_height() {
    let y = [2.0, 7.0, 8.0, 48.0];
    let yh = [3.0, 7.0, 6.0, 40.0];
    let rows = binned_report(&y, &yh, &uniform_edges(5.0, 50.0)).unwrap();
    let filled: Vec<_> = rows.iter().filter(|r| r.n > 0).collect();
    assert_eq!(filled.len(), 3);
    assert_eq!(filled.iter().map(|r| r.n).sum::<usize>(), 4);
}

#[test]
fn blurring_the_output_raises_gsi() {
    let side = 48;
    let img = Tensor::new(&[side, side], (0..side * side).map(|i| ((i % side) as f64 * 0.9).sin() + ((i / side) as f64 * 0.6).cos()).collect()).unwrap();
    let reference = Tensor::new(&[side, side, 1], img.data().to_vec()).unwrap();
    let sharp = gsi(&img, &reference, &[0]).unwrap().unwrap().gsi;
    let soft = gsi(&gaussian_blur(&img, 2.0).unwrap(), &reference, &[0]).unwrap().unwrap().gsi;
    assert!((sharp - 1.0).abs() < 1e-9);
    assert!(soft > sharp);
}
