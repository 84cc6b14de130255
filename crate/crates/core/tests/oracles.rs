//! Value oracles for the loss terms, the no-reference metrics and the
//! detection tests.

use monet::detect::{combine_eh_mask, ks_patch_map, touzi_edge_map, validate_populations, Combine, DetectConfig, EHMask};
use monet::image::AmplitudeImage;
use monet::loss::{grad_loss, kl_loss, l2_loss, total_loss, KlPooling, LossWeights, Variant};
use monet::metrics::{delta_h, dkl_ratio, enl, RatioImage, Rect, Roi};
use monet::nn::Tensor4;
use monet::speckle::{sample_speckle, simulate_pair, synth_texture, Texture};
use monet::stats::{sample_ga0, sample_ka, FreryParams, RayleighRef};
use proptest::prelude::*;

fn tensor(img: &AmplitudeImage) -> Tensor4<f64> {
    Tensor4::from_images(&[img]).unwrap()
}

fn textured_pair(side: usize, seed: u64) -> (Tensor4<f64>, Tensor4<f64>) {
    let clean = synth_texture(&Texture::Mosaic { shapes: 10 }, side, side, seed).unwrap();
    let noisy = simulate_pair(&clean, 1, seed + 1).unwrap().noisy;
    (tensor(&clean), tensor(&noisy))
}

#[test]
fn kl_of_true_speckle_is_small() {
    let clean = AmplitudeImage::filled(256, 256, 0.6).unwrap();
    let pair = simulate_pair(&clean, 1, 3).unwrap();
    let (x, y) = (tensor(&clean), tensor(&pair.noisy));
    let (v, _) = kl_loss(&x, &y, &RayleighRef::default(), 256, KlPooling::Batch).unwrap();
    assert!(v < 0.01, "{v}");
}

#[test]
fn identity_filter_has_larger_kl_than_the_truth() {
    let (x, y) = textured_pair(128, 4);
    let r = RayleighRef::default();
    let (truth, _) = kl_loss(&x, &y, &r, 256, KlPooling::Batch).unwrap();
    let (ident, _) = kl_loss(&y, &y, &r, 256, KlPooling::Batch).unwrap();
    assert!(ident > truth, "{ident} <= {truth}");
}

#[test]
fn l2_constant_offset() {
    let (x, _) = textured_pair(16, 5);
    let (v, _) = l2_loss(&x.map(|p| p + 0.1), &x).unwrap();
    assert!((v - 0.01).abs() < 1e-15);
}

#[test]
fn total_loss_is_the_weighted_sum_of_its_terms() {
    let (x, y) = textured_pair(32, 6);
    let xhat = x.map(|v| 0.8 * v + 0.05);
    let w = LossWeights {
        lambda_kl: 1e4,
        lambda_grad: 1.0,
        ..LossWeights::default()
    };
    let (b, g) = total_loss(&xhat, &x, &y, &w).unwrap();
    let (l2, g2) = l2_loss(&xhat, &x).unwrap();
    let (kl, gk) = kl_loss(&xhat, &y, &RayleighRef::default(), w.bins, w.pooling).unwrap();
    let (gr, gg) = grad_loss(&xhat, &x).unwrap();
    let expect = l2 + 1e4 * kl + gr;
    assert!((b.total - expect).abs() <= 1e-12 * expect.abs());
    assert_eq!((b.l2, b.kl, b.grad), (l2, kl, gr));
    for i in 0..g.len() {
        let e = g2.data()[i] + 1e4 * gk.data()[i] + gg.data()[i];
        assert!((g.data()[i] - e).abs() <= 1e-12 * e.abs().max(1e-9));
    }
}

#[test]
fn disabled_terms_leave_no_trace() {
    let (x, y) = textured_pair(24, 7);
    let xhat = x.map(|v| 0.9 * v);
    let w = LossWeights::default();
    let (b, g) = total_loss(&xhat, &x, &y, &w.with_variant(Variant::L2Grad)).unwrap();
    let (l2, g2) = l2_loss(&xhat, &x).unwrap();
    let (gr, gg) = grad_loss(&xhat, &x).unwrap();
    assert_eq!(b.kl, 0.0);
    assert_eq!(b.total, l2 + w.lambda_grad * gr);
    let manual: Vec<f64> = g2.data().iter().zip(gg.data()).map(|(a, b)| a + w.lambda_grad * b).collect();
    assert_eq!(g.data(), manual.as_slice());
    let (b, g) = total_loss(&xhat, &x, &y, &w.with_variant(Variant::L2)).unwrap();
    assert_eq!((b.total, g.data()), (l2, g2.data()));
}

#[test]
fn delta_h_vanishes_on_iid_ratio() {
    let field = sample_speckle(316, 316, 1, 11).unwrap();
    let ratio = RatioImage::from_image(field.to_image());
    let d = delta_h(&ratio, 8, 12).unwrap();
    assert!(d < 0.01, "{d}");
}

#[test]
fn delta_h_detects_structure() {
    let (x, _) = textured_pair(128, 13);
    let structured = RatioImage::from_image(x.to_images().unwrap().remove(0));
    assert!(delta_h(&structured, 8, 1).unwrap() > 0.05);
}

#[test]
fn dkl_vanishes_on_rayleigh_ratio() {
    let field = sample_speckle(1000, 1000, 1, 14).unwrap();
    let d = dkl_ratio(&RatioImage::from_image(field.to_image())).unwrap();
    assert!(d < 0.005, "{d}");
}

/// Delta-method standard deviation of the ENL estimator on n i.i.d.
/// Gamma(L, 1/L) intensities: Var ≈ (2L² + 2L) / n.
fn enl_sigma(looks: f64, n: f64) -> f64 {
    ((2.0 * looks * looks + 2.0 * looks) / n).sqrt()
}

#[test]
fn enl_recovers_the_number_of_looks() {
    for looks in [1u32, 2, 4] {
        let field = sample_speckle(256, 256, looks, 20 + looks as u64).unwrap();
        let img = field.to_image();
        let roi = Roi::new(vec![Rect { row: 0, col: 0, height: 256, width: 256 }], img.dims()).unwrap();
        let e = enl(&img, &roi).unwrap();
        let l = looks as f64;
        let sigma = enl_sigma(l, 65536.0);
        assert!((e - l).abs() < 3.0 * sigma, "L={looks}: {e} (3σ = {})", 3.0 * sigma);
    }
}

#[test]
fn enl_sigma_matches_monte_carlo() {
    // the oracle's own spread, checked against 200 independent estimates
    let (looks, side) = (2u32, 64usize);
    let estimates: Vec<f64> = (0..200)
        .map(|s| {
            let img = sample_speckle(side, side, looks, 1000 + s).unwrap().to_image();
            let roi = Roi::new(vec![Rect { row: 0, col: 0, height: side, width: side }], img.dims()).unwrap();
            enl(&img, &roi).unwrap()
        })
        .collect();
    let m = estimates.iter().sum::<f64>() / 200.0;
    let sd = (estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 199.0).sqrt();
    let predicted = enl_sigma(2.0, (side * side) as f64);
    assert!((sd / predicted - 1.0).abs() < 0.25, "MC sd {sd} vs {predicted}");
}

fn rayleigh_ratio(side: usize, seed: u64) -> RatioImage {
    RatioImage::from_image(sample_speckle(side, side, 1, seed).unwrap().to_image())
}

#[test]
fn ks_test_has_nominal_size() {
    // 10⁴ patches of 16×16
    let ratio = rayleigh_ratio(1600, 31);
    let map = ks_patch_map(&ratio, 16, 0.01).unwrap();
    assert_eq!(map.rows * map.cols, 10_000);
    let rate = map.rejection_rate();
    assert!((0.005..=0.02).contains(&rate), "{rate}");
}

#[test]
fn ks_test_has_power_against_extreme_heterogeneity() {
    let p = FreryParams::ga0(-0.5, 0.145, 1).unwrap();
    let mut s = sample_ga0(400 * 400, &p, 32).unwrap();
    // match the Rayleigh median so only the shape differs
    let mut sorted = s.clone();
    sorted.sort_by(f64::total_cmp);
    let k = 2f64.ln().sqrt() / sorted[sorted.len() / 2];
    s.iter_mut().for_each(|v| *v *= k);
    let ratio = RatioImage::from_image(AmplitudeImage::new(400, 400, s).unwrap());
    let rate = ks_patch_map(&ratio, 16, 0.01).unwrap().rejection_rate();
    assert!(rate > 0.9, "{rate}");
}

#[test]
fn both_maps_empty_gives_empty_mask() {
    let ratio = RatioImage::from_image(AmplitudeImage::filled(32, 32, 0.9).unwrap());
    let edge = touzi_edge_map(&ratio, 7, 1.5).unwrap();
    let mut ks = ks_patch_map(&ratio, 16, 0.01).unwrap();
    ks.reject.iter_mut().for_each(|r| *r = false);
    for combine in [Combine::And, Combine::Or] {
        let cfg = DetectConfig { combine, ..DetectConfig::default() };
        assert_eq!(combine_eh_mask(&edge, &ks, &cfg).unwrap().count(), 0);
    }
}

#[test]
fn planted_populations_are_told_apart() {
    let (h, w) = (128, 128);
    let ga0 = FreryParams::ga0(-0.5, 0.145, 1).unwrap();
    let ka = FreryParams::ka(2.0, 7.5, 1).unwrap();
    let eh = sample_ga0(h * w, &ga0, 40).unwrap();
    let het = sample_ka(h * w, &ka, 41).unwrap();
    let flags: Vec<bool> = (0..h * w).map(|i| (i / w) < 32).collect();
    let px = flags.iter().enumerate().map(|(i, &f)| if f { eh[i] } else { het[i] }).collect();
    let sar = AmplitudeImage::new(h, w, px).unwrap();
    let mask = EHMask { height: h, width: w, provenance: flags.iter().map(|&f| if f { 3 } else { 0 }).collect(), flags };
    let report = validate_populations(&sar, &mask, &ga0, &ka).unwrap();
    assert!(!report.inconclusive);
    let (e, r) = (report.eh.unwrap(), report.h.unwrap());
    assert!(e.ks_ga0 < e.ks_ka, "{} vs {}", e.ks_ga0, e.ks_ka);
    assert!(r.ks_ka < r.ks_ga0, "{} vs {}", r.ks_ka, r.ks_ga0);
    for pop in [&e, &r] {
        for col in 0..3 {
            let area: f64 = pop.curves.iter().map(|c| [c.1, c.2, c.3][col]).sum::<f64>() * pop.bin_width;
            assert!((area - 1.0).abs() < 1e-9, "column {col}: {area}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn touzi_flags_shrink_as_threshold_grows(seed in 0u64..500, t1 in 1.01f64..3.0, dt in 0.0f64..2.0) {
        let ratio = rayleigh_ratio(24, seed);
        let lo = touzi_edge_map(&ratio, 7, t1).unwrap();
        let hi = touzi_edge_map(&ratio, 7, t1 + dt).unwrap();
        prop_assert!(lo.response.iter().all(|&r| r >= 1.0));
        for (a, b) in lo.flags.iter().zip(&hi.flags) {
            prop_assert!(!*b || *a);
        }
    }

    #[test]
    fn touzi_response_is_scale_invariant(seed in 0u64..500, k in 0.01f64..100.0) {
        let ratio = rayleigh_ratio(16, seed);
        let scaled = RatioImage::from_image(
            AmplitudeImage::new(16, 16, ratio.pixels().iter().map(|v| v * k).collect()).unwrap(),
        );
        let a = touzi_edge_map(&ratio, 5, 1.5).unwrap();
        let b = touzi_edge_map(&scaled, 5, 1.5).unwrap();
        for (x, y) in a.response.iter().zip(&b.response) {
            prop_assert!((x - y).abs() <= 1e-9 * x);
        }
    }

    #[test]
    fn and_mask_implies_both_bits(seed in 0u64..500, threshold in 1.1f64..2.0) {
        let ratio = rayleigh_ratio(32, seed);
        let cfg = DetectConfig { edge_threshold: threshold, ks_alpha: 0.2, ..DetectConfig::default() };
        let edge = touzi_edge_map(&ratio, cfg.edge_window, cfg.edge_threshold).unwrap();
        let ks = ks_patch_map(&ratio, cfg.ks_patch, cfg.ks_alpha).unwrap();
        let mask = combine_eh_mask(&edge, &ks, &cfg).unwrap();
        for (f, p) in mask.flags.iter().zip(&mask.provenance) {
            prop_assert_eq!(*f, *p == 3);
        }
    }
}
