use monet::dataset::{build_dataset, DatasetSpec};
use monet::image::AmplitudeImage;
use monet::speckle::{parse_recipe, sample_speckle, scatterer_positions, simulate_pair, synth_texture, Texture};
use monet::stats::{
    ga0_cdf, ga0_pdf, ka_cdf, ka_pdf, ks_statistic, rayleigh_cdf, sample_ga0, sample_ka, sqrt_gamma_cdf,
    sqrt_gamma_pdf, FreryParams,
};
use proptest::prelude::*;

/// Adaptive Simpson on [a, b].
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rule(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn go(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = rule(fa, flm, fm, a, m);
        let right = rule(fm, frm, fb, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        go(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + go(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    go(f, a, b, fa, fm, fb, rule(fa, fm, fb, a, b), tol, 50)
}

/// ∫₀^∞ f via z = t/(1−t), split into pieces so narrow peaks are resolved.
fn integrate_half_line(f: impl Fn(f64) -> f64) -> f64 {
    let g = |t: f64| {
        if t >= 1.0 {
            return 0.0;
        }
        let z = t / (1.0 - t);
        f(z) / ((1.0 - t) * (1.0 - t))
    };
    let knots = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0];
    knots.windows(2).map(|w| simpson(&g, w[0], w[1], 1e-12)).sum()
}

fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    simpson(&f, a, b, 1e-12)
}

fn ka() -> FreryParams {
    FreryParams::ka(2.0, 7.5, 1).unwrap()
}

fn ga0() -> FreryParams {
    FreryParams::ga0(-0.5, 0.145, 1).unwrap()
}

#[test]
fn speckle_pdf_integrates_to_one() {
    for looks in [1, 2, 4] {
        let total = integrate_half_line(|n| sqrt_gamma_pdf(n, looks).unwrap());
        assert!((total - 1.0).abs() < 1e-6, "L={looks}: {total}");
    }
}

#[test]
fn frery_pdfs_integrate_to_one() {
    let k = integrate_half_line(|z| ka_pdf(z, &ka()).unwrap());
    assert!((k - 1.0).abs() < 1e-5, "K_A: {k}");
    let g = integrate_half_line(|z| ga0_pdf(z, &ga0()).unwrap());
    assert!((g - 1.0).abs() < 1e-5, "G_A0: {g}");
    assert_eq!(ka_pdf(0.0, &ka()).unwrap(), 0.0);
}

#[test]
fn cdfs_agree_with_integrated_pdfs() {
    for z in [0.05, 0.3, 0.8, 1.5, 3.0] {
        for looks in [1, 3] {
            let num = integrate(|n| sqrt_gamma_pdf(n, looks).unwrap(), 0.0, z);
            assert!((num - sqrt_gamma_cdf(z, looks).unwrap()).abs() < 1e-8, "sqrt-gamma L={looks} z={z}");
        }
        let num = integrate(|n| ka_pdf(n, &ka()).unwrap(), 0.0, z);
        assert!((num - ka_cdf(z, &ka()).unwrap()).abs() < 1e-7, "K_A z={z}");
        let num = integrate(|n| ga0_pdf(n, &ga0()).unwrap(), 0.0, z);
        assert!((num - ga0_cdf(z, &ga0()).unwrap()).abs() < 1e-7, "G_A0 z={z}");
        assert!((rayleigh_cdf(z).unwrap() - sqrt_gamma_cdf(z, 1).unwrap()).abs() < 1e-14);
    }
}

#[test]
fn rayleigh_cdf_is_monotone_with_correct_limits() {
    assert_eq!(rayleigh_cdf(0.0).unwrap(), 0.0);
    assert!((rayleigh_cdf(1.0).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    assert!(rayleigh_cdf(3.0).unwrap() > 0.9998);
    assert!(rayleigh_cdf(-0.1).is_err());
    let grid: Vec<f64> = (0..400).map(|i| rayleigh_cdf(i as f64 * 0.01).unwrap()).collect();
    assert!(grid.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn frery_samplers_match_their_cdfs() {
    let k = sample_ka(1_000_000, &ka(), 21).unwrap();
    let d = ks_statistic(&k, |z| ka_cdf(z, &ka()).unwrap()).unwrap();
    assert!(d < 0.003, "K_A sampler KS {d}");
    let g = sample_ga0(1_000_000, &ga0(), 22).unwrap();
    let d = ks_statistic(&g, |z| ga0_cdf(z, &ga0()).unwrap()).unwrap();
    assert!(d < 0.003, "G_A0 sampler KS {d}");
}

#[test]
fn single_look_speckle_power_and_shape() {
    let field = sample_speckle(1000, 1000, 1, 7).unwrap();
    let power = field.values().iter().map(|n| n * n).sum::<f64>() / 1e6;
    assert!((0.995..=1.005).contains(&power), "mean N² = {power}");
    let d = ks_statistic(field.values(), |n| rayleigh_cdf(n).unwrap()).unwrap();
    assert!(d < 0.002, "KS vs Rayleigh {d}");
}

#[test]
fn multilook_speckle_has_unit_power_within_three_sigma() {
    for looks in [1u32, 2, 4] {
        let field = sample_speckle(1000, 1000, looks, 100 + looks as u64).unwrap();
        let power = field.values().iter().map(|n| n * n).sum::<f64>() / 1e6;
        let sigma = (1.0 / looks as f64 / 1e6).sqrt();
        assert!((power - 1.0).abs() < 3.0 * sigma, "L={looks}: {power} (σ={sigma})");
    }
}

#[test]
fn constant_scene_power_scales_with_reflectivity() {
    let clean = AmplitudeImage::filled(1000, 1000, 0.5).unwrap();
    let noisy = simulate_pair(&clean, 1, 8).unwrap().noisy;
    let p = noisy.pixels().iter().map(|y| y * y).sum::<f64>() / 1e6;
    assert!((p / 0.25 - 1.0).abs() < 0.01, "{p}");
}

#[test]
fn recipe_patches_match_analytic_means() {
    let recipe = parse_recipe("constant+gradient+gamma-texture").unwrap();
    let mut spec = DatasetSpec::synthetic(recipe.clone(), 3 * 4, 128, 5);
    spec.patch_size = 32;
    spec.stride = 32;
    let ds = build_dataset(&spec).unwrap();
    for kind in &recipe {
        let patches: Vec<_> = ds.train.iter().chain(&ds.val).filter(|p| p.source.contains(kind.name())).collect();
        let mean = patches.iter().map(|p| p.clean.mean()).sum::<f64>() / patches.len() as f64;
        let expected = kind.expected_mean().unwrap();
        assert!((mean - expected).abs() < 0.02, "{}: {mean} vs {expected}", kind.name());
    }
}

#[test]
fn planted_scatterer_count_is_poisson() {
    let kind = Texture::PointScatterers { background: 0.15, contrast: 5.0, density: 1e-3 };
    for seed in 0..4 {
        let img = synth_texture(&kind, 512, 512, seed).unwrap();
        let count = scatterer_positions(&img, 0.15).len() as f64;
        let lambda = 1e-3 * 512.0 * 512.0;
        assert!((count - lambda).abs() < 4.0 * lambda.sqrt(), "seed {seed}: {count} vs {lambda}");
        for &(r, c) in &scatterer_positions(&img, 0.15) {
            assert!(img.get(r, c) >= 5.0 * 0.15 - 1e-12);
        }
    }
}

#[test]
fn datasets_are_byte_reproducible() {
    let spec = DatasetSpec {
        patch_size: 16,
        stride: 8,
        ..DatasetSpec::synthetic(parse_recipe("mosaic+checkerboard").unwrap(), 2, 48, 77)
    };
    assert_eq!(build_dataset(&spec).unwrap(), build_dataset(&spec).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ks_is_invariant_under_monotone_maps(seed in 0u64..1000, n in 5usize..400) {
        let field = sample_speckle(1, n, 1, seed).unwrap();
        let xs = field.values();
        let d = ks_statistic(xs, |v| rayleigh_cdf(v).unwrap()).unwrap();
        // v ↦ v³ + v is strictly increasing on [0, ∞)
        let ys: Vec<f64> = xs.iter().map(|v| v * v * v + v).collect();
        let inverse = |y: f64| {
            let (mut lo, mut hi) = (0.0f64, y.max(1.0));
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid * mid * mid + mid < y { lo = mid } else { hi = mid }
            }
            0.5 * (lo + hi)
        };
        let d2 = ks_statistic(&ys, |y| rayleigh_cdf(inverse(y)).unwrap()).unwrap();
        prop_assert!((d - d2).abs() < 1e-9, "{} vs {}", d, d2);
    }

    #[test]
    fn simulation_is_exactly_multiplicative(seed in 0u64..1000, h in 1usize..24, w in 1usize..24, looks in 1u32..5) {
        let clean = synth_texture(&Texture::Mosaic { shapes: 4 }, h, w, seed).unwrap();
        let pair = simulate_pair(&clean, looks, seed ^ 0xabc).unwrap();
        for ((x, n), y) in clean.pixels().iter().zip(pair.speckle.values()).zip(pair.noisy.pixels()) {
            prop_assert_eq!(*y, x * n);
            prop_assert!(*n >= 0.0);
        }
    }

    #[test]
    fn speckle_is_seed_deterministic(seed in any::<u64>(), looks in 1u32..8) {
        let a = sample_speckle(4, 5, looks, seed).unwrap();
        let b = sample_speckle(4, 5, looks, seed).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }
}
