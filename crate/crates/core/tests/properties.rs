use fregan_core::data::{synth_dataset, unit_to_u8, u8_to_unit, DatasetKind, DatasetSpec, ImageSet};
use fregan_core::fregan::{fsc_apply, hfa_loss, FeatureTaps, TapScale, TapSource};
use fregan_core::spectral::{
    azimuthal_average, band_energy_stats, grayscale, power_spectrum_2d, power_spectrum_plane,
    spectrum_distance, SpectrumProfile,
};
use fregan_core::tensor::{Tape, Tensor};
use fregan_core::wavelet::{decompose, reconstruct, BandValues};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn even_tensor(seed: u64, n: usize, c: usize, h2: usize, w2: usize) -> Tensor {
    Tensor::rand_uniform([n, c, 2 * h2, 2 * w2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn bands_close(a: &BandValues, b: &BandValues, tol: f32) -> bool {
    a.as_array()
        .iter()
        .zip(b.as_array())
        .all(|(x, y)| x.max_abs_diff(y).unwrap() < tol)
}

fn taps_of(tape: &mut Tape, source: TapSource, t: &Tensor, trainable: bool) -> FeatureTaps {
    let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    let mut taps = FeatureTaps::new(source);
    taps.insert(tape, TapScale::S8, v).unwrap();
    taps
}

fn hfa_value(d: &Tensor, g: &Tensor) -> f32 {
    let mut tape = Tape::new();
    let dt = taps_of(&mut tape, TapSource::Discriminator, d, false);
    let gt = taps_of(&mut tape, TapSource::Generator, g, true);
    let l = hfa_loss(&mut tape, &dt, &gt).unwrap().total;
    tape.value(l).item().unwrap()
}

fn corpus(seed: u64, n: usize) -> ImageSet {
    synth_dataset(&DatasetSpec {
        kind: DatasetKind::GradientBlobs,
        n,
        size: 32,
        seed,
    })
    .unwrap()
}

fn profile(set: &ImageSet) -> SpectrumProfile {
    azimuthal_average(&power_spectrum_2d(set).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wavelet_round_trip_and_parseval(seed in any::<u64>(), n in 1usize..4, c in 1usize..5, h2 in 1usize..12, w2 in 1usize..12) {
        let x = even_tensor(seed, n, c, h2, w2);
        let bands = decompose(&x).unwrap();
        prop_assert!(reconstruct(&bands).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
        let e: f64 = bands.energies().iter().sum();
        prop_assert!((e - x.energy()).abs() <= 1e-4 * x.energy());
    }

    #[test]
    fn wave_pool_is_linear(seed in any::<u64>(), alpha in -1.0f32..1.0, beta in -1.0f32..1.0) {
        let x = even_tensor(seed, 2, 3, 4, 5);
        let y = even_tensor(seed.wrapping_add(1), 2, 3, 4, 5);
        let mix = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
        let (bx, by) = (decompose(&x).unwrap(), decompose(&y).unwrap());
        let comb = |a: &Tensor, b: &Tensor| a.zip_map(b, |p, q| alpha * p + beta * q).unwrap();
        let expected = BandValues {
            ll: comb(&bx.ll, &by.ll),
            lh: comb(&bx.lh, &by.lh),
            hl: comb(&bx.hl, &by.hl),
            hh: comb(&bx.hh, &by.hh),
        };
        prop_assert!(bands_close(&decompose(&mix).unwrap(), &expected, 1e-5));
    }

    #[test]
    fn fsc_doubles_any_feature(seed in any::<u64>(), c in 1usize..4, h2 in 1usize..6) {
        let x = even_tensor(seed, 2, c, h2, h2);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = fsc_apply(&mut tape, v).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&x.map(|a| 2.0 * a)).unwrap() < 1e-5);
    }

    #[test]
    fn hfa_is_nonnegative_symmetric_and_zero_on_equal_maps(seed in any::<u64>()) {
        let d = even_tensor(seed, 2, 3, 4, 4);
        let g = even_tensor(seed ^ 0x5555, 2, 3, 4, 4);
        let a = hfa_value(&d, &g);
        prop_assert!(a >= 0.0);
        prop_assert!((a - hfa_value(&g, &d)).abs() <= 1e-6);
        prop_assert_eq!(hfa_value(&d, &d), 0.0);
        // adding a per-2x2-block constant leaves the high-frequency part unchanged
        let mut shifted = d.clone();
        for n in 0..2 { for c in 0..3 { for y in 0..8 { for x in 0..8 {
            let bump = ((y / 2) * 4 + x / 2) as f32 * 0.125;
            shifted.set(n, c, y, x, d.at(n, c, y, x) + bump);
        }}}}
        prop_assert!(hfa_value(&d, &shifted) < 1e-6);
    }

    #[test]
    fn spectrum_distance_is_a_pseudo_metric(seed in any::<u64>()) {
        let a = profile(&corpus(seed, 3));
        let b = profile(&corpus(seed.wrapping_add(7), 3));
        let ab = spectrum_distance(&a, &b).unwrap();
        let ba = spectrum_distance(&b, &a).unwrap();
        prop_assert!(ab.distance >= 0.0);
        prop_assert_eq!(ab.distance, ba.distance);
        prop_assert_eq!(ab.high_freq_gap, ba.high_freq_gap);
        prop_assert_eq!(spectrum_distance(&a, &a).unwrap().distance, 0.0);
    }

    #[test]
    fn band_shares_sum_to_one(seed in any::<u64>(), n in 1usize..5) {
        let shares = band_energy_stats(&corpus(seed, n)).unwrap();
        prop_assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        prop_assert!(shares.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn spectrum_ignores_image_order(seed in any::<u64>()) {
        let set = corpus(seed, 5);
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = set.subset(&order).unwrap();
        let (a, b) = (profile(&set), profile(&shuffled));
        for (x, y) in a.mean.iter().zip(&b.mean) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn power_spectrum_obeys_parseval(seed in any::<u64>()) {
        let set = corpus(seed, 1);
        let plane = grayscale(set.tensor(), 0).unwrap();
        let power = power_spectrum_plane(&plane, 32).unwrap();
        let spatial: f64 = plane.iter().map(|v| v * v).sum();
        let spectral: f64 = power.iter().sum::<f64>() / (32.0 * 32.0);
        prop_assert!((spatial - spectral).abs() <= 1e-3 * spatial.max(1e-12));
    }

    #[test]
    fn synthetic_pixels_are_in_range_and_deterministic(seed in any::<u64>(), kind in 0usize..3) {
        let kind = [
            DatasetKind::SinusoidMix { frequency: None },
            DatasetKind::Checkerboard { tile: None },
            DatasetKind::GradientBlobs,
        ][kind].clone();
        let spec = DatasetSpec { kind, n: 3, size: 32, seed };
        let a = synth_dataset(&spec).unwrap();
        prop_assert!(a.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(a.tensor().data().iter().all(|&v| (u8_to_unit(unit_to_u8(v)) - v).abs() <= 1.0 / 255.0 + 1e-6));
        prop_assert_eq!(a, synth_dataset(&spec).unwrap());
    }
}
