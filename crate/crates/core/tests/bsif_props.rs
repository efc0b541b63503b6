use mvpad_core::bsif::{bsif_transform, filter_response, BorderMode};
use mvpad_core::{FilterBank, GrayImage};
use proptest::prelude::*;

/// Straight double loop with explicit modular indexing.
fn brute_codes(img: &GrayImage, bank: &FilterBank) -> Vec<u16> {
    let (w, h, l) = (img.width(), img.height(), bank.side());
    let mut out = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            let mut code = 0u16;
            for k in 0..bank.depth() {
                let kern = bank.kernel(k);
                let mut s = 0.0;
                for u in 0..l {
                    for v in 0..l {
                        s += kern[u * l + v] * img.get((j + v) % w, (i + u) % h);
                    }
                }
                if s >= 0.0 {
                    code |= 1 << k;
                }
            }
            out.push(code);
        }
    }
    out
}

fn image(w: usize, h: usize, px: Vec<f64>) -> GrayImage {
    GrayImage::new(w, h, px).unwrap()
}

fn instance() -> impl Strategy<Value = (GrayImage, FilterBank)> {
    (prop_oneof![Just(3usize), Just(5usize)], 5usize..=6)
        .prop_flat_map(|(l, n)| (Just(l), Just(n), l..=16usize, l..=16usize))
        .prop_flat_map(|(l, n, w, h)| {
            (
                proptest::collection::vec(0.0f64..=1.0, w * h).prop_map(move |px| image(w, h, px)),
                proptest::collection::vec(-1.0f64..1.0, n * l * l).prop_map(move |c| FilterBank::new(l, n, c).unwrap()),
            )
        })
}

/// Integer kernels whose taps sum to exactly zero.
fn zero_sum_bank(l: usize, n: usize, raw: &[i32]) -> FilterBank {
    let mut c = Vec::with_capacity(n * l * l);
    for k in 0..n {
        let taps = &raw[k * l * l..(k + 1) * l * l];
        let sum: i32 = taps[..l * l - 1].iter().sum();
        c.extend(taps[..l * l - 1].iter().map(|&t| t as f64));
        c.push(-(sum as f64));
    }
    FilterBank::new(l, n, c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn transform_matches_brute_force((img, bank) in instance()) {
        let got = bsif_transform(&img, &bank).unwrap();
        prop_assert_eq!((got.width, got.height), (img.width(), img.height()));
        prop_assert!(got.codes.iter().all(|&c| (c as usize) < (1 << bank.depth())));
        prop_assert_eq!(got.codes, brute_codes(&img, &bank));
    }
}

proptest! {
    #[test]
    fn response_is_linear(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        p in proptest::collection::vec(0.0f64..=1.0, 64),
        q in proptest::collection::vec(0.0f64..=1.0, 64),
        kern in proptest::collection::vec(-1.0f64..1.0, 9),
    ) {
        // Pixels must stay in [0,1], so the mix is scaled and offset by 0.5;
        // the zero-sum kernel removes the offset.
        let k_mean = kern.iter().sum::<f64>() / 9.0;
        let kern: Vec<f64> = kern.iter().map(|v| v - k_mean).collect();
        let scale = 1.0 / (2.0 * (a.abs() + b.abs() + 1.0));
        let mass: f64 = kern.iter().map(|v| v.abs()).sum();
        let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 + scale * (a * x + b * y)).collect();
        let rp = filter_response(&image(8, 8, p), &kern, BorderMode::Wrap).unwrap();
        let rq = filter_response(&image(8, 8, q), &kern, BorderMode::Wrap).unwrap();
        let rm = filter_response(&image(8, 8, mix), &kern, BorderMode::Wrap).unwrap();
        for ((m, x), y) in rm.iter().zip(&rp).zip(&rq) {
            let want = scale * (a * x + b * y);
            // relative to the magnitude of the summed terms
            let tol = 1e-9 * scale * (a.abs() + b.abs() + 1.0) * mass;
            prop_assert!((m - want).abs() <= tol, "{m} vs {want}");
        }
    }

    #[test]
    fn constant_shift_keeps_codes(
        l in prop_oneof![Just(3usize), Just(5usize)],
        n in 5usize..=8,
        raw in proptest::collection::vec(-8i32..=8, 8 * 25),
        px in proptest::collection::vec(0u32..=32, 100),
        shift in 0u32..=32,
    ) {
        let n = if l == 3 { n.min(8) } else { n };
        let bank = zero_sum_bank(l, n, &raw);
        // dyadic pixels keep every sum exact
        let base = image(10, 10, px.iter().map(|&v| v as f64 / 64.0).collect());
        let shifted = image(10, 10, px.iter().map(|&v| (v + shift) as f64 / 64.0).collect());
        prop_assert_eq!(bsif_transform(&base, &bank).unwrap().codes, bsif_transform(&shifted, &bank).unwrap().codes);
    }
}

#[test]
fn scaling_by_two_and_a_half() {
    let px: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 160.0).collect();
    let kern: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 7.0).collect();
    let r1 = filter_response(&image(8, 8, px.clone()), &kern, BorderMode::Wrap).unwrap();
    let r2 = filter_response(&image(8, 8, px.iter().map(|v| 2.5 * v).collect()), &kern, BorderMode::Wrap).unwrap();
    for (a, b) in r1.iter().zip(&r2) {
        assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn ramp_with_wrap_matches_modular_loop() {
    let img = image(4, 4, (0..16).map(|i| i as f64 / 15.0).collect());
    let kern = [1.0, -2.0, 0.5, 0.0, 3.0, -1.0, 0.25, 0.0, -1.5];
    let got = filter_response(&img, &kern, BorderMode::Wrap).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for u in 0..3 {
                for v in 0..3 {
                    s += kern[u * 3 + v] * ((((i + u) % 4) * 4 + (j + v) % 4) as f64 / 15.0);
                }
            }
            assert_eq!(got[i * 4 + j], s);
        }
    }
}

#[test]
fn constant_image_saturates_codes() {
    let bank = zero_sum_bank(5, 7, &(0..175).map(|i| (i * 7 % 11) - 5).collect::<Vec<_>>());
    let img = GrayImage::constant(9, 9, 0.375).unwrap();
    let codes = bsif_transform(&img, &bank).unwrap().codes;
    assert!(codes.iter().all(|&c| c == 127));
}

#[test]
fn negated_bank_flips_nonzero_bits() {
    let px: Vec<f64> = (0..64).map(|i| ((i * 29 + 3) % 61) as f64 / 60.0).collect();
    let img = image(8, 8, px);
    let coeffs: Vec<f64> = (0..45).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect();
    let bank = FilterBank::new(3, 5, coeffs).unwrap();
    let a = bsif_transform(&img, &bank).unwrap().codes;
    let b = bsif_transform(&img, &bank.negated()).unwrap().codes;
    for k in 0..5 {
        let s = filter_response(&img, bank.kernel(k), BorderMode::Wrap).unwrap();
        for p in 0..64 {
            if s[p] != 0.0 {
                assert_ne!(a[p] >> k & 1, b[p] >> k & 1);
            }
        }
    }
}
