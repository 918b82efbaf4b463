use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// e4m3fn value of a byte from the bit fields alone, in f64.
fn e4m3_reference(b: u8) -> Option<f64> {
    let s = if b >> 7 == 1 { -1.0 } else { 1.0 };
    let e = ((b >> 3) & 15) as i32;
    let m = (b & 7) as f64;
    match (e, b & 7) {
        (15, 7) => None,
        (0, _) => Some(s * m * 2f64.powi(-9)),
        _ => Some(s * (8.0 + m) * 2f64.powi(e - 10)),
    }
}

#[test]
fn codebook_invariants() {
    assert_eq!(NF4_CODEBOOK[0], -1.0);
    assert_eq!(NF4_CODEBOOK[15], 1.0);
    assert_eq!(NF4_CODEBOOK[NF4_ZERO_INDEX as usize], 0.0);
    assert!(NF4_CODEBOOK.windows(2).all(|w| w[0] < w[1]));
    // the widest gap sits at the negative end
    assert!((nf4_max_gap() - (1.0 - 0.696_192_8)).abs() < 1e-7);
}

#[test]
fn fp8_exhaustive() {
    for b in 0..=255u8 {
        match e4m3_reference(b) {
            None => assert!(fp8_decode(b).is_nan(), "{b:#04x}"),
            Some(v) => {
                assert_eq!(fp8_decode(b) as f64, v, "{b:#04x}");
                assert_eq!(fp8_encode(fp8_decode(b)), b, "{b:#04x}");
            }
        }
    }
    assert_eq!(fp8_encode(1.0), 0x38);
    assert_eq!(fp8_encode(448.0), 0x7e);
    assert_eq!(fp8_decode(0x7e), 448.0);
    assert_eq!(fp8_encode(0.0), 0x00);
    assert_eq!(fp8_encode(f32::NAN), FP8_NAN);
    assert_eq!(fp8_encode(1e6), 0x7e);
    assert_eq!(fp8_encode(f32::INFINITY), 0x7e);
    assert_eq!(fp8_encode(-1e6), 0xfe);
}

#[test]
fn fp8_rounds_to_nearest_even() {
    // midpoints between consecutive positive codes go to the even code
    for b in 0..126u8 {
        let (lo, hi) = (e4m3_reference(b).unwrap(), e4m3_reference(b + 1).unwrap());
        let mid = ((lo + hi) / 2.0) as f32;
        if mid as f64 != (lo + hi) / 2.0 {
            continue;
        }
        let want = if b % 2 == 0 { b } else { b + 1 };
        assert_eq!(fp8_encode(mid), want, "midpoint of {b:#04x}");
        let below = f32::from_bits(mid.to_bits() - 1);
        let above = f32::from_bits(mid.to_bits() + 1);
        assert_eq!(fp8_encode(below), b);
        assert_eq!(fp8_encode(above), b + 1);
    }
}

proptest! {
    #[test]
    fn fp8_encode_is_nearest(x in 0f32..460.0) {
        let b = fp8_encode(x);
        let got = (fp8_decode(b) as f64 - x as f64).abs();
        for c in 0..127u8 {
            prop_assert!(got <= (fp8_decode(c) as f64 - x as f64).abs());
        }
    }

    #[test]
    fn nf4_index_is_monotone(a in -1.2f32..1.2, b in -1.2f32..1.2) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(nf4_index(lo) <= nf4_index(hi));
    }
}

#[test]
fn nf4_ties_go_low() {
    for k in 0..15 {
        let mid = (NF4_CODEBOOK[k] + NF4_CODEBOOK[k + 1]) / 2.0;
        let i = nf4_index(mid) as usize;
        let (dl, dh) = ((mid - NF4_CODEBOOK[k]).abs(), (NF4_CODEBOOK[k + 1] - mid).abs());
        if dl == dh {
            assert_eq!(i, k);
        } else {
            assert_eq!(i, if dl < dh { k } else { k + 1 });
        }
    }
}

#[test]
fn zero_matrix_maps_to_zero_level() {
    let q = nf4_quantize(&Matrix::zeros(3, 5), QuantOptions::default()).unwrap();
    assert!(q.indices().iter().all(|&k| k == NF4_ZERO_INDEX));
    assert!(q.scales.iter().all(|&s| fp8_decode(s) == 0.0));
    assert_eq!(nf4_dequantize(&q).unwrap(), Matrix::zeros(3, 5));
}

#[test]
fn single_positive_row_maps_to_top_level() {
    let h = Matrix::from_vec(1, 4, vec![0.3, 1.7, 5.0, 0.01]).unwrap();
    let q = nf4_quantize(&h, QuantOptions::default()).unwrap();
    assert_eq!(q.indices(), vec![15; 4]);
    for j in 0..4 {
        assert_eq!(q.scales[j], fp8_encode(h.get(0, j)));
    }
}

#[test]
fn packing_layout() {
    let q = QuantizedLatent::from_indices(1, 3, &[1, 2, 3], vec![0x38; 3], DEFAULT_EPS).unwrap();
    assert_eq!(q.packed, vec![0x21, 0x03]);
    assert_eq!(q.storage_bytes(), 2 + 3);
    assert!(QuantizedLatent::from_indices(1, 3, &[1, 2, 16], vec![0x38; 3], DEFAULT_EPS).is_err());
    let mut bad = q.clone();
    bad.packed[1] = 0x13;
    assert!(nf4_dequantize(&bad).is_err());
    bad = q.clone();
    bad.scales[0] = 0x7f;
    assert!(nf4_dequantize(&bad).is_err());
    bad = q;
    bad.packed.pop();
    assert!(nf4_dequantize(&bad).is_err());
}

#[test]
fn all_zero_level_gives_zero_matrix() {
    let q = QuantizedLatent::from_indices(2, 2, &[7; 4], vec![0x38, 0x50], DEFAULT_EPS).unwrap();
    assert_eq!(nf4_dequantize(&q).unwrap(), Matrix::zeros(2, 2));
}

#[test]
fn lattice_matrices_round_trip_exactly() {
    let scales = [0.5f32, 2.0, 0.125, 3.5];
    let h = Matrix::from_fn(16, 4, |i, j| scales[j] * NF4_CODEBOOK[i]);
    let q = nf4_quantize(&h, QuantOptions::default()).unwrap();
    assert_eq!(nf4_dequantize(&q).unwrap(), h);
}

#[test]
fn error_bound_and_idempotence_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let half_gap = nf4_max_gap() as f64 / 2.0;
    let fp8_half_ulp = 2f64.powi(-4);
    for _ in 0..10_000 {
        let h = Matrix::randn(4, 8, 1.0, &mut rng);
        let q = nf4_quantize(&h, QuantOptions::default()).unwrap();
        let d = nf4_dequantize(&q).unwrap();
        for j in 0..8 {
            let s = (0..4).map(|i| h.get(i, j).abs()).fold(0.0, f32::max) as f64;
            let bound = s * half_gap * (1.0 + fp8_half_ulp);
            for i in 0..4 {
                let err = (d.get(i, j) as f64 - h.get(i, j) as f64).abs();
                assert!(err <= bound * (1.0 + 1e-6), "err {err} > bound {bound}");
            }
        }
        let q2 = nf4_quantize(&d, QuantOptions::default()).unwrap();
        assert_eq!(q2.indices(), q.indices());
        assert_eq!(q2.scales, q.scales);
    }
}

#[test]
fn column_below_fp8_resolution_stores_zero_level() {
    // absmax under half the smallest subnormal rounds the scale to zero
    let h = Matrix::from_vec(2, 2, vec![1e-4, 1.0, -5e-4, 0.5]).unwrap();
    let q = nf4_quantize(&h, QuantOptions::default()).unwrap();
    assert_eq!(fp8_decode(q.scales[0]), 0.0);
    assert_eq!(q.index(0, 0), NF4_ZERO_INDEX);
    assert_eq!(q.index(1, 0), NF4_ZERO_INDEX);
    let d = nf4_dequantize(&q).unwrap();
    assert_eq!(nf4_quantize(&d, QuantOptions::default()).unwrap(), q);
}

#[test]
fn unscaled_variant_uses_unit_scales() {
    let h = Matrix::from_vec(1, 3, vec![5.0, -0.3, 0.02]).unwrap();
    let q = nf4_quantize(&h, QuantOptions { scaling: false, ..QuantOptions::default() }).unwrap();
    assert!(q.scales.iter().all(|&s| fp8_decode(s) == 1.0));
    let d = nf4_dequantize(&q).unwrap();
    assert_eq!(d.get(0, 0), 1.0);
    assert_eq!(d.get(0, 1), NF4_CODEBOOK[nf4_index(-0.3) as usize]);
}

#[test]
fn rejects_non_finite_input() {
    let h = Matrix::from_vec(1, 2, vec![1.0, f32::NAN]).unwrap();
    assert!(nf4_quantize(&h, QuantOptions::default()).is_err());
}
