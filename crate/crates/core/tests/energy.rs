mod common;

use energy_field::energy::{attention_probs, flat_index, flatten_causal, LogitMatrix, ROW_SUM_TOL};
use energy_field::{causal_energy, clr_residual, flatten, flattened_len, logits, row_centered, softmax};
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn logits_match_triple_loop() {
    for (l, d) in [(1, 1), (2, 1), (7, 3), (33, 16), (64, 64)] {
        for h in common::all_kinds(l, d, 9) {
            let z = logits(&h).unwrap();
            let naive = common::naive_logits(&h);
            let scale = 1.0 + naive.amax();
            assert!((z.z - naive).amax() <= 1e-12 * scale, "L={l} d_h={d}");
        }
    }
}

#[test]
fn causal_and_full_rows_sum_to_zero() {
    for h in common::corpus(&[2, 3, 17, 128], &[1, 4, 32]) {
        let z = logits(&h).unwrap();
        let bound = ROW_SUM_TOL * (1.0 + z.z.amax());
        let e = causal_energy(&z);
        let et = row_centered(&z);
        for i in 0..h.len() {
            assert!(e.row_sum(i).abs() <= bound);
            assert!(et.row_sum(i).abs() <= bound);
        }
        assert!(e.row_sum_violations().is_empty());
        assert!(et.row_sum_violations().is_empty());
    }
}

#[test]
fn row_shift_leaves_field_unchanged() {
    let h = common::gaussian(24, 5, 3);
    let z = logits(&h).unwrap();
    let mut shifted = z.z.clone();
    for i in 0..24 {
        let c = (i as f64 - 11.5) * 3.25;
        shifted.row_mut(i).add_scalar_mut(c);
    }
    let a = causal_energy(&z);
    let b = causal_energy(&LogitMatrix::from_matrix(shifted.clone()).unwrap());
    let worst = a
        .packed()
        .iter()
        .zip(b.packed())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
    let ea = row_centered(&z);
    let eb = row_centered(&LogitMatrix::from_matrix(shifted).unwrap());
    assert!((ea.etilde - eb.etilde).amax() < 1e-12);
}

#[test]
fn causal_and_full_centering_differ_by_a_row_constant() {
    for h in common::all_kinds(40, 6, 5) {
        let z = logits(&h).unwrap();
        let e = causal_energy(&z);
        let et = row_centered(&z);
        let shift = et.causal_shift(&e);
        for i in 0..h.len() {
            for (j, &eij) in e.row(i).iter().enumerate() {
                let d = eij - et.etilde[(i, j)];
                assert!((d - shift[i]).abs() < 1e-10 * (1.0 + z.z.amax()), "row {i} col {j}");
            }
        }
    }
}

#[test]
fn softmax_of_field_is_causal_attention() {
    let h = common::gaussian(30, 8, 1);
    let z = logits(&h).unwrap();
    let e = causal_energy(&z);
    for i in [0, 1, 14, 29] {
        let p = attention_probs(&e, i).unwrap();
        let raw = z.causal_row(i);
        let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = raw.iter().map(|x| (x - m).exp()).sum();
        for (pj, zj) in p.iter().zip(&raw) {
            assert!((pj - (zj - m).exp() / denom).abs() < 1e-14);
        }
    }
    assert!(attention_probs(&e, 30).is_err());
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let p = softmax(&[1000.0, 1000.0, -1000.0]);
    assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
}

#[test]
fn clr_matches_row_centering() {
    for h in common::corpus(&[2, 16, 96], &[2, 8]) {
        let z = logits(&h).unwrap();
        assert!(clr_residual(&z).unwrap() <= 1e-9);
    }
}

#[test]
fn clr_underflow_is_reported() {
    let z = LogitMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 2000.0, 0.0, 0.0])).unwrap();
    assert!(clr_residual(&z).is_err());
}

#[test]
fn flattening_order_and_length() {
    assert_eq!(flattened_len(1), 0);
    assert_eq!(flattened_len(2), 2);
    assert_eq!(flattened_len(64), 64 * 65 / 2 - 1);
    let h = common::gaussian(9, 3, 2);
    let z = logits(&h).unwrap();
    let e = causal_energy(&z);
    let sig = flatten(&e).unwrap();
    assert_eq!(sig.n(), flattened_len(9));
    let mut t = 0;
    for i in 1..9 {
        for j in 0..=i {
            assert_eq!(flat_index(t), (i, j));
            assert_eq!(sig.values[t], e.get(i, j).unwrap());
            t += 1;
        }
    }
    let et = row_centered(&z);
    assert_eq!(flatten_causal(&et.etilde).unwrap().n(), sig.n());
    assert!(flatten(&causal_energy(&logits(&common::gaussian(1, 3, 2)).unwrap())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn row_sums_vanish_for_any_head(l in 1usize..80, d in 1usize..24, seed in any::<u64>()) {
        let h = common::gaussian(l, d, seed);
        let z = logits(&h).unwrap();
        let bound = ROW_SUM_TOL * (1.0 + z.z.amax());
        let e = causal_energy(&z);
        let et = row_centered(&z);
        for i in 0..l {
            prop_assert!(e.row_sum(i).abs() <= bound);
            prop_assert!(et.row_sum(i).abs() <= bound);
        }
    }

    #[test]
    fn flat_index_inverts_packing(t in 0usize..2_000_000) {
        let (i, j) = flat_index(t);
        prop_assert!(i >= 1 && j <= i);
        prop_assert_eq!(i * (i + 1) / 2 + j - 1, t);
    }
}
