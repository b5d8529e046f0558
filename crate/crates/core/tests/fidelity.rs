mod common;

use energy_field::fidelity::{spectrum_fidelity, svd_fidelity, topk_fidelity};
use energy_field::{causal_energy, fidelity_table, logits, row_centered, Domain, SynthKind, SynthParams, SynthSpec};
use nalgebra::DMatrix;

fn low_rank_noise(l: usize, d_h: usize, noise: f64, seed: u64) -> energy_field::HeadTensors {
    energy_field::synth::generate(
        &SynthSpec::new(SynthKind::LowRankNoise, l, d_h, seed).with_params(SynthParams {
            noise_level: Some(noise),
            ..SynthParams::default()
        }),
    )
    .unwrap()
}

#[test]
fn curves_are_monotone() {
    let rs = [1, 2, 3, 5, 10, 20];
    for h in common::corpus(&[24, 64], &[4, 16]) {
        let t = fidelity_table(&h, &rs).unwrap();
        for c in t.curves() {
            assert!(c.is_monotone(1e-12), "{:?}", c);
            assert!(c.points.iter().all(|&(_, f)| f <= 1.0 + 1e-12));
        }
    }
}

#[test]
fn noiseless_rank_three_is_exact() {
    let h = low_rank_noise(40, 8, 0.0, 3);
    let et = row_centered(&logits(&h).unwrap());
    let f = svd_fidelity(&et.etilde, 3, Domain::Full).unwrap();
    assert!((f - 1.0).abs() < 1e-12, "{f}");
}

#[test]
fn rank_three_plus_noise_meets_derived_bound() {
    for seed in 0..5 {
        let h = low_rank_noise(128, 16, 0.1, seed);
        let z = logits(&h).unwrap();
        let et = row_centered(&z);
        // Noise part of the logits, row-centered the same way.
        let (q, k) = (h.q(), h.k());
        let noise = q.columns(3, 13) * k.columns(3, 13).transpose() * h.softmax_scale();
        let centered_noise = DMatrix::from_fn(128, 128, |i, j| noise[(i, j)] - noise.row(i).mean());
        let bound = 1.0 - centered_noise.norm_squared() / et.etilde.norm_squared();
        let f3 = svd_fidelity(&et.etilde, 3, Domain::Full).unwrap();
        assert!(f3 >= bound - 1e-12, "F3 {f3} below {bound}");
        assert!(f3 >= 0.95, "F3 {f3}");
    }
}

#[test]
fn svd_dominates_topk_on_structured_fixtures() {
    let rs = [1, 3, 5, 10, 20];
    for kind in [SynthKind::LowRankNoise, SynthKind::RankDeficient] {
        for seed in 0..4 {
            let h = energy_field::synth::generate(&SynthSpec::new(kind, 96, 16, seed)).unwrap();
            let t = fidelity_table(&h, &rs).unwrap();
            for &r in &rs {
                let (svd, topk) = (t.svd_etilde.at(r).unwrap(), t.topk.at(r).unwrap());
                assert!(svd >= topk - 1e-12, "{kind:?} r={r}: {svd} < {topk}");
            }
        }
    }
}

#[test]
fn eckart_young_agrees_with_explicit_residual() {
    let h = common::gaussian(50, 6, 1);
    let et = row_centered(&logits(&h).unwrap());
    let sv = energy_field::linalg::singular_values(&et.etilde, "test").unwrap();
    for r in [1, 3, 6, 7, 50] {
        let explicit = svd_fidelity(&et.etilde, r, Domain::Full).unwrap();
        assert!((explicit - spectrum_fidelity(&sv, r)).abs() < 1e-8);
    }
}

#[test]
fn topk_by_hand() {
    let z = energy_field::energy::LogitMatrix::from_matrix(DMatrix::from_row_slice(
        3,
        3,
        &[0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 3.0, 0.0, 0.0],
    ))
    .unwrap();
    let e = causal_energy(&z);
    // Causal rows: [0], [1, -1], [2, -1, -1]; total energy 8.
    assert!((topk_fidelity(&e, 1).unwrap() - (1.0 - 3.0 / 8.0)).abs() < 1e-15);
    assert_eq!(topk_fidelity(&e, 3).unwrap(), 1.0);
    assert!(topk_fidelity(&e, 0).is_err());
}

#[test]
fn ranks_above_l_are_dropped() {
    let h = common::gaussian(4, 2, 0);
    let t = fidelity_table(&h, &[2, 5, 10]).unwrap();
    assert_eq!(t.svd_e.points.len(), 1);
    assert!(fidelity_table(&h, &[5]).is_err());
    assert!(fidelity_table(&h, &[]).is_err());
}
