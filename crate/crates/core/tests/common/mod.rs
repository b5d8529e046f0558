#![allow(dead_code)]

use energy_field::synth::{self, SynthKind, SynthParams, SynthSpec};
use energy_field::HeadTensors;
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Shapes(ChaCha8Rng);

impl Shapes {
    pub fn new(seed: u64) -> Self {
        Shapes(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        xs[self.int(0, xs.len() - 1)]
    }

    pub fn seed(&mut self) -> u64 {
        self.0.next_u64()
    }
}

pub fn gaussian(l: usize, d_h: usize, seed: u64) -> HeadTensors {
    synth::gaussian_head(&SynthSpec::gaussian(l, d_h, seed)).unwrap()
}

/// One head of every generator kind at the given shape.
pub fn all_kinds(l: usize, d_h: usize, seed: u64) -> Vec<HeadTensors> {
    let kinds = [
        (SynthKind::Gaussian, SynthParams::default()),
        (SynthKind::Sink, SynthParams::default()),
        (
            SynthKind::Concentrated,
            SynthParams {
                concentration_factor: Some(4.0),
                target_position: Some(l / 2),
                ..SynthParams::default()
            },
        ),
        (SynthKind::RankDeficient, SynthParams::default()),
        (SynthKind::LowRankNoise, SynthParams::default()),
    ];
    kinds
        .into_iter()
        .filter(|(kind, _)| {
            // The low-rank generators need room for their inner dimension.
            !matches!(kind, SynthKind::RankDeficient | SynthKind::LowRankNoise) || d_h >= 3
        })
        .filter(|(kind, _)| {
            // Sink calibration along the mean query needs a few rows to have
            // a positive slope.
            *kind != SynthKind::Sink || l >= 16
        })
        .map(|(kind, params)| synth::generate(&SynthSpec::new(kind, l, d_h, seed).with_params(params)).unwrap())
        .collect()
}

/// The fixture corpus: every generator at a spread of shapes.
pub fn corpus(lengths: &[usize], dims: &[usize]) -> Vec<HeadTensors> {
    let mut out = Vec::new();
    for (a, &l) in lengths.iter().enumerate() {
        for (b, &d) in dims.iter().enumerate() {
            out.extend(all_kinds(l, d, (100 * a + b) as u64));
        }
    }
    out
}

/// Triple-loop logits.
pub fn naive_logits(h: &HeadTensors) -> DMatrix<f64> {
    let (q, k) = (h.q(), h.k());
    let l = h.len();
    DMatrix::from_fn(l, l, |i, j| {
        let mut s = 0.0;
        for c in 0..h.head_dim() {
            s += q[(i, c)] * k[(j, c)];
        }
        h.softmax_scale() * s
    })
}

/// O(N^2) biased autocovariance.
pub fn direct_autocov(x: &[f64], tau_max: usize) -> Vec<f64> {
    let n = x.len();
    (0..=tau_max.min(n.saturating_sub(1)))
        .map(|tau| (0..n - tau).map(|t| x[t] * x[t + tau]).sum::<f64>() / n as f64)
        .collect()
}

pub fn max_rel_diff(a: &[f64], b: &[f64], scale: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}
