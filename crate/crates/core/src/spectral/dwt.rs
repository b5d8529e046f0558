use serde::{Deserialize, Serialize};

use crate::energy::FlattenedSignal;
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, sum_of_squares};

/// Daubechies scaling filter with 4 vanishing moments (8 taps), minimum
/// phase, orthonormal to double precision: `sum h = sqrt(2)`, `sum h^2 = 1`.
/// The widely copied 12-digit table is off by about 1e-12 in `sum h^2`.
pub const DB4_LOWPASS: [f64; 8] = [
    0.230_377_813_308_896_5,
    0.714_846_570_552_915_7,
    0.630_880_767_929_858_9,
    -0.027_983_769_416_859_854,
    -0.187_034_811_719_093_1,
    0.030_841_381_835_560_764,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_032,
];

const FILTER_LEN: usize = DB4_LOWPASS.len();
const MAX_AUTO_LEVELS: usize = 12;

/// Decomposition depth selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DwtDepth {
    /// `floor(log2(N / 8))`, capped at 12, so the coarsest level keeps at
    /// least 8 coefficients.
    #[default]
    Auto,
    /// Down to a single approximation coefficient.
    Full,
    Fixed(usize),
}

impl std::str::FromStr for DwtDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(DwtDepth::Auto),
            "full" => Ok(DwtDepth::Full),
            other => other.parse::<usize>().map(DwtDepth::Fixed).map_err(|_| {
                Error::InvalidArgument(format!("dwt depth must be auto, full, or an integer, got {other:?}"))
            }),
        }
    }
}

impl std::fmt::Display for DwtDepth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DwtDepth::Auto => f.write_str("auto"),
            DwtDepth::Full => f.write_str("full"),
            DwtDepth::Fixed(j) => write!(f, "{j}"),
        }
    }
}

fn floor_log2(x: usize) -> usize {
    (usize::BITS - 1 - x.leading_zeros()) as usize
}

/// Resolves `depth` for a length-`n` signal into `(J, padded length)`.
pub fn resolve_depth(n: usize, depth: DwtDepth) -> Result<(usize, usize)> {
    if n < FILTER_LEN {
        return Err(Error::InvalidArgument(format!(
            "signal length {n} is shorter than the {FILTER_LEN}-tap filter"
        )));
    }
    let levels = match depth {
        DwtDepth::Auto => floor_log2(n / FILTER_LEN).clamp(1, MAX_AUTO_LEVELS),
        DwtDepth::Full => floor_log2(n.next_power_of_two()),
        DwtDepth::Fixed(j) => j,
    };
    if levels == 0 {
        return Err(Error::InvalidArgument("dwt depth must be at least 1".into()));
    }
    let block = 1usize
        .checked_shl(levels as u32)
        .ok_or(Error::InsufficientLength { levels, padded: n })?;
    if block > n.next_power_of_two() {
        return Err(Error::InsufficientLength {
            levels,
            padded: n.next_power_of_two(),
        });
    }
    Ok((levels, n.div_ceil(block) * block))
}

/// One periodized analysis step: circular convolution with stride 2.
fn analysis_step(x: &[f64], approx: &mut Vec<f64>, detail: &mut Vec<f64>) {
    let m = x.len();
    let half = m / 2;
    approx.clear();
    detail.clear();
    for n in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for (k, &h) in DB4_LOWPASS.iter().enumerate() {
            let xv = x[(2 * n + k) % m];
            a += h * xv;
            // g[k] = (-1)^k h[7 - k]
            let g = if k % 2 == 0 { 1.0 } else { -1.0 } * DB4_LOWPASS[FILTER_LEN - 1 - k];
            d += g * xv;
        }
        approx.push(a);
        detail.push(d);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletReport {
    pub levels: usize,
    pub padded_len: usize,
    pub total_energy: f64,
    pub approx_energy: f64,
    /// `sum_n d_j[n]^2` for `j = 1..=J` (index `j - 1`).
    pub detail_energy: Vec<f64>,
    /// Coefficient count `N_j` per detail level.
    pub coeff_counts: Vec<usize>,
    /// Approximation fraction `rho`.
    pub rho: f64,
    /// `W(j) = (1/N_j) sum_n d_j[n]^2`.
    pub density: Vec<f64>,
    pub parseval_residual: f64,
    /// Coarsest approximation coefficients.
    pub approx: Vec<f64>,
}

/// Multi-level periodized db4 analysis of `sig`, zero-padded to a multiple of
/// `2^J`.
pub fn dwt(sig: &FlattenedSignal, depth: DwtDepth) -> Result<WaveletReport> {
    let (levels, padded_len) = resolve_depth(sig.n(), depth)?;
    let mut current = sig.values.clone();
    current.resize(padded_len, 0.0);
    let total_energy = sum_of_squares(&sig.values);
    let mut detail_energy = Vec::with_capacity(levels);
    let mut coeff_counts = Vec::with_capacity(levels);
    let mut approx = Vec::with_capacity(padded_len / 2);
    let mut detail = Vec::with_capacity(padded_len / 2);
    for _ in 0..levels {
        analysis_step(&current, &mut approx, &mut detail);
        detail_energy.push(sum_of_squares(&detail));
        coeff_counts.push(detail.len());
        std::mem::swap(&mut current, &mut approx);
    }
    let approx_energy = sum_of_squares(&current);
    let mut parts = detail_energy.clone();
    parts.push(approx_energy);
    let recovered = pairwise_sum(&parts);
    let (rho, parseval_residual) = if total_energy > 0.0 {
        (
            approx_energy / total_energy,
            (recovered - total_energy).abs() / total_energy,
        )
    } else {
        (0.0, recovered.abs())
    };
    let density = detail_energy
        .iter()
        .zip(&coeff_counts)
        .map(|(e, &c)| e / c as f64)
        .collect();
    Ok(WaveletReport {
        levels,
        padded_len,
        total_energy,
        approx_energy,
        detail_energy,
        coeff_counts,
        rho,
        density,
        parseval_residual,
        approx: current,
    })
}
