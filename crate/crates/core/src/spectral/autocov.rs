use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::energy::{flatten, CausalEnergyField, FlattenedSignal};
use crate::error::Result;
use crate::numeric::{pairwise_sum, pairwise_sum_by, sum_of_squares};

/// Rows longer than this use FFT autocorrelation for `S_i(tau)`.
const DIRECT_ROW_LIMIT: usize = 512;
/// Rows per leaf of the pairwise reduction over rows.
const ROW_BLOCK: usize = 16;

/// Zero-padded FFT autocorrelation: `out[tau] = sum_t x_t x_{t+tau}` for
/// `tau <= max_lag`.
fn fft_autocorrelation(x: &[f64], max_lag: usize, fft: Option<(&Arc<dyn Fft<f64>>, &Arc<dyn Fft<f64>>)>) -> Vec<f64> {
    let n = x.len();
    let size = (2 * n).next_power_of_two();
    let owned;
    let (fwd, inv) = match fft {
        Some((f, i)) if f.len() == size => (f, i),
        _ => {
            let mut planner = FftPlanner::new();
            owned = (planner.plan_fft_forward(size), planner.plan_fft_inverse(size));
            (&owned.0, &owned.1)
        }
    };
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    let scale = 1.0 / size as f64;
    buf.iter().take(max_lag + 1).map(|c| c.re * scale).collect()
}

/// Biased autocovariance `gamma(tau) = (1/N) sum_{t < N - tau} x_t x_{t+tau}`
/// for `tau = 0..=tau_max`, computed in the frequency domain.
///
/// `tau_max` is clamped to `N - 1`.
pub fn autocovariance(sig: &FlattenedSignal, tau_max: usize) -> Vec<f64> {
    let n = sig.n();
    if n == 0 {
        return Vec::new();
    }
    let max_lag = tau_max.min(n - 1);
    fft_autocorrelation(&sig.values, max_lag, None)
        .into_iter()
        .map(|v| v / n as f64)
        .collect()
}

/// O(N * tau_max) reference evaluation of the same estimator.
pub fn autocovariance_direct(values: &[f64], tau_max: usize) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    (0..=tau_max.min(n - 1))
        .map(|tau| {
            let prods: Vec<f64> = (0..n - tau).map(|t| values[t] * values[t + tau]).collect();
            pairwise_sum(&prods) / n as f64
        })
        .collect()
}

/// `sum_{tau=1}^{N-1} N gamma(tau) = ((sum x)^2 - sum x^2) / 2`.
pub fn global_sum_closed_form(values: &[f64]) -> f64 {
    let s = pairwise_sum(values);
    (s * s - sum_of_squares(values)) / 2.0
}

fn row_lag_sums(row: &[f64], planner: &Planned) -> Vec<f64> {
    let n = row.len();
    if n > DIRECT_ROW_LIMIT {
        return fft_autocorrelation(row, n - 1, planner.get(n));
    }
    (0..n)
        .map(|tau| pairwise_sum(&(0..n - tau).map(|j| row[j] * row[j + tau]).collect::<Vec<_>>()))
        .collect()
}

struct Planned {
    plans: Vec<(usize, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
}

impl Planned {
    fn new(max_row: usize) -> Self {
        let mut plans = Vec::new();
        if max_row > DIRECT_ROW_LIMIT {
            let mut planner = FftPlanner::new();
            let mut size = (2 * (DIRECT_ROW_LIMIT + 1)).next_power_of_two();
            while size <= (2 * max_row).next_power_of_two() {
                plans.push((size, planner.plan_fft_forward(size), planner.plan_fft_inverse(size)));
                size *= 2;
            }
        }
        Self { plans }
    }

    fn get(&self, n: usize) -> Option<(&Arc<dyn Fft<f64>>, &Arc<dyn Fft<f64>>)> {
        let size = (2 * n).next_power_of_two();
        self.plans.iter().find(|(s, _, _)| *s == size).map(|(_, f, i)| (f, i))
    }
}

fn within_rows(e: &CausalEnergyField, rows: std::ops::Range<usize>, planner: &Planned) -> Vec<f64> {
    if rows.len() <= ROW_BLOCK {
        let mut acc = vec![0.0; rows.end];
        for i in rows {
            for (tau, s) in row_lag_sums(e.row(i), planner).into_iter().enumerate() {
                acc[tau] += s;
            }
        }
        acc
    } else {
        let mid = rows.start + rows.len() / 2;
        let (mut lo, hi) = rayon::join(
            || within_rows(e, rows.start..mid, planner),
            || within_rows(e, mid..rows.end, planner),
        );
        // Fixed split, so the reduction order is independent of scheduling.
        lo.resize(hi.len().max(lo.len()), 0.0);
        for (a, b) in lo.iter_mut().zip(hi) {
            *a += b;
        }
        lo
    }
}

/// Within-row autocovariance `W(tau) = sum_i S_i(tau)` for `tau = 0..L-1`,
/// summed over rows with `n_i > tau`.
pub fn within_row_autocovariance(e: &CausalEnergyField) -> Vec<f64> {
    let planner = Planned::new(e.len());
    let mut w = within_rows(e, 0..e.len(), &planner);
    w.resize(e.len(), 0.0);
    w
}

/// Autocovariance split into within-row and cross-row parts, plus the two
/// bridge ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocovarianceReport {
    /// `gamma(0..=tau_max)` (clamped to `N - 1`).
    pub gamma: Vec<f64>,
    /// `W(tau)` for every lag `0..L`.
    pub within: Vec<f64>,
    /// `X(tau) = N gamma(tau) - W(tau)` for the lags in `gamma`.
    pub cross: Vec<f64>,
    /// `sum_tau W(tau) / (N gamma(0) / 2)`.
    pub bridge_ratio: f64,
    /// `sum_{tau=0}^{N-1} gamma(tau) / (gamma(0) / 2)`.
    pub global_sum_ratio: f64,
    pub n: usize,
    /// Set when the field is identically zero; both ratios are then 1.
    pub degenerate: bool,
}

impl AutocovarianceReport {
    pub fn bridge_holds(&self, tol: f64) -> bool {
        (self.bridge_ratio - 1.0).abs() <= tol && (self.global_sum_ratio - 1.0).abs() <= tol
    }
}

pub fn bridge_check(e: &CausalEnergyField, tau_max: usize) -> Result<AutocovarianceReport> {
    let sig = flatten(e)?;
    let n = sig.n();
    let gamma = autocovariance(&sig, tau_max);
    let within = within_row_autocovariance(e);
    let cross: Vec<f64> = gamma
        .iter()
        .enumerate()
        .map(|(tau, g)| n as f64 * g - within.get(tau).copied().unwrap_or(0.0))
        .collect();
    let energy = sum_of_squares(&sig.values);
    if energy == 0.0 {
        return Ok(AutocovarianceReport {
            gamma,
            within,
            cross,
            bridge_ratio: 1.0,
            global_sum_ratio: 1.0,
            n,
            degenerate: true,
        });
    }
    let bridge_ratio = pairwise_sum(&within) / (energy / 2.0);
    // sum_{tau>=0} gamma = gamma(0) + closed_form / N, and gamma(0) = energy / N.
    let total = (energy + global_sum_closed_form(&sig.values)) / n as f64;
    let global_sum_ratio = total / (energy / n as f64 / 2.0);
    Ok(AutocovarianceReport {
        gamma,
        within,
        cross,
        bridge_ratio,
        global_sum_ratio,
        n,
        degenerate: false,
    })
}

/// `Y(0) = 0`, `Y(t) = sum_{s <= t} x_s`; length `N + 1`.
pub fn cumulative_bridge(sig: &FlattenedSignal) -> Vec<f64> {
    let mut y = Vec::with_capacity(sig.n() + 1);
    let mut acc = 0.0;
    y.push(0.0);
    for &x in &sig.values {
        acc += x;
        y.push(acc);
    }
    y
}

/// `1 + sum |x|`, the scale for the bridge endpoint tolerance.
pub fn abs_mass(values: &[f64]) -> f64 {
    1.0 + pairwise_sum_by(values, f64::abs)
}
