use nalgebra::{DMatrix, DVector};

use crate::energy::{flat_index, flattened_len, CausalEnergyField, RowCenteredLogit};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::tensor_io::HeadTensors;

/// Singular values above `RANK_REL_TOL * sigma_1 * max(L, d_h)` count toward
/// the numerical rank.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Rank-r SVD of the row-centered logits: `Etilde = sum_k s_k u_k v_k^T`.
#[derive(Debug, Clone)]
pub struct ChannelDecomposition {
    /// `sigma_1 >= ... >= sigma_r`, truncated at the numerical rank.
    pub singular_values: Vec<f64>,
    /// Query profiles `u_k` as columns (L x r).
    pub query_profiles: DMatrix<f64>,
    /// Key profiles `v_k` as columns (L x r).
    pub key_profiles: DMatrix<f64>,
    pub numerical_rank: usize,
    /// Every singular value of the L x L matrix, descending.
    pub spectrum: Vec<f64>,
    pub head_dim: usize,
}

impl ChannelDecomposition {
    pub fn len(&self) -> usize {
        self.query_profiles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.query_profiles.nrows() == 0
    }

    pub fn u(&self, k: usize) -> DVector<f64> {
        self.query_profiles.column(k - 1).into_owned()
    }

    pub fn v(&self, k: usize) -> DVector<f64> {
        self.key_profiles.column(k - 1).into_owned()
    }

    /// `numerical_rank <= d_h + 1`.
    pub fn rank_bound_holds(&self) -> bool {
        self.numerical_rank <= self.head_dim + 1
    }

    /// `sigma_{d_h+2} / sigma_1`, when the spectrum is long enough.
    pub fn tail_ratio(&self) -> Option<f64> {
        let idx = self.head_dim + 1;
        let s1 = *self.spectrum.first()?;
        let tail = *self.spectrum.get(idx)?;
        Some(if s1 > 0.0 { tail / s1 } else { 0.0 })
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let r = self.numerical_rank;
        let l = self.len();
        if r == 0 {
            return DMatrix::zeros(l, l);
        }
        let mut us = self.query_profiles.clone();
        for (k, s) in self.singular_values.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.key_profiles.transpose()
    }

    /// Relative Frobenius error of the rank-r reconstruction.
    pub fn reconstruction_error(&self, et: &RowCenteredLogit) -> f64 {
        let norm = et.etilde.norm();
        let diff = (self.reconstruct() - &et.etilde).norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    /// Max over the causal triangle of
    /// `|E_ij - (sum_k s_k u_ki v_kj + fullmean_i - causalmean_i)|`.
    pub fn causal_reconstruction_error(&self, e: &CausalEnergyField, et: &RowCenteredLogit) -> f64 {
        let rec = self.reconstruct();
        let shift = et.causal_shift(e);
        let mut worst = 0.0_f64;
        for i in 0..e.len() {
            let row = e.row(i);
            for (j, &eij) in row.iter().enumerate() {
                worst = worst.max((eij - (rec[(i, j)] + shift[i])).abs());
            }
        }
        worst
    }

    /// Largest deviation of `U^T U` and `V^T V` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.numerical_rank;
        let id = DMatrix::<f64>::identity(r, r);
        let eu = (self.query_profiles.transpose() * &self.query_profiles - &id).amax();
        let ev = (self.key_profiles.transpose() * &self.key_profiles - &id).amax();
        eu.max(ev)
    }
}

/// Full SVD of the row-centered logits truncated at the numerical rank.
pub fn channel_decomposition(et: &RowCenteredLogit, d_h: usize) -> Result<ChannelDecomposition> {
    let l = et.len();
    let svd = crate::linalg::svd(&et.etilde, &format!("{l}x{l} row-centered logits"))?;
    let spectrum = svd.singular_values;
    Ok(truncate(svd.u, svd.v, spectrum, l, d_h))
}

fn truncate(u: DMatrix<f64>, v: DMatrix<f64>, spectrum: Vec<f64>, l: usize, d_h: usize) -> ChannelDecomposition {
    let s1 = spectrum.first().copied().unwrap_or(0.0);
    let threshold = RANK_REL_TOL * s1 * l.max(d_h) as f64;
    let rank = spectrum.iter().take_while(|&&s| s > threshold && s > 0.0).count();
    ChannelDecomposition {
        singular_values: spectrum[..rank].to_vec(),
        query_profiles: u.columns(0, rank).into_owned(),
        key_profiles: v.columns(0, rank).into_owned(),
        numerical_rank: rank,
        spectrum,
        head_dim: d_h,
    }
}

/// The same decomposition read off the factorization
/// `Etilde = scale * Q (K - 1 kbar^T)^T`: thin QR of both factors, then an SVD
/// of the small `min(L, d_h)` square core. O(L d_h^2) instead of O(L^3).
///
/// The spectrum is exactly zero past `min(L, d_h)`, so the rank bound holds by
/// construction here; use [`channel_decomposition`] to test it.
pub fn channel_decomposition_factored(h: &HeadTensors) -> Result<ChannelDecomposition> {
    let (l, d_h) = (h.len(), h.head_dim());
    let k = h.k();
    let mut kc = k.clone();
    for c in 0..d_h {
        let m = pairwise_sum(k.column(c).as_slice()) / l as f64;
        kc.column_mut(c).add_scalar_mut(-m);
    }
    let (q1, r1) = crate::linalg::thin_qr(h.q());
    let (q2, r2) = crate::linalg::thin_qr(&kc);
    let core = (r1 * r2.transpose()) * h.softmax_scale();
    let svd = crate::linalg::svd(&core, &format!("{l}x{d_h} factored core"))?;
    let mut spectrum = svd.singular_values;
    spectrum.resize(l, 0.0);
    Ok(truncate(q1 * svd.u, q2 * svd.v, spectrum, l, d_h))
}

fn check_channel(dec: &ChannelDecomposition, k: usize) -> Result<()> {
    if k == 0 || k > dec.numerical_rank {
        return Err(Error::ChannelOutOfRange {
            index: k,
            rank: dec.numerical_rank,
        });
    }
    Ok(())
}

/// Per-channel signal `s_k(t) = sigma_k u_k[i(t)] v_k[j(t)]` over the causal
/// read-out (1-based `k`).
pub fn channel_signal(dec: &ChannelDecomposition, k: usize) -> Result<Vec<f64>> {
    check_channel(dec, k)?;
    let l = dec.len();
    let s = dec.singular_values[k - 1];
    let u = dec.query_profiles.column(k - 1);
    let v = dec.key_profiles.column(k - 1);
    let mut out = Vec::with_capacity(flattened_len(l));
    for i in 1..l {
        for j in 0..=i {
            out.push(s * u[i] * v[j]);
        }
    }
    Ok(out)
}

/// `Gamma_kl(tau) = (1/N) sum_t s_k(t) s_l(t + tau)` evaluated directly.
pub fn channel_cross_covariance(dec: &ChannelDecomposition, k: usize, l: usize, tau: usize) -> Result<f64> {
    check_channel(dec, k)?;
    check_channel(dec, l)?;
    let n = flattened_len(dec.len());
    if tau >= n {
        return Err(Error::InvalidArgument(format!("lag {tau} out of range for N = {n}")));
    }
    let (sk, ul, vl) = (
        dec.singular_values[k - 1] * dec.singular_values[l - 1],
        dec.query_profiles.column(l - 1),
        dec.key_profiles.column(l - 1),
    );
    let uk = dec.query_profiles.column(k - 1);
    let vk = dec.key_profiles.column(k - 1);
    let terms: Vec<f64> = (0..n - tau)
        .map(|t| {
            let (i0, j0) = flat_index(t);
            let (i1, j1) = flat_index(t + tau);
            uk[i0] * vk[j0] * ul[i1] * vl[j1]
        })
        .collect();
    Ok(sk * pairwise_sum(&terms) / n as f64)
}

/// The full r x r table `Gamma(tau)` for one lag.
pub fn channel_covariance_matrix(dec: &ChannelDecomposition, tau: usize) -> Result<DMatrix<f64>> {
    let n = flattened_len(dec.len());
    if tau >= n {
        return Err(Error::InvalidArgument(format!("lag {tau} out of range for N = {n}")));
    }
    let r = dec.numerical_rank;
    let mut signals = DMatrix::zeros(n, r);
    for k in 1..=r {
        let s = channel_signal(dec, k)?;
        signals.set_column(k - 1, &DVector::from_vec(s));
    }
    let head = signals.rows(0, n - tau);
    let tail = signals.rows(tau, n - tau);
    Ok(head.transpose() * tail / n as f64)
}
