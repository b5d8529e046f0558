//! Rank-r reconstruction fidelity `F_r = 1 - ||M - M_r||_F^2 / ||M||_F^2`
//! for SVD truncation of the row-centered logits, SVD truncation of the
//! zero-embedded causal field, and a per-row top-k baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::energy::{causal_energy, logits, row_centered, CausalEnergyField};
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, pairwise_sum_by};
use crate::tensor_io::HeadTensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityMethod {
    SvdEtilde,
    SvdE,
    Topk,
}

impl FidelityMethod {
    pub fn name(self) -> &'static str {
        match self {
            FidelityMethod::SvdEtilde => "svd_etilde",
            FidelityMethod::SvdE => "svd_e",
            FidelityMethod::Topk => "topk",
        }
    }
}

/// Which cells the Frobenius norms run over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Full,
    /// Lower triangle including the diagonal.
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    pub method: FidelityMethod,
    pub domain: Domain,
    /// `(r, F_r)` in increasing `r`.
    pub points: Vec<(usize, f64)>,
}

impl FidelityCurve {
    pub fn at(&self, r: usize) -> Option<f64> {
        self.points.iter().find(|(k, _)| *k == r).map(|(_, f)| *f)
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        self.points.windows(2).all(|w| w[1].1 >= w[0].1 - tol)
    }
}

fn in_domain(domain: Domain, i: usize, j: usize) -> bool {
    match domain {
        Domain::Full => true,
        Domain::Causal => j <= i,
    }
}

fn domain_energy(m: &DMatrix<f64>, domain: Domain) -> f64 {
    let mut cells = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if in_domain(domain, i, j) {
                cells.push(m[(i, j)]);
            }
        }
    }
    pairwise_sum_by(&cells, |x| x * x)
}

/// Evaluates `F_r` for several ranks from a single SVD, by explicit
/// reconstruction of each `M_r`.
pub fn svd_fidelity_curve(m: &DMatrix<f64>, rs: &[usize], domain: Domain) -> Result<Vec<(usize, f64)>> {
    let max_rank = m.nrows().min(m.ncols());
    let total = domain_energy(m, domain);
    if total == 0.0 {
        return Err(Error::UndefinedFidelity);
    }
    let mut ranks: Vec<usize> = rs.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0 || r > max_rank) {
        return Err(Error::InvalidArgument(format!("rank {bad} outside 1..={max_rank}")));
    }
    let svd = crate::linalg::svd(m, &format!("{}x{} fidelity input", m.nrows(), m.ncols()))?;
    let mut approx = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
    let mut added = 0;
    let mut out = Vec::with_capacity(ranks.len());
    for r in ranks {
        while added < r {
            approx.ger(
                svd.singular_values[added],
                &svd.u.column(added),
                &svd.v.column(added),
                1.0,
            );
            added += 1;
        }
        let resid = domain_energy(&(m - &approx), domain);
        out.push((r, 1.0 - resid / total));
    }
    Ok(out)
}

pub fn svd_fidelity(m: &DMatrix<f64>, r: usize, domain: Domain) -> Result<f64> {
    Ok(svd_fidelity_curve(m, &[r], domain)?[0].1)
}

/// `1 - sum_{k>r} sigma_k^2 / sum_k sigma_k^2` (full domain only).
pub fn spectrum_fidelity(singular_values: &[f64], r: usize) -> f64 {
    let mut sq: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    let total = pairwise_sum(&sq);
    let tail = pairwise_sum(&sq[r.min(sq.len())..]);
    1.0 - tail / total
}

/// Keeps the `k` largest-magnitude entries per causal row (ties to the lower
/// column) and reports the fraction of causal energy retained.
pub fn topk_fidelity(e: &CausalEnergyField, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let total = pairwise_sum_by(e.packed(), |x| x * x);
    if total == 0.0 {
        return Ok(1.0);
    }
    let mut dropped = Vec::new();
    let mut idx: Vec<usize> = Vec::new();
    for i in 0..e.len() {
        let row = e.row(i);
        if row.len() <= k {
            continue;
        }
        idx.clear();
        idx.extend(0..row.len());
        idx.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
        dropped.extend(idx[k..].iter().map(|&j| row[j] * row[j]));
    }
    Ok(1.0 - pairwise_sum(&dropped) / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityTable {
    pub svd_etilde: FidelityCurve,
    pub svd_e: FidelityCurve,
    pub topk: FidelityCurve,
}

impl FidelityTable {
    pub fn curves(&self) -> [&FidelityCurve; 3] {
        [&self.svd_etilde, &self.svd_e, &self.topk]
    }
}

/// The three fidelity curves of one head at ranks `rs` (top-k uses `k = r`).
/// Ranks above L are dropped.
pub fn fidelity_table(h: &HeadTensors, rs: &[usize]) -> Result<FidelityTable> {
    if rs.is_empty() {
        return Err(Error::InvalidArgument("fidelity ranks must be non-empty".into()));
    }
    let l = h.len();
    let mut ranks: Vec<usize> = rs.iter().copied().filter(|&r| r >= 1 && r <= l).collect();
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.is_empty() {
        return Err(Error::InvalidArgument(format!("no fidelity rank fits L = {l}")));
    }
    let z = logits(h)?;
    let et = row_centered(&z);
    let e = causal_energy(&z);
    let svd_etilde = FidelityCurve {
        method: FidelityMethod::SvdEtilde,
        domain: Domain::Full,
        points: svd_fidelity_curve(&et.etilde, &ranks, Domain::Full)?,
    };
    let svd_e = FidelityCurve {
        method: FidelityMethod::SvdE,
        domain: Domain::Causal,
        points: svd_fidelity_curve(&e.zero_embedded(), &ranks, Domain::Causal)?,
    };
    let topk = FidelityCurve {
        method: FidelityMethod::Topk,
        domain: Domain::Causal,
        points: ranks
            .iter()
            .map(|&r| topk_fidelity(&e, r).map(|f| (r, f)))
            .collect::<Result<_>>()?,
    };
    Ok(FidelityTable {
        svd_etilde,
        svd_e,
        topk,
    })
}
