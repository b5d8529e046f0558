//! Key incoherence, inverse participation ratio, key conditioning, the
//! delocalization bound, and the incoherence monitor.

use std::io::{BufRead, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::energy::row_centered;
use crate::error::{Error, Result};
use crate::numeric::{max_abs, pairwise_sum, pairwise_sum_by};
use crate::serde_ext::finite_or_inf;
use crate::spectral::ChannelDecomposition;
use crate::tensor_io::HeadTensors;

/// Relative threshold for the numerical rank of K.
pub const KEY_RANK_REL_TOL: f64 = 1e-10;
/// Allowed deviation of `||v||` from 1 for IPR inputs.
pub const UNIT_NORM_TOL: f64 = 1e-8;
pub const DEFAULT_MU_K_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyGeometry {
    pub mu_k: f64,
    pub frob_sq: f64,
    pub max_row_norm_sq: f64,
    pub argmax_position: usize,
    /// `sigma_max / sigma_min`, infinite when K has rank below `d_h`.
    #[serde(with = "finite_or_inf")]
    pub kappa: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `||K||_F^2 / (L d_h)`.
    pub scale_ratio: f64,
    pub numerical_rank: usize,
}

impl KeyGeometry {
    pub fn rank_deficient(&self) -> bool {
        self.kappa.is_infinite()
    }
}

fn row_norms_sq(k: &DMatrix<f64>) -> Vec<f64> {
    (0..k.nrows())
        .map(|j| {
            let row: Vec<f64> = k.row(j).iter().copied().collect();
            pairwise_sum_by(&row, |x| x * x)
        })
        .collect()
}

/// `mu_K = L max_j ||k_j||^2 / ||K||_F^2` together with the conditioning of K.
pub fn key_incoherence(k: &DMatrix<f64>) -> Result<KeyGeometry> {
    let (l, d_h) = k.shape();
    let norms = row_norms_sq(k);
    let frob_sq = pairwise_sum(&norms);
    if frob_sq == 0.0 {
        return Err(Error::ZeroKeyMatrix);
    }
    let (argmax_position, max_row_norm_sq) = norms.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (j, v)| if v > best.1 { (j, v) } else { best },
    );
    let mu_k = l as f64 * max_row_norm_sq / frob_sq;

    let sv = crate::linalg::singular_values(k, &format!("{l}x{d_h} key matrix"))?;
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    let threshold = KEY_RANK_REL_TOL * sigma_max * l.max(d_h) as f64;
    let numerical_rank = sv.iter().filter(|&&s| s > threshold).count();
    // sigma_min is the d_h-th singular value; it vanishes whenever L < d_h.
    let sigma_min = if l < d_h {
        0.0
    } else {
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let kappa = if numerical_rank < d_h {
        f64::INFINITY
    } else {
        sigma_max / sigma_min
    };
    Ok(KeyGeometry {
        mu_k,
        frob_sq,
        max_row_norm_sq,
        argmax_position,
        kappa,
        sigma_min,
        sigma_max,
        scale_ratio: frob_sq / (l * d_h) as f64,
        numerical_rank,
    })
}

/// Returns `(IPR, IPR * L)` for a unit vector.
pub fn ipr(v: &[f64]) -> Result<(f64, f64)> {
    let norm = pairwise_sum_by(v, |x| x * x).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotUnitNorm(norm));
    }
    let p = pairwise_sum_by(v, |x| (x * x) * (x * x));
    Ok((p, p * v.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelocalizationReport {
    /// IPR * L of every right singular vector at numerical rank.
    pub ipr_times_l: Vec<f64>,
    /// `mu_K d_h^2 kappa^4 / L`.
    #[serde(with = "finite_or_inf")]
    pub bound: f64,
    pub satisfied: Vec<bool>,
    pub mean_ipr_times_l: f64,
    /// Mean weighted by `sigma_k^2`.
    pub weighted_mean_ipr_times_l: f64,
    /// `mu_K ||K||_F^4 / sigma_min(K)^4`, the Cauchy-Schwarz bound for unit
    /// vectors in the column span of K, before the `kappa` relaxation.
    #[serde(with = "finite_or_inf")]
    pub span_bound: f64,
    /// The same bound evaluated on the column-centered keys, whose column
    /// span contains every right singular vector of the row-centered logits.
    #[serde(with = "finite_or_inf")]
    pub centered_key_bound: f64,
    pub centered_key_satisfied: Vec<bool>,
    pub rank_deficient: bool,
    pub geometry: KeyGeometry,
}

impl DelocalizationReport {
    pub fn violations(&self) -> usize {
        self.satisfied.iter().filter(|s| !**s).count()
    }

    pub fn centered_key_violations(&self) -> usize {
        self.centered_key_satisfied.iter().filter(|s| !**s).count()
    }
}

/// Slack for comparisons against bounds that are attained with equality
/// (e.g. a maximally aligned unit vector).
const BOUND_SLACK: f64 = 1e-9;

fn span_bound(k: &DMatrix<f64>) -> Result<f64> {
    let g = key_incoherence(k)?;
    if g.rank_deficient() {
        return Ok(f64::INFINITY);
    }
    Ok(g.mu_k * g.frob_sq * g.frob_sq / g.sigma_min.powi(4))
}

/// Evaluates IPR * L for every right singular vector of the row-centered
/// logits against the delocalization bound computed from K.
pub fn delocalization_check(h: &HeadTensors, dec: &ChannelDecomposition) -> Result<DelocalizationReport> {
    let l = h.len();
    let d_h = h.head_dim();
    let geometry = key_incoherence(h.k())?;
    let rank_deficient = geometry.rank_deficient();
    let bound = if rank_deficient {
        f64::INFINITY
    } else {
        geometry.mu_k * (d_h * d_h) as f64 * geometry.kappa.powi(4) / l as f64
    };
    let span = span_bound(h.k())?;

    let mut centered = h.k().clone();
    for c in 0..d_h {
        let m = centered.column(c).mean();
        centered.column_mut(c).add_scalar_mut(-m);
    }
    let centered_key_bound = match span_bound(&centered) {
        Ok(b) => b,
        // All keys identical: the centered span is empty, so there are no
        // singular vectors to bound.
        Err(Error::ZeroKeyMatrix) => f64::INFINITY,
        Err(e) => return Err(e),
    };

    let mut ipr_times_l = Vec::with_capacity(dec.numerical_rank);
    for k in 1..=dec.numerical_rank {
        let v: Vec<f64> = dec.v(k).iter().copied().collect();
        ipr_times_l.push(ipr(&v)?.1);
    }
    let satisfied = ipr_times_l.iter().map(|&x| x <= bound * (1.0 + BOUND_SLACK)).collect();
    let centered_key_satisfied = ipr_times_l
        .iter()
        .map(|&x| x <= centered_key_bound * (1.0 + BOUND_SLACK))
        .collect();
    let mean_ipr_times_l = if ipr_times_l.is_empty() {
        f64::NAN
    } else {
        pairwise_sum(&ipr_times_l) / ipr_times_l.len() as f64
    };
    let weights: Vec<f64> = dec.singular_values.iter().map(|s| s * s).collect();
    let wsum = pairwise_sum(&weights);
    let weighted: Vec<f64> = ipr_times_l.iter().zip(&weights).map(|(x, w)| x * w).collect();
    let weighted_mean_ipr_times_l = if wsum > 0.0 {
        pairwise_sum(&weighted) / wsum
    } else {
        f64::NAN
    };
    Ok(DelocalizationReport {
        ipr_times_l,
        bound,
        satisfied,
        mean_ipr_times_l,
        weighted_mean_ipr_times_l,
        span_bound: span,
        centered_key_bound,
        centered_key_satisfied,
        rank_deficient,
        geometry,
    })
}

/// Convenience wrapper running the channel decomposition first.
pub fn delocalization_for_head(h: &HeadTensors) -> Result<DelocalizationReport> {
    let et = row_centered(&crate::energy::logits(h)?);
    let dec = crate::spectral::channel_decomposition(&et, h.head_dim())?;
    delocalization_check(h, &dec)
}

/// One key-norm summary in the monitor stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyNormRecord {
    pub head_id: String,
    #[serde(default)]
    pub step: i64,
    #[serde(rename = "L")]
    pub len: u64,
    pub max_row_norm_sq: f64,
    pub frob_sq: f64,
}

impl KeyNormRecord {
    pub fn from_keys(head_id: impl Into<String>, step: i64, k: &DMatrix<f64>) -> Self {
        let norms = row_norms_sq(k);
        Self {
            head_id: head_id.into(),
            step,
            len: k.nrows() as u64,
            max_row_norm_sq: max_abs(&norms),
            frob_sq: pairwise_sum(&norms),
        }
    }

    pub fn mu_k(&self) -> Result<f64> {
        if self.len == 0 {
            return Err(Error::InvalidArgument("L must be positive".into()));
        }
        if !(self.frob_sq.is_finite() && self.frob_sq > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frob_sq must be positive, got {}",
                self.frob_sq
            )));
        }
        if !(self.max_row_norm_sq.is_finite() && self.max_row_norm_sq >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "max_row_norm_sq must be non-negative, got {}",
                self.max_row_norm_sq
            )));
        }
        Ok(self.len as f64 * self.max_row_norm_sq / self.frob_sq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuKAlert {
    pub head_id: String,
    pub step: i64,
    pub mu_k: f64,
}

/// Alert iff `mu_K > threshold` (strict).
pub fn check_record(record: &KeyNormRecord, threshold: f64) -> Result<Option<MuKAlert>> {
    let mu_k = record.mu_k()?;
    Ok((mu_k > threshold).then(|| MuKAlert {
        head_id: record.head_id.clone(),
        step: record.step,
        mu_k,
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MonitorSummary {
    pub records: u64,
    pub alerts: u64,
    pub skipped: u64,
}

/// Streams NDJSON key-norm records from `input`, writing one NDJSON alert per
/// offending record to `output`. Malformed lines are logged and skipped.
pub fn monitor_mu_k<R: BufRead, W: Write>(input: R, mut output: W, threshold: f64) -> std::io::Result<MonitorSummary> {
    let mut summary = MonitorSummary::default();
    let mut line = String::new();
    let mut input = input;
    let mut lineno = 0u64;
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let record: KeyNormRecord = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => {
                warn!("line {lineno}: skipping malformed record: {e}");
                summary.skipped += 1;
                continue;
            }
        };
        match check_record(&record, threshold) {
            Ok(alert) => {
                summary.records += 1;
                if let Some(alert) = alert {
                    summary.alerts += 1;
                    serde_json::to_writer(&mut output, &alert)?;
                    output.write_all(b"\n")?;
                }
            }
            Err(e) => {
                warn!("line {lineno}: skipping record for {:?}: {e}", record.head_id);
                summary.skipped += 1;
            }
        }
    }
    output.flush()?;
    Ok(summary)
}

/// Unit vector from arbitrary input, for tests and fixtures.
pub fn normalized(v: &DVector<f64>) -> DVector<f64> {
    v / v.norm()
}
