//! CSV tables behind the figures: field contours, wavelet spectra, bridge
//! end points, fidelity curves and `mu_K` against model size.

use std::fmt::Write as _;

use crate::energy::{CausalEnergyField, FlattenedSignal};
use crate::fidelity::FidelityTable;
use crate::report::{AggregateReport, GroupStats, HeadReport, MuKSpread};
use crate::spectral::{cumulative_bridge, WaveletReport};

/// Formats a real so that it parses back to the same value.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 || (x.is_finite() && (1e-5..1e16).contains(&x.abs())) {
        format!("{x}")
    } else if x.is_finite() {
        format!("{x:e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// `i,j,energy` over the causal triangle.
pub fn field_contour(e: &CausalEnergyField) -> String {
    let mut out = String::from("i,j,energy\n");
    for i in 0..e.len() {
        for (j, &v) in e.row(i).iter().enumerate() {
            let _ = writeln!(out, "{i},{j},{}", fmt_real(v));
        }
    }
    out
}

/// One row per detail level plus the final approximation row, whose
/// `value` column holds `rho`.
pub fn wavelet_spectrum(w: &WaveletReport) -> String {
    let mut out = String::from("kind,level,n_coeffs,energy,value\n");
    for j in 0..w.levels {
        let _ = writeln!(
            out,
            "detail,{},{},{},{}",
            j + 1,
            w.coeff_counts[j],
            fmt_real(w.detail_energy[j]),
            fmt_real(w.density[j])
        );
    }
    let _ = writeln!(
        out,
        "approx,{},{},{},{}",
        w.levels,
        w.approx.len(),
        fmt_real(w.approx_energy),
        fmt_real(w.rho)
    );
    out
}

/// The first and last ten points of the cumulative signal `Y(t)`
/// (all of it when `N < 20`).
pub fn bridge_endpoints(sig: &FlattenedSignal) -> String {
    let y = cumulative_bridge(sig);
    let n = sig.n();
    let ts: Vec<usize> = if n < 20 {
        (1..=n).collect()
    } else {
        (1..=10).chain(n - 9..=n).collect()
    };
    let mut out = String::from("t,Y\n");
    for t in ts {
        let _ = writeln!(out, "{t},{}", fmt_real(y[t]));
    }
    out
}

pub fn fidelity_curves(table: &FidelityTable) -> String {
    let mut out = String::from("method,domain,r,F\n");
    for c in table.curves() {
        let domain = match c.domain {
            crate::fidelity::Domain::Full => "full",
            crate::fidelity::Domain::Causal => "causal",
        };
        for &(r, f) in &c.points {
            let _ = writeln!(out, "{},{domain},{r},{}", c.method.name(), fmt_real(f));
        }
    }
    out
}

pub fn mu_k_vs_size(rows: &[MuKSpread]) -> String {
    let mut out = String::from("model_id,n_heads,median_mu_k,q1,q3,iqr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.model_id,
            r.heads,
            fmt_real(r.median),
            fmt_real(r.q1),
            fmt_real(r.q3),
            fmt_real(r.q3 - r.q1)
        );
    }
    out
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per head; empty cells mark skipped quantities.
pub fn head_summary(reports: &[HeadReport], fidelity_rs: &[usize]) -> String {
    let mut out = String::from(
        "index,model_id,layer,query_head,kv_head,L,d_h,mu_k,kappa,ipr_mean,ipr_weighted_mean,bound,\
         numerical_rank,bridge_ratio,global_sum_ratio,rho,diag_mean,sink_mean,clr_residual",
    );
    for r in fidelity_rs {
        let _ = write!(out, ",F{r}_svd_etilde,F{r}_svd_e,F{r}_topk");
    }
    out.push_str(",failed_checks,error\n");
    for r in reports {
        let id = r.identity.as_ref();
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.index,
            csv_field(id.map(|i| i.model_id.as_str()).unwrap_or("")),
            id.map(|i| i.layer.to_string()).unwrap_or_default(),
            id.map(|i| i.query_head.to_string()).unwrap_or_default(),
            id.map(|i| i.kv_head.to_string()).unwrap_or_default(),
            id.map(|i| i.len.to_string()).unwrap_or_default(),
            id.map(|i| i.d_h.to_string()).unwrap_or_default(),
        );
        let g = r.key_geometry.as_ref();
        let cells = [
            opt(g.map(|g| g.mu_k)),
            opt(g.map(|g| g.kappa)),
            opt(r.ipr.as_ref().map(|i| i.mean)),
            opt(r.ipr.as_ref().map(|i| i.sigma2_weighted_mean)),
            opt(r.ipr.as_ref().map(|i| i.bound)),
            r.rank
                .as_ref()
                .map(|k| k.numerical_rank.to_string())
                .unwrap_or_default(),
            opt(r.bridge.as_ref().map(|b| b.bridge_ratio)),
            opt(r.bridge.as_ref().map(|b| b.global_sum_ratio)),
            opt(r.wavelet.as_ref().map(|w| w.rho)),
            opt(r.diag_mean),
            opt(r.sink_mean),
            opt(r.clr_residual),
        ];
        for c in cells {
            let _ = write!(out, ",{c}");
        }
        for &rank in fidelity_rs {
            for curve in r.fidelity.iter().flat_map(|t| t.curves()) {
                let _ = write!(out, ",{}", opt(curve.at(rank)));
            }
            if r.fidelity.is_none() {
                out.push_str(",,,");
            }
        }
        let failed: Vec<&str> = r.failed_checks().map(|c| c.check.name()).collect();
        let _ = writeln!(
            out,
            ",{},{}",
            csv_field(&failed.join(";")),
            csv_field(r.error.as_deref().unwrap_or(""))
        );
    }
    out
}

/// Overall, per-family and per-model rollups.
pub fn aggregate_summary(agg: &AggregateReport) -> String {
    let mut out = String::from(
        "group,name,heads,mu_k_mean,mu_k_std,mu_k_median,pct_mu_k_within_threshold,ipr_mean,ipr_cv_pct,\
         bridge_ratio_min,bridge_ratio_max,rho_max\n",
    );
    let mut row = |group: &str, name: &str, g: &GroupStats| {
        let _ = writeln!(
            out,
            "{group},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(name),
            g.heads,
            fmt_real(g.mu_k_mean),
            fmt_real(g.mu_k_std),
            fmt_real(g.mu_k_median),
            fmt_real(g.pct_mu_k_within_threshold),
            fmt_real(g.ipr_mean),
            fmt_real(g.ipr_cv_pct),
            fmt_real(g.bridge_ratio_min),
            fmt_real(g.bridge_ratio_max),
            fmt_real(g.rho_max)
        );
    };
    row("overall", "all", &agg.overall);
    for (name, g) in &agg.per_family {
        row("family", name, g);
    }
    for (name, g) in &agg.per_model {
        row("model", name, g);
    }
    out
}
