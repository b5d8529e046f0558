//! Per-head analysis reports, the invariant checks behind them, and
//! run-level rollups.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::energy::{causal_energy, clr_residual, flatten, logits, row_centered, CausalEnergyField, LogitMatrix};
use crate::error::{Error, Result};
use crate::fidelity::{fidelity_table, spectrum_fidelity, FidelityTable};
use crate::geometry::{delocalization_check, KeyGeometry, DEFAULT_MU_K_THRESHOLD};
use crate::numeric::{mean, median, quantile, std_dev};
use crate::serde_ext::{finite_or_inf, vec_finite_or_inf};
use crate::spectral::{abs_mass, bridge_check, channel_decomposition, cumulative_bridge, dwt, DwtDepth};
use crate::tensor_io::{HeadTensors, Manifest};

/// Thresholds every mechanism-level check is held to.
pub mod tol {
    /// Row sums relative to `1 + max |Z|`.
    pub const ROW_SUM: f64 = crate::energy::ROW_SUM_TOL;
    pub const BRIDGE: f64 = 1e-6;
    pub const PARSEVAL: f64 = 1e-10;
    pub const CLR: f64 = 1e-9;
    /// Largest per-row logit spread for which the CLR check is meaningful.
    pub const CLR_MAX_SPREAD: f64 = 500.0;
    /// Causal reconstruction relative to `1 + max |Z|`.
    pub const CAUSAL_RECONSTRUCTION: f64 = 1e-8;
    pub const RECONSTRUCTION: f64 = 1e-8;
    pub const ECKART_YOUNG: f64 = 1e-10;
    /// Cumulative endpoint relative to `1 + sum |E|`.
    pub const ENDPOINT: f64 = 1e-9;
}

/// Added to `E_{i,0}` for `i >= 1` when the row-sum fault is injected.
const INJECTED_ROW_SUM_ERROR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tau_max: usize,
    pub dwt_depth: DwtDepth,
    pub fidelity_rs: Vec<usize>,
    pub mu_k_threshold: f64,
    /// Worker threads; `None` uses the rayon default.
    pub workers: Option<usize>,
    pub output_dir: PathBuf,
    pub formats: Vec<OutputFormat>,
    /// Negative control: corrupts the causal field before checking.
    #[serde(skip)]
    pub inject_rowsum_bug: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau_max: 4096,
            dwt_depth: DwtDepth::Auto,
            fidelity_rs: vec![5, 10, 20],
            mu_k_threshold: DEFAULT_MU_K_THRESHOLD,
            workers: None,
            output_dir: PathBuf::from("out"),
            formats: vec![OutputFormat::Json],
            inject_rowsum_bug: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fidelity_rs.is_empty() || self.fidelity_rs.contains(&0) {
            return Err(Error::InvalidArgument(
                "fidelity ranks must be a non-empty list of positive integers".into(),
            ));
        }
        if !(self.mu_k_threshold.is_finite() && self.mu_k_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mu_K threshold must be positive, got {}",
                self.mu_k_threshold
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        if let DwtDepth::Fixed(0) = self.dwt_depth {
            return Err(Error::InvalidArgument("dwt depth must be at least 1".into()));
        }
        if self.formats.is_empty() {
            return Err(Error::InvalidArgument("at least one output format is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    RowSum,
    Flatten,
    RankBound,
    Reconstruction,
    Bridge,
    CumulativeEndpoint,
    Parseval,
    Clr,
    EckartYoung,
    Delocalization,
    /// Delocalization bound in its `mu_K d_h^2 kappa^4 / L` form; reported,
    /// never counted as a mechanism failure.
    DelocalizationKappa,
}

impl CheckName {
    pub const ALL: [CheckName; 11] = [
        CheckName::RowSum,
        CheckName::Flatten,
        CheckName::RankBound,
        CheckName::Reconstruction,
        CheckName::Bridge,
        CheckName::CumulativeEndpoint,
        CheckName::Parseval,
        CheckName::Clr,
        CheckName::EckartYoung,
        CheckName::Delocalization,
        CheckName::DelocalizationKappa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckName::RowSum => "row_sum",
            CheckName::Flatten => "flatten",
            CheckName::RankBound => "rank_bound",
            CheckName::Reconstruction => "reconstruction",
            CheckName::Bridge => "bridge",
            CheckName::CumulativeEndpoint => "cumulative_endpoint",
            CheckName::Parseval => "parseval",
            CheckName::Clr => "clr",
            CheckName::EckartYoung => "eckart_young",
            CheckName::Delocalization => "delocalization",
            CheckName::DelocalizationKappa => "delocalization_kappa",
        }
    }

    pub fn is_informational(self) -> bool {
        matches!(self, CheckName::DelocalizationKappa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: CheckName,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadIdentity {
    pub model_id: String,
    pub layer: u32,
    pub query_head: u32,
    pub kv_head: u32,
    #[serde(rename = "L")]
    pub len: usize,
    pub d_h: usize,
    pub text_id: String,
}

impl HeadIdentity {
    pub fn of(h: &HeadTensors) -> Self {
        Self {
            model_id: h.meta.model_id.clone(),
            layer: h.meta.layer,
            query_head: h.meta.query_head,
            kv_head: h.meta.kv_head,
            len: h.len(),
            d_h: h.head_dim(),
            text_id: h.meta.text_id.clone(),
        }
    }

    /// Family = model id up to the first `-`, `/` or `_`.
    pub fn family(&self) -> &str {
        self.model_id
            .split(['-', '/', '_'])
            .next()
            .filter(|s| !s.is_empty())
            .unwrap_or(&self.model_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IprStats {
    #[serde(with = "vec_finite_or_inf")]
    pub per_vector: Vec<f64>,
    #[serde(with = "finite_or_inf")]
    pub mean: f64,
    #[serde(with = "finite_or_inf")]
    pub sigma2_weighted_mean: f64,
    /// `mu_K d_h^2 kappa^4 / L`.
    #[serde(with = "finite_or_inf")]
    pub bound: f64,
    pub bound_violations: usize,
    #[serde(with = "finite_or_inf")]
    pub centered_key_bound: f64,
    pub centered_key_violations: usize,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub numerical_rank: usize,
    pub bound: usize,
    #[serde(with = "finite_or_inf")]
    pub tail_ratio: f64,
    pub reconstruction_error: f64,
    pub causal_reconstruction_error: f64,
    pub orthonormality_error: f64,
    /// Leading singular values of the row-centered logits (up to `d_h + 2`).
    pub leading_singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSummary {
    pub bridge_ratio: f64,
    pub global_sum_ratio: f64,
    pub n: usize,
    pub degenerate: bool,
    /// `Y(N)`, the cumulative signal's end point.
    pub cumulative_end: f64,
    /// `gamma(0..=min(tau_max, 16))`.
    pub gamma_head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletSummary {
    pub depth: DwtDepth,
    pub levels: usize,
    pub padded_len: usize,
    pub rho: f64,
    pub density: Vec<f64>,
    pub parseval_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub field: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub index: usize,
    pub identity: Option<HeadIdentity>,
    /// Set when the head could not be loaded or analyzed at all.
    pub error: Option<String>,
    /// True when `error` came from files or schemas.
    #[serde(default)]
    pub io_error: bool,
    pub key_geometry: Option<KeyGeometry>,
    pub ipr: Option<IprStats>,
    pub rank: Option<RankSummary>,
    pub bridge: Option<BridgeSummary>,
    pub wavelet: Option<WaveletSummary>,
    pub fidelity: Option<FidelityTable>,
    pub clr_residual: Option<f64>,
    pub diag_mean: Option<f64>,
    pub sink_mean: Option<f64>,
    pub checks: Vec<CheckOutcome>,
    pub skipped: Vec<Skip>,
    pub flags: Vec<String>,
}

impl HeadReport {
    fn empty(index: usize) -> Self {
        Self {
            index,
            identity: None,
            error: None,
            io_error: false,
            key_geometry: None,
            ipr: None,
            rank: None,
            bridge: None,
            wavelet: None,
            fidelity: None,
            clr_residual: None,
            diag_mean: None,
            sink_mean: None,
            checks: Vec::new(),
            skipped: Vec::new(),
            flags: Vec::new(),
        }
    }

    /// Report for a head that failed before analysis.
    pub fn failed(index: usize, identity: Option<HeadIdentity>, err: &Error) -> Self {
        let mut r = Self::empty(index);
        r.identity = identity;
        r.error = Some(err.to_string());
        r.io_error = err.is_io_or_schema();
        r.flags
            .push(if r.io_error { "io_error" } else { "analysis_error" }.to_string());
        r
    }

    pub fn mu_k(&self) -> Option<f64> {
        self.key_geometry.as_ref().map(|g| g.mu_k)
    }

    pub fn check(&self, name: CheckName) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.check == name)
    }

    /// Mechanism-level failures (informational checks excluded).
    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks
            .iter()
            .filter(|c| c.status == CheckStatus::Fail && !c.check.is_informational())
    }

    pub fn has_invariant_failure(&self) -> bool {
        self.failed_checks().next().is_some()
    }

    fn skip(&mut self, field: &str, reason: impl std::fmt::Display) {
        self.skipped.push(Skip {
            field: field.to_string(),
            reason: reason.to_string(),
        });
    }

    fn outcome(&mut self, check: CheckName, pass: bool, detail: String) {
        self.checks.push(CheckOutcome {
            check,
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
        });
    }

    fn skip_check(&mut self, check: CheckName, reason: impl std::fmt::Display) {
        self.checks.push(CheckOutcome {
            check,
            status: CheckStatus::Skipped,
            detail: reason.to_string(),
        });
    }
}

fn inject_row_sum_fault(e: &mut CausalEnergyField) {
    for i in 1..e.len() {
        e.row_mut(i)[0] += INJECTED_ROW_SUM_ERROR;
    }
}

fn max_row_spread(z: &LogitMatrix) -> f64 {
    (0..z.len())
        .map(|i| {
            let row = z.z.row(i);
            row.max() - row.min()
        })
        .fold(0.0, f64::max)
}

/// Runs every analysis and invariant check on one head. Sub-analyses that
/// cannot run are recorded in `skipped` rather than aborting the report.
pub fn analyze_head(index: usize, h: &HeadTensors, config: &RunConfig) -> HeadReport {
    let mut rep = HeadReport::empty(index);
    rep.identity = Some(HeadIdentity::of(h));
    let l = h.len();
    let d_h = h.head_dim();

    let z = match logits(h) {
        Ok(z) => z,
        Err(e) => return HeadReport::failed(index, rep.identity, &e),
    };
    let mut e = causal_energy(&z);
    if config.inject_rowsum_bug {
        inject_row_sum_fault(&mut e);
        rep.flags.push("injected_rowsum_fault".into());
    }
    let et = row_centered(&z);
    let max_z = et.max_abs_logit();

    // Row sums.
    let causal_bad = e.row_sum_violations();
    let full_bad = et.row_sum_violations();
    let worst = (0..l)
        .map(|i| e.row_sum(i).abs() / (1.0 + e.row_max_abs_logit(i)))
        .fold(0.0, f64::max);
    rep.outcome(
        CheckName::RowSum,
        causal_bad.is_empty() && full_bad.is_empty(),
        format!(
            "{} causal / {} full rows over tolerance; worst scaled causal residual {worst:.3e}",
            causal_bad.len(),
            full_bad.len()
        ),
    );
    rep.diag_mean = Some(e.diag_mean());
    match e.sink_mean() {
        Some(s) => rep.sink_mean = Some(s),
        None => rep.skip("sink_mean", "L = 1 has no off-diagonal column entries"),
    }

    // Key geometry and channel decomposition.
    let dec = match channel_decomposition(&et, d_h) {
        Ok(dec) => Some(dec),
        Err(err) => {
            rep.skip("rank", &err);
            rep.skip_check(CheckName::RankBound, &err);
            None
        }
    };
    if let Some(dec) = &dec {
        let tail = dec.tail_ratio();
        let causal_err = dec.causal_reconstruction_error(&e, &et);
        let rec_err = dec.reconstruction_error(&et);
        rep.outcome(
            CheckName::RankBound,
            dec.rank_bound_holds(),
            format!("numerical rank {} (bound {})", dec.numerical_rank, d_h + 1),
        );
        rep.outcome(
            CheckName::Reconstruction,
            causal_err <= tol::CAUSAL_RECONSTRUCTION * (1.0 + max_z) && rec_err <= tol::RECONSTRUCTION,
            format!("relative Frobenius {rec_err:.3e}; causal max {causal_err:.3e}"),
        );
        rep.rank = Some(RankSummary {
            numerical_rank: dec.numerical_rank,
            bound: d_h + 1,
            tail_ratio: tail.unwrap_or(f64::NAN),
            reconstruction_error: rec_err,
            causal_reconstruction_error: causal_err,
            orthonormality_error: dec.orthonormality_error(),
            leading_singular_values: dec.spectrum.iter().take(d_h + 2).copied().collect(),
        });
        if tail.is_none() {
            rep.skip("rank.tail_ratio", format!("L = {l} < d_h + 2"));
        }
        match delocalization_check(h, dec) {
            Ok(d) => {
                if d.rank_deficient {
                    rep.flags.push("rank-deficient K".into());
                }
                let kappa_form = d.violations();
                let centered = d.centered_key_violations();
                rep.outcome(
                    CheckName::Delocalization,
                    centered == 0,
                    format!(
                        "{centered} of {} vectors exceed the centered-key bound {:.4e}",
                        d.ipr_times_l.len(),
                        d.centered_key_bound
                    ),
                );
                rep.outcome(
                    CheckName::DelocalizationKappa,
                    kappa_form == 0,
                    format!(
                        "{kappa_form} of {} vectors exceed mu_K d_h^2 kappa^4 / L = {:.4e}",
                        d.ipr_times_l.len(),
                        d.bound
                    ),
                );
                if kappa_form > 0 {
                    rep.flags.push("kappa_delocalization_bound_exceeded".into());
                }
                rep.ipr = Some(IprStats {
                    per_vector: d.ipr_times_l.clone(),
                    mean: d.mean_ipr_times_l,
                    sigma2_weighted_mean: d.weighted_mean_ipr_times_l,
                    bound: d.bound,
                    bound_violations: kappa_form,
                    centered_key_bound: d.centered_key_bound,
                    centered_key_violations: centered,
                    rank_deficient: d.rank_deficient,
                });
                rep.key_geometry = Some(d.geometry);
            }
            Err(err) => {
                rep.skip("ipr", &err);
                rep.skip_check(CheckName::Delocalization, &err);
                rep.skip_check(CheckName::DelocalizationKappa, &err);
            }
        }
    } else {
        rep.skip_check(CheckName::Reconstruction, "no channel decomposition");
        rep.skip_check(CheckName::Delocalization, "no channel decomposition");
        rep.skip_check(CheckName::DelocalizationKappa, "no channel decomposition");
    }
    if rep.key_geometry.is_none() {
        match crate::geometry::key_incoherence(h.k()) {
            Ok(g) => rep.key_geometry = Some(g),
            Err(err) => rep.skip("key_geometry", err),
        }
    }

    // Flattened signal: bridge and wavelets.
    match flatten(&e) {
        Ok(sig) => {
            rep.outcome(
                CheckName::Flatten,
                sig.n() == crate::energy::flattened_len(l),
                format!("N = {}", sig.n()),
            );
            let y = cumulative_bridge(&sig);
            let end = *y.last().unwrap();
            let scale = abs_mass(&sig.values);
            rep.outcome(
                CheckName::CumulativeEndpoint,
                end.abs() <= tol::ENDPOINT * scale,
                format!("Y(N) = {end:.3e} (scale {scale:.3e})"),
            );
            match bridge_check(&e, config.tau_max) {
                Ok(b) => {
                    rep.outcome(
                        CheckName::Bridge,
                        b.bridge_holds(tol::BRIDGE),
                        format!(
                            "bridge ratio {:.9}, global sum ratio {:.9}",
                            b.bridge_ratio, b.global_sum_ratio
                        ),
                    );
                    if b.degenerate {
                        rep.flags.push("degenerate".into());
                    }
                    rep.bridge = Some(BridgeSummary {
                        bridge_ratio: b.bridge_ratio,
                        global_sum_ratio: b.global_sum_ratio,
                        n: b.n,
                        degenerate: b.degenerate,
                        cumulative_end: end,
                        gamma_head: b.gamma.iter().take(17).copied().collect(),
                    });
                }
                Err(err) => {
                    rep.skip("bridge", &err);
                    rep.skip_check(CheckName::Bridge, err);
                }
            }
            match dwt(&sig, config.dwt_depth) {
                Ok(w) => {
                    rep.outcome(
                        CheckName::Parseval,
                        w.parseval_residual <= tol::PARSEVAL,
                        format!("relative residual {:.3e} at J = {}", w.parseval_residual, w.levels),
                    );
                    rep.wavelet = Some(WaveletSummary {
                        depth: config.dwt_depth,
                        levels: w.levels,
                        padded_len: w.padded_len,
                        rho: w.rho,
                        density: w.density,
                        parseval_residual: w.parseval_residual,
                    });
                }
                Err(err) => {
                    rep.skip("wavelet", &err);
                    rep.skip_check(CheckName::Parseval, err);
                }
            }
        }
        Err(err) => {
            for check in [
                CheckName::Flatten,
                CheckName::CumulativeEndpoint,
                CheckName::Bridge,
                CheckName::Parseval,
            ] {
                rep.skip_check(check, &err);
            }
            rep.skip("bridge", &err);
            rep.skip("wavelet", &err);
        }
    }

    // CLR equivalence.
    let spread = max_row_spread(&z);
    if spread > tol::CLR_MAX_SPREAD {
        let reason = format!("row spread {spread:.1} exceeds {}", tol::CLR_MAX_SPREAD);
        rep.skip("clr_residual", &reason);
        rep.skip_check(CheckName::Clr, reason);
    } else {
        match clr_residual(&z) {
            Ok(r) => {
                rep.clr_residual = Some(r);
                rep.outcome(CheckName::Clr, r <= tol::CLR, format!("max residual {r:.3e}"));
            }
            Err(err) => {
                rep.skip("clr_residual", &err);
                rep.skip_check(CheckName::Clr, err);
            }
        }
    }

    // Fidelity, with the spectrum route as a cross-check on the SVD(Etilde) curve.
    match fidelity_table(h, &config.fidelity_rs) {
        Ok(table) => {
            if let Some(dec) = &dec {
                let worst = table
                    .svd_etilde
                    .points
                    .iter()
                    .map(|&(r, f)| (f - spectrum_fidelity(&dec.spectrum, r)).abs())
                    .fold(0.0, f64::max);
                rep.outcome(
                    CheckName::EckartYoung,
                    worst <= tol::ECKART_YOUNG,
                    format!("max |F_explicit - F_spectrum| = {worst:.3e}"),
                );
            } else {
                rep.skip_check(CheckName::EckartYoung, "no channel decomposition");
            }
            rep.fidelity = Some(table);
        }
        Err(err) => {
            rep.skip("fidelity", &err);
            rep.skip_check(CheckName::EckartYoung, err);
        }
    }
    rep
}

/// Statistics for one group of heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub heads: usize,
    pub mu_k_mean: f64,
    pub mu_k_std: f64,
    pub mu_k_median: f64,
    /// Percentage of heads with `mu_K <= threshold`.
    pub pct_mu_k_within_threshold: f64,
    pub ipr_mean: f64,
    /// Coefficient of variation of per-head mean IPR * L, in percent.
    pub ipr_cv_pct: f64,
    pub bridge_ratio_min: f64,
    pub bridge_ratio_max: f64,
    pub rho_max: f64,
    /// method -> r -> mean F_r.
    pub fidelity_means: BTreeMap<String, BTreeMap<usize, f64>>,
}

fn finite(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    xs.filter(|x| x.is_finite()).collect()
}

fn nan_to_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

impl GroupStats {
    pub fn from_reports(reports: &[&HeadReport], threshold: f64) -> Self {
        let mu: Vec<f64> = finite(reports.iter().filter_map(|r| r.mu_k()));
        let ipr: Vec<f64> = finite(reports.iter().filter_map(|r| r.ipr.as_ref().map(|i| i.mean)));
        let bridges: Vec<f64> = finite(reports.iter().filter_map(|r| r.bridge.as_ref().map(|b| b.bridge_ratio)));
        let rhos: Vec<f64> = finite(reports.iter().filter_map(|r| r.wavelet.as_ref().map(|w| w.rho)));
        let mut fidelity: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for r in reports {
            if let Some(t) = &r.fidelity {
                for c in t.curves() {
                    for &(rank, f) in &c.points {
                        fidelity
                            .entry(c.method.name().to_string())
                            .or_default()
                            .entry(rank)
                            .or_default()
                            .push(f);
                    }
                }
            }
        }
        let ipr_mean = mean(&ipr);
        Self {
            heads: reports.len(),
            mu_k_mean: nan_to_zero(mean(&mu)),
            mu_k_std: nan_to_zero(std_dev(&mu)),
            mu_k_median: nan_to_zero(median(&mu)),
            pct_mu_k_within_threshold: if mu.is_empty() {
                0.0
            } else {
                100.0 * mu.iter().filter(|&&m| m <= threshold).count() as f64 / mu.len() as f64
            },
            ipr_mean: nan_to_zero(ipr_mean),
            ipr_cv_pct: nan_to_zero(100.0 * std_dev(&ipr) / ipr_mean),
            bridge_ratio_min: nan_to_zero(bridges.iter().copied().fold(f64::INFINITY, f64::min)),
            bridge_ratio_max: nan_to_zero(bridges.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            rho_max: nan_to_zero(rhos.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            fidelity_means: fidelity
                .into_iter()
                .map(|(m, by_r)| (m, by_r.into_iter().map(|(r, v)| (r, mean(&v))).collect()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckCounts {
    pub pass: usize,
    pub fail: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub heads: usize,
    pub failed_heads: usize,
    pub config: RunConfig,
    pub overall: GroupStats,
    pub per_model: BTreeMap<String, GroupStats>,
    pub per_family: BTreeMap<String, GroupStats>,
    pub checks: BTreeMap<CheckName, CheckCounts>,
    pub mu_k_alerts: Vec<String>,
}

impl AggregateReport {
    pub fn from_reports(reports: &[HeadReport], config: &RunConfig) -> Self {
        let ok: Vec<&HeadReport> = reports.iter().filter(|r| r.error.is_none()).collect();
        let mut by_model: BTreeMap<String, Vec<&HeadReport>> = BTreeMap::new();
        let mut by_family: BTreeMap<String, Vec<&HeadReport>> = BTreeMap::new();
        for r in &ok {
            if let Some(id) = &r.identity {
                by_model.entry(id.model_id.clone()).or_default().push(r);
                by_family.entry(id.family().to_string()).or_default().push(r);
            }
        }
        let t = config.mu_k_threshold;
        let mut checks: BTreeMap<CheckName, CheckCounts> = BTreeMap::new();
        for r in reports {
            for c in &r.checks {
                let e = checks.entry(c.check).or_default();
                match c.status {
                    CheckStatus::Pass => e.pass += 1,
                    CheckStatus::Fail => e.fail += 1,
                    CheckStatus::Skipped => e.skipped += 1,
                }
            }
        }
        let mu_k_alerts = ok
            .iter()
            .filter(|r| r.mu_k().is_some_and(|m| m > t))
            .map(|r| head_label(r))
            .collect();
        Self {
            heads: reports.len(),
            failed_heads: reports.len() - ok.len(),
            config: config.clone(),
            overall: GroupStats::from_reports(&ok, t),
            per_model: by_model
                .into_iter()
                .map(|(k, v)| (k, GroupStats::from_reports(&v, t)))
                .collect(),
            per_family: by_family
                .into_iter()
                .map(|(k, v)| (k, GroupStats::from_reports(&v, t)))
                .collect(),
            checks,
            mu_k_alerts,
        }
    }
}

pub fn head_label(r: &HeadReport) -> String {
    match &r.identity {
        Some(id) => format!(
            "{:04}_{}_L{}_H{}",
            r.index,
            sanitize(&id.model_id),
            id.layer,
            id.query_head
        ),
        None => format!("{:04}_unknown", r.index),
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Process exit status for a finished run: 2 on any mechanism-level
/// failure, 1 on any I/O or schema error, 0 otherwise.
pub fn exit_code(reports: &[HeadReport]) -> i32 {
    if reports.iter().any(HeadReport::has_invariant_failure) {
        2
    } else if reports.iter().any(|r| r.error.is_some()) {
        1
    } else {
        0
    }
}

/// Loads and analyzes every head of a manifest on a worker pool, keeping
/// manifest order. Heads that fail to load become error reports.
pub fn analyze_manifest(manifest: &Manifest, config: &RunConfig) -> Result<Vec<HeadReport>> {
    config.validate()?;
    let run = || {
        use rayon::prelude::*;
        manifest
            .heads
            .par_iter()
            .enumerate()
            .map(|(idx, entry)| match manifest.read_entry(entry) {
                Ok(h) => analyze_head(idx, &h, config),
                Err(err) => {
                    log::warn!("{}: {err}", entry.label());
                    let identity = HeadIdentity {
                        model_id: entry.model_id.clone(),
                        layer: entry.layer,
                        query_head: entry.query_head,
                        kv_head: entry.kv_head,
                        len: entry.len as usize,
                        d_h: entry.d_h as usize,
                        text_id: manifest.text_id.clone(),
                    };
                    HeadReport::failed(idx, Some(identity), &err)
                }
            })
            .collect::<Vec<_>>()
    };
    run_with_workers(config.workers, run)
}

/// Analyzes in-memory heads (e.g. synthetic fixtures) in order.
pub fn analyze_heads(heads: &[HeadTensors], config: &RunConfig) -> Result<Vec<HeadReport>> {
    config.validate()?;
    run_with_workers(config.workers, || {
        use rayon::prelude::*;
        heads
            .par_iter()
            .enumerate()
            .map(|(i, h)| analyze_head(i, h, config))
            .collect()
    })
}

fn run_with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Per-model median and interquartile range of `mu_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuKSpread {
    pub model_id: String,
    pub heads: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

pub fn mu_k_by_model(reports: &[HeadReport]) -> Vec<MuKSpread> {
    mu_k_spread(
        reports
            .iter()
            .filter_map(|r| Some((r.identity.as_ref()?.model_id.clone(), r.mu_k()?))),
    )
}

/// Groups `(model_id, mu_K)` pairs by model, in model order.
pub fn mu_k_spread(pairs: impl IntoIterator<Item = (String, f64)>) -> Vec<MuKSpread> {
    let mut by_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (model, mu) in pairs {
        by_model.entry(model).or_default().push(mu);
    }
    by_model
        .into_iter()
        .map(|(model_id, v)| MuKSpread {
            model_id,
            heads: v.len(),
            median: median(&v),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        })
        .collect()
}
