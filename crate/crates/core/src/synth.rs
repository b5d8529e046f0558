//! Deterministic synthetic heads.
//!
//! Every generator draws from one ChaCha20 stream (RFC 8439 block function,
//! 20 rounds) seeded with `rand_core`'s `seed_from_u64(seed)`. Each `u64` is
//! turned into a uniform as `(x >> 11) * 2^-53`; standard normals come from
//! the Box-Muller transform on consecutive uniform pairs `(u1, u2)` with
//! `u1 <- 1 - u1` so the logarithm never sees zero, emitting
//! `r cos(2 pi u2)` and then `r sin(2 pi u2)` with `r = sqrt(-2 ln u1)`.
//!
//! Draw order is fixed: Q row-major, then K row-major, then any
//! kind-specific factors in the order documented on each generator. Other
//! implementations reproduce a fixture from `(kind, L, d_h, seed, params)`
//! by following the same recipe.

use nalgebra::DMatrix;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{HeadMeta, HeadTensors};

/// Mean sink energy the calibration aims for.
pub const SINK_TARGET: f64 = 6.1;
/// Acceptable band for the calibrated mean sink energy.
pub const SINK_BAND: (f64, f64) = (5.0, 7.0);
const MAX_BISECTION_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Gaussian,
    Sink,
    Concentrated,
    RankDeficient,
    LowRankNoise,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Gaussian => "gaussian",
            SynthKind::Sink => "sink",
            SynthKind::Concentrated => "concentrated",
            SynthKind::RankDeficient => "rank_deficient",
            SynthKind::LowRankNoise => "low_rank_noise",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "gaussian" => Ok(SynthKind::Gaussian),
            "sink" => Ok(SynthKind::Sink),
            "concentrated" => Ok(SynthKind::Concentrated),
            "rank_deficient" => Ok(SynthKind::RankDeficient),
            "low_rank_noise" => Ok(SynthKind::LowRankNoise),
            other => Err(Error::InvalidArgument(format!("unknown synth kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Norm of the sink key; `None` calibrates it to [`SINK_TARGET`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sink_strength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concentration_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_level: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    #[serde(rename = "L")]
    pub len: usize,
    pub d_h: usize,
    pub seed: u64,
    #[serde(default)]
    pub params: SynthParams,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, len: usize, d_h: usize, seed: u64) -> Self {
        Self {
            kind,
            len,
            d_h,
            seed,
            params: SynthParams::default(),
        }
    }

    pub fn gaussian(len: usize, d_h: usize, seed: u64) -> Self {
        Self::new(SynthKind::Gaussian, len, d_h, seed)
    }

    pub fn with_params(mut self, params: SynthParams) -> Self {
        self.params = params;
        self
    }

    fn meta(&self) -> HeadMeta {
        HeadMeta {
            model_id: format!("synth-{}", self.kind.name()),
            layer: 0,
            query_head: 0,
            kv_head: 0,
            text_id: format!("seed-{}", self.seed),
        }
    }
}

/// Standard normal stream over ChaCha20.
pub struct NormalStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `rows x cols` matrix filled row-major.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let values: Vec<f64> = (0..rows * cols).map(|_| self.next_normal()).collect();
        DMatrix::from_row_slice(rows, cols, &values)
    }

    pub fn vector(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }
}

fn check_dims(spec: &SynthSpec) -> Result<()> {
    if spec.len == 0 || spec.d_h == 0 {
        return Err(Error::Shape(format!(
            "L = {} and d_h = {} must be >= 1",
            spec.len, spec.d_h
        )));
    }
    Ok(())
}

fn default_scale(d_h: usize) -> f64 {
    1.0 / (d_h as f64).sqrt()
}

/// i.i.d. standard normal Q and K, scale `1/sqrt(d_h)`.
pub fn gaussian_head(spec: &SynthSpec) -> Result<HeadTensors> {
    check_dims(spec)?;
    let mut rng = NormalStream::new(spec.seed);
    let q = rng.matrix(spec.len, spec.d_h);
    let k = rng.matrix(spec.len, spec.d_h);
    HeadTensors::new(q, k, default_scale(spec.d_h), spec.meta())
}

/// Unit vector along the mean query (falls back to the first axis when the
/// mean vanishes).
fn mean_query_direction(q: &DMatrix<f64>) -> Vec<f64> {
    let mean: Vec<f64> = (0..q.ncols()).map(|c| q.column(c).mean()).collect();
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        mean.into_iter().map(|x| x / norm).collect()
    } else {
        let mut e = vec![0.0; q.ncols()];
        e[0] = 1.0;
        e
    }
}

fn set_sink_key(k: &mut DMatrix<f64>, direction: &[f64], strength: f64) {
    for (c, d) in direction.iter().enumerate() {
        k[(0, c)] = strength * d;
    }
}

/// Mean of `E_{i,0}` over rows `i >= 1`, in O(L d_h) via key prefix sums.
pub fn sink_column_mean(q: &DMatrix<f64>, k: &DMatrix<f64>, scale: f64) -> f64 {
    let (l, d) = q.shape();
    if l < 2 {
        return 0.0;
    }
    let mut prefix = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..l {
        for c in 0..d {
            prefix[c] += k[(i, c)];
        }
        if i == 0 {
            continue;
        }
        let mut z0 = 0.0;
        let mut zsum = 0.0;
        for c in 0..d {
            z0 += q[(i, c)] * k[(0, c)];
            zsum += q[(i, c)] * prefix[c];
        }
        total += scale * (z0 - zsum / (i + 1) as f64);
    }
    total / (l - 1) as f64
}

/// Finds the sink strength whose mean `E_{i,0}` hits `target` by bisection.
pub fn calibrate_sink_strength(q: &DMatrix<f64>, k: &DMatrix<f64>, scale: f64, target: f64) -> Result<f64> {
    let dir = mean_query_direction(q);
    let mut work = k.clone();
    let mut eval = |s: f64| {
        set_sink_key(&mut work, &dir, s);
        sink_column_mean(q, &work, scale)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while eval(hi) < target {
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::InvalidArgument(
                "sink calibration failed: mean sink energy does not grow with strength".into(),
            ));
        }
    }
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if eval(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Gaussian base with `k_0` replaced by `strength` times the unit mean-query
/// direction. No draws beyond the Gaussian base.
pub fn sink_head(spec: &SynthSpec) -> Result<HeadTensors> {
    let base = gaussian_head(spec)?;
    if spec.params.sink_strength == Some(0.0) {
        return Ok(base);
    }
    let (q, mut k, scale, meta) = base.into_parts();
    let strength = match spec.params.sink_strength {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => {
            return Err(Error::InvalidArgument(format!(
                "sink_strength must be positive, got {s}"
            )))
        }
        None => calibrate_sink_strength(&q, &k, scale, SINK_TARGET)?,
    };
    let dir = mean_query_direction(&q);
    set_sink_key(&mut k, &dir, strength);
    HeadTensors::new(q, k, scale, meta)
}

/// Factor `c` that gives `mu_K = target` when every base key has the same
/// norm: `mu_K = L c^2 / (c^2 + L - 1)`.
pub fn concentration_for_mu_k(target: f64, len: usize) -> Result<f64> {
    let l = len as f64;
    if !(target >= 1.0 && target < l) {
        return Err(Error::InvalidArgument(format!(
            "target mu_K {target} must lie in [1, {l})"
        )));
    }
    Ok((target * (l - 1.0) / (l - target)).sqrt())
}

/// Gaussian base with key row `target_position` (default 0) scaled by
/// `concentration_factor` (default 1).
pub fn concentrated_head(spec: &SynthSpec) -> Result<HeadTensors> {
    let pos = spec.params.target_position.unwrap_or(0);
    if pos >= spec.len {
        return Err(Error::InvalidArgument(format!(
            "target_position {pos} out of range for L = {}",
            spec.len
        )));
    }
    let c = spec.params.concentration_factor.unwrap_or(1.0);
    if !(c >= 1.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "concentration_factor must be >= 1, got {c}"
        )));
    }
    let (q, mut k, scale, meta) = gaussian_head(spec)?.into_parts();
    k.row_mut(pos).scale_mut(c);
    HeadTensors::new(q, k, scale, meta)
}

fn target_rank(spec: &SynthSpec, default: usize) -> Result<usize> {
    let r = spec.params.target_rank.unwrap_or(default.min(spec.d_h));
    if r == 0 || r > spec.d_h {
        return Err(Error::Shape(format!("target_rank {r} must lie in 1..={}", spec.d_h)));
    }
    Ok(r)
}

/// Gaussian Q; `K = A B / sqrt(r)` with A (L x r) and B (r x d_h) drawn
/// after Q (A first, then B). K has rank `target_rank` (default 2).
pub fn rank_deficient_head(spec: &SynthSpec) -> Result<HeadTensors> {
    check_dims(spec)?;
    let r = target_rank(spec, 2)?;
    let mut rng = NormalStream::new(spec.seed);
    let q = rng.matrix(spec.len, spec.d_h);
    let a = rng.matrix(spec.len, r);
    let b = rng.matrix(r, spec.d_h);
    let k = (a * b) / (r as f64).sqrt();
    HeadTensors::new(q, k, default_scale(spec.d_h), spec.meta())
}

/// Rank-`r` logit structure plus noise: `Q = [A | n G_q]`, `K = [B | G_k]`
/// so that `Z = scale (A B^T + n G_q G_k^T)`. Draw order: A, B (L x r each),
/// then G_q, G_k (L x (d_h - r) each). Defaults: r = 3, n = 0.1.
pub fn low_rank_noise_head(spec: &SynthSpec) -> Result<HeadTensors> {
    check_dims(spec)?;
    let r = target_rank(spec, 3)?;
    let noise = spec.params.noise_level.unwrap_or(0.1);
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_level must be >= 0, got {noise}")));
    }
    let mut rng = NormalStream::new(spec.seed);
    let a = rng.matrix(spec.len, r);
    let b = rng.matrix(spec.len, r);
    let rest = spec.d_h - r;
    let gq = rng.matrix(spec.len, rest) * noise;
    let gk = rng.matrix(spec.len, rest);
    let mut q = DMatrix::zeros(spec.len, spec.d_h);
    let mut k = DMatrix::zeros(spec.len, spec.d_h);
    q.columns_mut(0, r).copy_from(&a);
    k.columns_mut(0, r).copy_from(&b);
    q.columns_mut(r, rest).copy_from(&gq);
    k.columns_mut(r, rest).copy_from(&gk);
    HeadTensors::new(q, k, default_scale(spec.d_h), spec.meta())
}

pub fn generate(spec: &SynthSpec) -> Result<HeadTensors> {
    match spec.kind {
        SynthKind::Gaussian => gaussian_head(spec),
        SynthKind::Sink => sink_head(spec),
        SynthKind::Concentrated => concentrated_head(spec),
        SynthKind::RankDeficient => rank_deficient_head(spec),
        SynthKind::LowRankNoise => low_rank_noise_head(spec),
    }
}
