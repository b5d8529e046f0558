//! Deterministic reductions shared by every accumulation that feeds a
//! high-precision check.

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Pairwise sum of `f(x)` over `xs`, without an intermediate allocation for
/// short inputs.
pub fn pairwise_sum_by(xs: &[f64], f: impl Fn(f64) -> f64 + Copy) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += f(x);
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum_by(&xs[..mid], f) + pairwise_sum_by(&xs[mid..], f)
    }
}

pub fn sum_of_squares(xs: &[f64]) -> f64 {
    pairwise_sum_by(xs, |x| x * x)
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    (pairwise_sum(&dev) / xs.len() as f64).sqrt()
}

/// Linear-interpolated quantile of an unsorted sample, `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}
