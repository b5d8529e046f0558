//! Logits, the causal energy field, the row-centered logit matrix, the
//! flattened signal, and softmax recovery.
//!
//! The causal field stores only the lower triangle, packed row by row. Row
//! `i` has `n_i = i + 1` entries, one per key position `j <= i`. Entries above
//! the diagonal are not defined for the causal field; consumers that need a
//! full matrix use [`RowCenteredLogit`].

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numeric::{max_abs, pairwise_sum};
use crate::tensor_io::HeadTensors;

/// Absolute-plus-relative tolerance used by the row-sum checks.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// `Z = scale * Q K^T` over the full L x L grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub z: DMatrix<f64>,
    pub scale_used: f64,
}

impl LogitMatrix {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// Wraps an arbitrary square matrix, e.g. for checks that do not start
    /// from a head.
    pub fn from_matrix(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() != z.ncols() || z.nrows() == 0 {
            return Err(Error::Shape(format!(
                "logit matrix must be square and non-empty, got {:?}",
                z.shape()
            )));
        }
        check_finite_logits(&z)?;
        Ok(Self { z, scale_used: 1.0 })
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.z.row(i).iter().copied().collect()
    }

    /// Causal prefix `Z_{i,0..=i}` of row `i`.
    pub fn causal_row(&self, i: usize) -> Vec<f64> {
        (0..=i).map(|j| self.z[(i, j)]).collect()
    }
}

fn check_finite_logits(z: &DMatrix<f64>) -> Result<()> {
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            if !z[(i, j)].is_finite() {
                return Err(Error::NonFinite {
                    what: "logit",
                    row: i,
                    col: j,
                });
            }
        }
    }
    Ok(())
}

pub fn logits(h: &HeadTensors) -> Result<LogitMatrix> {
    let scale = h.softmax_scale();
    let z = (h.q() * h.k().transpose()) * scale;
    check_finite_logits(&z)?;
    Ok(LogitMatrix { z, scale_used: scale })
}

#[inline]
pub(crate) fn row_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

/// Lower-triangular `E_ij = Z_ij - mu_i`, with `mu_i` the causal row mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalEnergyField {
    values: Vec<f64>,
    row_means: Vec<f64>,
    row_max_abs_logit: Vec<f64>,
    len: usize,
}

impl CausalEnergyField {
    /// Context length L.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of entries in row `i`.
    pub fn row_len(&self, i: usize) -> usize {
        i + 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[row_offset(i)..row_offset(i + 1)]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[row_offset(i)..row_offset(i + 1)]
    }

    /// `E_ij` for `j <= i`, `None` on the acausal region.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i < self.len && j <= i).then(|| self.values[row_offset(i) + j])
    }

    pub fn row_means(&self) -> &[f64] {
        &self.row_means
    }

    /// `max_j |Z_ij|` over the causal prefix of row `i`, the scale for the
    /// row-sum tolerance.
    pub fn row_max_abs_logit(&self, i: usize) -> f64 {
        self.row_max_abs_logit[i]
    }

    /// Packed lower triangle, row-major.
    pub fn packed(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.values)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        pairwise_sum(self.row(i))
    }

    /// Rows whose sum exceeds `ROW_SUM_TOL * (1 + max_j |Z_ij|)`.
    pub fn row_sum_violations(&self) -> Vec<usize> {
        (0..self.len)
            .filter(|&i| self.row_sum(i).abs() > ROW_SUM_TOL * (1.0 + self.row_max_abs_logit[i]))
            .collect()
    }

    /// Zero-embeds the causal field into a full L x L matrix.
    pub fn zero_embedded(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len, self.len, |i, j| self.get(i, j).unwrap_or(0.0))
    }

    /// Mean of the diagonal `E_ii`.
    pub fn diag_mean(&self) -> f64 {
        let d: Vec<f64> = (0..self.len).map(|i| self.row(i)[i]).collect();
        pairwise_sum(&d) / self.len as f64
    }

    /// Mean of the first column `E_i0` over rows `i >= 1` (row 0 is always 0).
    pub fn sink_mean(&self) -> Option<f64> {
        if self.len < 2 {
            return None;
        }
        let c: Vec<f64> = (1..self.len).map(|i| self.row(i)[0]).collect();
        Some(pairwise_sum(&c) / c.len() as f64)
    }
}

pub fn causal_energy(z: &LogitMatrix) -> CausalEnergyField {
    let len = z.len();
    let mut values = Vec::with_capacity(row_offset(len));
    let mut row_means = Vec::with_capacity(len);
    let mut row_max_abs_logit = Vec::with_capacity(len);
    for i in 0..len {
        let row = z.causal_row(i);
        let mu = pairwise_sum(&row) / row.len() as f64;
        row_means.push(mu);
        row_max_abs_logit.push(max_abs(&row));
        if i == 0 {
            // Single-entry centering is exact.
            values.push(0.0);
        } else {
            values.extend(row.iter().map(|&x| x - mu));
        }
    }
    CausalEnergyField {
        values,
        row_means,
        row_max_abs_logit,
        len,
    }
}

/// Full L x L matrix centered by full-row means.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCenteredLogit {
    pub etilde: DMatrix<f64>,
    pub full_row_means: Vec<f64>,
    row_max_abs_logit: Vec<f64>,
}

impl RowCenteredLogit {
    pub fn len(&self) -> usize {
        self.etilde.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.etilde.nrows() == 0
    }

    pub fn row_max_abs_logit(&self, i: usize) -> f64 {
        self.row_max_abs_logit[i]
    }

    pub fn max_abs_logit(&self) -> f64 {
        max_abs(&self.row_max_abs_logit)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        let row: Vec<f64> = self.etilde.row(i).iter().copied().collect();
        pairwise_sum(&row)
    }

    pub fn row_sum_violations(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.row_sum(i).abs() > ROW_SUM_TOL * (1.0 + self.row_max_abs_logit[i]))
            .collect()
    }

    /// Per-row constant `E_ij - Etilde_ij = fullmean_i - causalmean_i`.
    pub fn causal_shift(&self, e: &CausalEnergyField) -> Vec<f64> {
        self.full_row_means
            .iter()
            .zip(e.row_means())
            .map(|(full, causal)| full - causal)
            .collect()
    }
}

pub fn row_centered(z: &LogitMatrix) -> RowCenteredLogit {
    let len = z.len();
    let mut etilde = z.z.clone();
    let mut full_row_means = Vec::with_capacity(len);
    let mut row_max_abs_logit = Vec::with_capacity(len);
    for i in 0..len {
        let row = z.row(i);
        let mu = pairwise_sum(&row) / len as f64;
        full_row_means.push(mu);
        row_max_abs_logit.push(max_abs(&row));
        for j in 0..len {
            etilde[(i, j)] -= mu;
        }
    }
    RowCenteredLogit {
        etilde,
        full_row_means,
        row_max_abs_logit,
    }
}

/// Row-by-row causal read-out starting at row 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedSignal {
    pub values: Vec<f64>,
    len: usize,
}

impl FlattenedSignal {
    /// Wraps an arbitrary sequence (used for signals that do not come from a
    /// field, e.g. in tests and wavelet checks). `context_len` is 0 when there
    /// is no underlying field.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values, len: 0 }
    }

    /// Signal length N.
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Context length L of the source field (0 for raw signals).
    pub fn context_len(&self) -> usize {
        self.len
    }

    /// Maps flat position `t` (0-based) to its `(i, j)` cell.
    pub fn index(&self, t: usize) -> (usize, usize) {
        flat_index(t)
    }

    pub fn index_map(&self) -> Vec<(usize, usize)> {
        (0..self.n()).map(flat_index).collect()
    }
}

/// `(i, j)` of flat position `t`, counting from row 1.
pub fn flat_index(t: usize) -> (usize, usize) {
    // Position t sits at packed offset t + 1 (row 0 is skipped).
    let p = t + 1;
    let mut i = (((8 * p + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    while row_offset(i + 1) <= p {
        i += 1;
    }
    while row_offset(i) > p {
        i -= 1;
    }
    (i, p - row_offset(i))
}

pub fn flattened_len(len: usize) -> usize {
    (len * (len + 1) / 2).saturating_sub(1)
}

pub fn flatten(e: &CausalEnergyField) -> Result<FlattenedSignal> {
    if e.len() < 2 {
        return Err(Error::EmptySignal);
    }
    Ok(FlattenedSignal {
        values: e.packed()[1..].to_vec(),
        len: e.len(),
    })
}

/// Causal flattening of any square matrix, rows 1..L-1, columns 0..=i.
pub fn flatten_causal(m: &DMatrix<f64>) -> Result<FlattenedSignal> {
    let len = m.nrows();
    if len < 2 {
        return Err(Error::EmptySignal);
    }
    let mut values = Vec::with_capacity(flattened_len(len));
    for i in 1..len {
        for j in 0..=i {
            values.push(m[(i, j)]);
        }
    }
    Ok(FlattenedSignal { values, len })
}

/// Numerically stable softmax (row max subtracted before exponentiation).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s = pairwise_sum(&exps);
    exps.into_iter().map(|x| x / s).collect()
}

/// Attention probabilities of causal row `i`, recovered from the energy field.
pub fn attention_probs(e: &CausalEnergyField, i: usize) -> Result<Vec<f64>> {
    if i >= e.len() {
        return Err(Error::InvalidArgument(format!(
            "row {i} out of range for L = {}",
            e.len()
        )));
    }
    Ok(softmax(e.row(i)))
}

/// Max residual between the centered log-ratio of full-row softmax
/// probabilities and the row-centered logits.
pub fn clr_residual(z: &LogitMatrix) -> Result<f64> {
    let et = row_centered(z);
    let len = z.len();
    let mut worst = 0.0_f64;
    for i in 0..len {
        let p = softmax(&z.row(i));
        let mut logs = Vec::with_capacity(len);
        for &pij in &p {
            if pij <= 0.0 {
                return Err(Error::ClrUnderflow { row: i });
            }
            logs.push(pij.ln());
        }
        let mean_log = pairwise_sum(&logs) / len as f64;
        for (j, &lp) in logs.iter().enumerate() {
            worst = worst.max((lp - mean_log - et.etilde[(i, j)]).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::HeadMeta;

    fn head(q: &[f64], k: &[f64], l: usize, d: usize, scale: f64) -> HeadTensors {
        HeadTensors::new(
            DMatrix::from_row_slice(l, d, q),
            DMatrix::from_row_slice(l, d, k),
            scale,
            HeadMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn hand_logits() {
        let z = logits(&head(&[1.0, 2.0], &[3.0, 4.0], 2, 1, 1.0)).unwrap();
        assert_eq!(z.z, DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 6.0, 8.0]));
        let z0 = logits(&head(&[0.0, 0.0], &[3.0, 4.0], 2, 1, 1.0)).unwrap();
        assert!(z0.z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn overflowing_logits_name_the_cell() {
        let h = head(&[1e200, 1.0], &[1e200, 1.0], 2, 1, 1.0);
        match logits(&h) {
            Err(Error::NonFinite { row: 0, col: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn causal_row_centering() {
        let z = LogitMatrix::from_matrix(DMatrix::from_row_slice(
            3,
            3,
            &[5.0, 9.0, 9.0, 1.0, 1.0, 9.0, 1.0, 2.0, 3.0],
        ))
        .unwrap();
        let e = causal_energy(&z);
        assert_eq!(e.row(0), &[0.0]);
        assert_eq!(e.row(2), &[-1.0, 0.0, 1.0]);
        assert_eq!(e.row_means()[2], 2.0);
        assert_eq!(e.get(0, 1), None);
        assert!(e.row_sum_violations().is_empty());
    }

    #[test]
    fn full_row_centering() {
        let z = LogitMatrix::from_matrix(DMatrix::from_row_slice(1, 1, &[7.0])).unwrap();
        assert_eq!(row_centered(&z).etilde[(0, 0)], 0.0);
        let z = LogitMatrix::from_matrix(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 0.0, 0.0, 3.0],
        ))
        .unwrap();
        let et = row_centered(&z);
        assert_eq!(
            et.etilde.row(0).iter().copied().collect::<Vec<_>>(),
            vec![-1.0, 0.0, 1.0]
        );
        assert!(et.etilde.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flatten_order_and_length() {
        let z = LogitMatrix::from_matrix(DMatrix::from_fn(3, 3, |i, j| (10 * i + j) as f64)).unwrap();
        let e = causal_energy(&z);
        let f = flatten(&e).unwrap();
        assert_eq!(f.n(), 5);
        assert_eq!(f.index_map(), vec![(1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]);
        assert_eq!(f.values[0], e.get(1, 0).unwrap());
        assert_eq!(f.values[4], e.get(2, 2).unwrap());
        assert_eq!(flattened_len(2), 2);
        assert_eq!(flattened_len(256), 32895);
    }

    #[test]
    fn flatten_rejects_single_row() {
        let z = LogitMatrix::from_matrix(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let err = flatten(&causal_energy(&z)).unwrap_err();
        assert!(err.to_string().contains("empty flattened signal"));
    }

    #[test]
    fn flat_index_matches_enumeration() {
        let mut t = 0;
        for i in 1..200 {
            for j in 0..=i {
                assert_eq!(flat_index(t), (i, j));
                t += 1;
            }
        }
    }

    #[test]
    fn softmax_reference_values() {
        // Oracle: exp(x) / sum exp(x) evaluated directly.
        let xs = [-1.0_f64, 0.0, 1.0];
        let denom: f64 = xs.iter().map(|x| x.exp()).sum();
        let oracle: Vec<f64> = xs.iter().map(|x| x.exp() / denom).collect();
        let p = softmax(&xs);
        for (a, b) in p.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        let frozen = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in p.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(softmax(&[0.0]), vec![1.0]);
    }

    #[test]
    fn clr_small_cases() {
        let z = LogitMatrix::from_matrix(DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(clr_residual(&z).unwrap(), 0.0);
        let z = LogitMatrix::from_matrix(DMatrix::from_row_slice(
            3,
            3,
            &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0],
        ))
        .unwrap();
        assert!(clr_residual(&z).unwrap() <= 1e-12);
    }

    #[test]
    fn clr_underflow_is_reported() {
        let z = LogitMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 2000.0, 0.0, 0.0])).unwrap();
        assert!(matches!(clr_residual(&z), Err(Error::ClrUnderflow { row: 0 })));
    }
}
