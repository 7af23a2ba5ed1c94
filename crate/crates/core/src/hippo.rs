//! HiPPO-LegS cumulative state.
//!
//! The state after `k` samples holds the coefficients of the history
//! projected onto the first `N` Legendre polynomials rescaled to the elapsed
//! interval, with basis functions `sqrt(2n+1) · P_n(2s/t − 1)`. It is updated
//! one sample at a time by
//!
//! ```text
//! c ← (I − A/k) c + (1/k) B x,   k = samples consumed so far + 1
//! ```
//!
//! starting from `c = 0`, so the divisor is never zero. Everything here runs in
//! float64.
//!
//! `A` is lower triangular with diagonal `n + 1`, so step `k` multiplies mode
//! `k − 1` by exactly zero and rebuilds it from lower modes only. Before that
//! step a mode carries a transient that grows like a binomial coefficient
//! (beyond 1e40 for N = 64) and never reaches any mode that survives. Modes
//! `n ≥ consumed` are therefore held at zero: the settled modes are unchanged
//! in exact arithmetic and the transient can no longer overflow or leave
//! rounding residue behind.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HippoError {
    #[error("HiPPO order must be at least 1")]
    ZeroOrder,
    #[error("cannot scan an empty series")]
    Empty,
    #[error("least-squares projection of order {order} needs at least {order} samples, got {len}")]
    RankDeficient { len: usize, order: usize },
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
}

/// LegS transition pair `(A, B)` of a fixed order.
#[derive(Clone, Debug)]
pub struct LegsOperator {
    order: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    /// `sqrt(2n+1)`, shared by the strictly-lower part of `A` and by `B`.
    root: Vec<f64>,
}

impl LegsOperator {
    pub fn new(order: usize) -> Result<Self, HippoError> {
        if order == 0 {
            return Err(HippoError::ZeroOrder);
        }
        let root: Vec<f64> = (0..order).map(|n| ((2 * n + 1) as f64).sqrt()).collect();
        let mut a = vec![0.0; order * order];
        for n in 0..order {
            for k in 0..n {
                a[n * order + k] = root[n] * root[k];
            }
            a[n * order + n] = (n + 1) as f64;
        }
        Ok(Self {
            order,
            a,
            b: root.clone(),
            root,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn a(&self, n: usize, k: usize) -> f64 {
        self.a[n * self.order + k]
    }

    /// Row-major `N×N` transition matrix.
    pub fn a_matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `A·c` in O(N), using `A[n][k] = r_n r_k` below the diagonal.
    pub fn apply_a(&self, c: &[f64], out: &mut [f64]) {
        let mut prefix = 0.0;
        for n in 0..self.order {
            out[n] = self.root[n] * prefix + (n + 1) as f64 * c[n];
            prefix += self.root[n] * c[n];
        }
    }

    /// One recurrence step in place for a single channel; `k ≥ 1`.
    fn advance(&self, c: &mut [f64], x: f64, k: usize, scratch: &mut [f64]) {
        debug_assert!(k >= 1);
        let inv = 1.0 / k as f64;
        self.apply_a(c, scratch);
        let settled = k.min(self.order);
        for n in 0..settled {
            c[n] = c[n] - inv * scratch[n] + inv * self.b[n] * x;
        }
        c[settled..].fill(0.0);
    }
}

/// Coefficients of every channel after consuming `consumed` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct HippoState {
    order: usize,
    /// Row-major `channels × order`.
    coeffs: Vec<f64>,
    consumed: usize,
}

impl HippoState {
    /// The zero state that precedes the first sample.
    pub fn new(channels: usize, order: usize) -> Self {
        Self {
            order,
            coeffs: vec![0.0; channels * order],
            consumed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.coeffs.len() / self.order
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Samples consumed so far. The next update divides by `consumed() + 1`.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.coeffs[c * self.order..(c + 1) * self.order]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Returns the state after consuming one more sample per channel.
    pub fn step(&self, x: &[f64], op: &LegsOperator) -> Result<Self, HippoError> {
        let mut next = self.clone();
        next.advance(x, op)?;
        Ok(next)
    }

    pub fn advance(&mut self, x: &[f64], op: &LegsOperator) -> Result<(), HippoError> {
        if op.order() != self.order {
            return Err(HippoError::Mismatch(format!(
                "operator order {} vs state order {}",
                op.order(),
                self.order
            )));
        }
        if x.len() != self.channels() {
            return Err(HippoError::Mismatch(format!(
                "{} inputs for {} channels",
                x.len(),
                self.channels()
            )));
        }
        let k = self.consumed + 1;
        let mut scratch = vec![0.0; self.order];
        for (c, &xv) in self.coeffs.chunks_mut(self.order).zip(x) {
            op.advance(c, xv, k, &mut scratch);
        }
        self.consumed = k;
        Ok(())
    }
}

/// Scans a `T×C` row-major series; `states[t]` has consumed `x[0..=t]`.
pub fn scan(
    values: &[f64],
    channels: usize,
    op: &LegsOperator,
) -> Result<Vec<HippoState>, HippoError> {
    if channels == 0 || values.is_empty() {
        return Err(HippoError::Empty);
    }
    if values.len() % channels != 0 {
        return Err(HippoError::Mismatch(format!(
            "{} values for {channels} channels",
            values.len()
        )));
    }
    let mut state = HippoState::new(channels, op.order());
    let mut out = Vec::with_capacity(values.len() / channels);
    for row in values.chunks(channels) {
        state.advance(row, op)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Prefix states of a series indexed by the number of samples consumed, so
/// `prefix(0)` is the zero state and `prefix(t)` summarizes `x[0..t)`.
#[derive(Clone, Debug)]
pub struct PrefixStates {
    order: usize,
    channels: usize,
    len: usize,
    /// Slot of each prefix length in `data`, or `None` when not retained.
    slots: Vec<Option<usize>>,
    data: Vec<f64>,
}

impl PrefixStates {
    /// Scans `values` (`T×C`, row-major) and keeps every prefix `0..=T`.
    pub fn build(values: &[f64], channels: usize, op: &LegsOperator) -> Result<Self, HippoError> {
        Self::build_retaining(values, channels, op, |_| true)
    }

    /// Like [`PrefixStates::build`] but stores only the prefixes accepted by `keep`.
    pub fn build_retaining(
        values: &[f64],
        channels: usize,
        op: &LegsOperator,
        keep: impl Fn(usize) -> bool + Sync,
    ) -> Result<Self, HippoError> {
        if channels == 0 || values.is_empty() {
            return Err(HippoError::Empty);
        }
        if values.len() % channels != 0 {
            return Err(HippoError::Mismatch(format!(
                "{} values for {channels} channels",
                values.len()
            )));
        }
        let len = values.len() / channels;
        let order = op.order();
        let mut slots = Vec::with_capacity(len + 1);
        let mut kept = 0;
        for m in 0..=len {
            if keep(m) {
                slots.push(Some(kept));
                kept += 1;
            } else {
                slots.push(None);
            }
        }

        // Channels are independent: scan each one into its own buffer, then interleave.
        let per_channel: Vec<Vec<f64>> = (0..channels)
            .into_par_iter()
            .map(|ch| {
                let mut buf = Vec::with_capacity(kept * order);
                let mut c = vec![0.0; order];
                let mut scratch = vec![0.0; order];
                if slots[0].is_some() {
                    buf.extend_from_slice(&c);
                }
                for t in 0..len {
                    op.advance(&mut c, values[t * channels + ch], t + 1, &mut scratch);
                    if slots[t + 1].is_some() {
                        buf.extend_from_slice(&c);
                    }
                }
                buf
            })
            .collect();

        let mut data = vec![0.0; kept * channels * order];
        for (ch, buf) in per_channel.iter().enumerate() {
            for slot in 0..kept {
                let dst = (slot * channels + ch) * order;
                data[dst..dst + order].copy_from_slice(&buf[slot * order..(slot + 1) * order]);
            }
        }
        Ok(Self {
            order,
            channels,
            len,
            slots,
            data,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Length of the scanned series.
    pub fn series_len(&self) -> usize {
        self.len
    }

    /// `C×N` coefficients after consuming `consumed` samples, if retained.
    pub fn prefix(&self, consumed: usize) -> Option<&[f64]> {
        let slot = (*self.slots.get(consumed)?)?;
        let width = self.channels * self.order;
        Some(&self.data[slot * width..(slot + 1) * width])
    }
}

/// Evaluates `P_0(u)..P_{N-1}(u)` by the three-term recurrence.
pub fn legendre_values(order: usize, u: f64, out: &mut [f64]) {
    if order == 0 {
        return;
    }
    out[0] = 1.0;
    if order > 1 {
        out[1] = u;
    }
    for n in 1..order.saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = ((2.0 * nf + 1.0) * u * out[n] - nf * out[n - 1]) / (nf + 1.0);
    }
}

/// Midpoints `(i + 0.5)/K` of `K` equal cells on the elapsed interval, as fractions.
pub fn midpoint_grid(samples: usize) -> Vec<f64> {
    (0..samples)
        .map(|i| (i as f64 + 0.5) / samples as f64)
        .collect()
}

fn basis_row(order: usize, s: f64, out: &mut [f64]) {
    legendre_values(order, 2.0 * s - 1.0, out);
    for (n, v) in out.iter_mut().enumerate() {
        *v *= ((2 * n + 1) as f64).sqrt();
    }
}

/// Evaluates the expansion `Σ_n c_n sqrt(2n+1) P_n(2s − 1)` at each fraction `s ∈ [0, 1]`.
pub fn reconstruct(coeffs: &[f64], grid: &[f64]) -> Vec<f64> {
    let order = coeffs.len();
    let mut row = vec![0.0; order];
    grid.iter()
        .map(|&s| {
            basis_row(order, s, &mut row);
            row.iter().zip(coeffs).map(|(b, c)| b * c).sum()
        })
        .collect()
}

/// Independent reference for the recurrence: least-squares fit of the first
/// `order` scaled Legendre basis functions to the samples, placed at cell
/// midpoints of the elapsed interval. Solved by Householder QR.
pub fn project_oracle(series: &[f64], order: usize) -> Result<Vec<f64>, HippoError> {
    if order == 0 {
        return Err(HippoError::ZeroOrder);
    }
    let rows = series.len();
    if rows < order {
        return Err(HippoError::RankDeficient { len: rows, order });
    }
    let grid = midpoint_grid(rows);
    // Column-major design matrix keeps each Householder sweep contiguous.
    let mut cols: Vec<Vec<f64>> = vec![vec![0.0; rows]; order];
    let mut row = vec![0.0; order];
    for (i, &s) in grid.iter().enumerate() {
        basis_row(order, s, &mut row);
        for (n, &v) in row.iter().enumerate() {
            cols[n][i] = v;
        }
    }
    let mut rhs = series.to_vec();
    let scale = (rows as f64).sqrt();
    for j in 0..order {
        let norm = cols[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 * scale {
            return Err(HippoError::RankDeficient { len: rows, order });
        }
        let alpha = if cols[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for col in cols.iter_mut().skip(j) {
                let dot: f64 = v.iter().zip(&col[j..]).map(|(a, b)| a * b).sum();
                let f = 2.0 * dot / vnorm2;
                for (c, vi) in col[j..].iter_mut().zip(&v) {
                    *c -= f * vi;
                }
            }
            let dot: f64 = v.iter().zip(&rhs[j..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            for (r, vi) in rhs[j..].iter_mut().zip(&v) {
                *r -= f * vi;
            }
        }
    }
    let mut coeffs = vec![0.0; order];
    for j in (0..order).rev() {
        let mut acc = rhs[j];
        for k in j + 1..order {
            acc -= cols[k][j] * coeffs[k];
        }
        coeffs[j] = acc / cols[j][j];
    }
    Ok(coeffs)
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_channel_state(series: &[f64], order: usize) -> Vec<f64> {
        let op = LegsOperator::new(order).unwrap();
        let mut st = HippoState::new(1, order);
        for &x in series {
            st.advance(&[x], &op).unwrap();
        }
        st.coeffs().to_vec()
    }

    #[test]
    fn order_two_matrices() {
        let op = LegsOperator::new(2).unwrap();
        let s3 = 3f64.sqrt();
        assert_eq!(op.a_matrix(), &[1.0, 0.0, s3, 2.0]);
        assert_eq!(op.b(), &[1.0, s3]);
    }

    #[test]
    fn order_one_and_three() {
        let op = LegsOperator::new(1).unwrap();
        assert_eq!(op.a_matrix(), &[1.0]);
        assert_eq!(op.b(), &[1.0]);
        let op = LegsOperator::new(3).unwrap();
        assert_eq!(op.a(2, 0), 5f64.sqrt());
        assert_eq!(op.a(2, 1), 5f64.sqrt() * 3f64.sqrt());
        assert_eq!(op.a(2, 2), 3.0);
        assert_eq!(LegsOperator::new(0).unwrap_err(), HippoError::ZeroOrder);
    }

    #[test]
    fn structure_holds_up_to_1024() {
        let op = LegsOperator::new(1024).unwrap();
        for n in (0..1024).step_by(37) {
            for k in (0..1024).step_by(41) {
                let want = if n > k {
                    ((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt()
                } else if n == k {
                    (n + 1) as f64
                } else {
                    0.0
                };
                assert_eq!(op.a(n, k), want);
            }
            assert_eq!(op.b()[n], ((2 * n + 1) as f64).sqrt());
        }
    }

    #[test]
    fn fast_transition_matches_dense() {
        let op = LegsOperator::new(40).unwrap();
        let c: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let mut fast = vec![0.0; 40];
        op.apply_a(&c, &mut fast);
        for n in 0..40 {
            let dense: f64 = (0..40).map(|k| op.a(n, k) * c[k]).sum();
            assert!((dense - fast[n]).abs() <= 1e-12 * dense.abs().max(1.0));
        }
    }

    #[test]
    fn settled_modes_match_the_dense_recurrence() {
        // Literal (I − A/k)c + Bx/k with no truncation; for N = 6 the transient
        // stays small, and after N samples every mode has settled.
        let order = 6;
        let op = LegsOperator::new(order).unwrap();
        let xs: Vec<f64> = (0..80)
            .map(|i| (i as f64 * 0.21).sin() + 0.1 * i as f64)
            .collect();
        let mut dense = vec![0.0; order];
        for (i, &x) in xs.iter().enumerate() {
            let k = (i + 1) as f64;
            let next: Vec<f64> = (0..order)
                .map(|n| {
                    let ac: f64 = (0..order).map(|m| op.a(n, m) * dense[m]).sum();
                    dense[n] - ac / k + op.b()[n] * x / k
                })
                .collect();
            dense = next;
        }
        let fast = single_channel_state(&xs, order);
        assert!(relative_l2(&fast, &dense) < 1e-10);
    }

    #[test]
    fn first_step_from_zero() {
        let op = LegsOperator::new(1).unwrap();
        let st = HippoState::new(1, 1).step(&[5.0], &op).unwrap();
        assert_eq!(st.coeffs(), &[5.0]);
        assert_eq!(st.consumed(), 1);
    }

    #[test]
    fn constant_input_is_a_fixed_point() {
        for order in [1, 4, 16] {
            let op = LegsOperator::new(order).unwrap();
            let mut st = HippoState::new(1, order);
            for k in 0..300 {
                st.advance(&[2.5], &op).unwrap();
                if k >= 1 {
                    assert!((st.coeffs()[0] - 2.5).abs() < 1e-12);
                    assert!(st.coeffs()[1..].iter().all(|v| v.abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn scan_prefixes_and_determinism() {
        let values: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let op = LegsOperator::new(6).unwrap();
        let a = scan(&values, 2, &op).unwrap();
        let b = scan(&values, 2, &op).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let mut changed = values.clone();
        for v in &mut changed[22..] {
            *v += 10.0;
        }
        let c = scan(&changed, 2, &op).unwrap();
        assert_eq!(a[..11], c[..11]);
        assert_ne!(a[11], c[11]);
        assert_eq!(scan(&[], 1, &op).unwrap_err(), HippoError::Empty);
    }

    #[test]
    fn prefix_table_agrees_with_scan() {
        let values: Vec<f64> = (0..60)
            .map(|i| (i as f64 * 0.17).cos() * (1 + i % 3) as f64)
            .collect();
        let op = LegsOperator::new(5).unwrap();
        let states = scan(&values, 3, &op).unwrap();
        let table = PrefixStates::build(&values, 3, &op).unwrap();
        assert!(table.prefix(0).unwrap().iter().all(|&v| v == 0.0));
        for (t, st) in states.iter().enumerate() {
            assert_eq!(table.prefix(t + 1).unwrap(), st.coeffs());
        }
        let sparse = PrefixStates::build_retaining(&values, 3, &op, |m| m % 5 == 0).unwrap();
        assert!(sparse.prefix(3).is_none());
        assert_eq!(sparse.prefix(10), table.prefix(10));
    }

    #[test]
    fn oracle_constant_series() {
        let c = project_oracle(&[1.5; 50], 3).unwrap();
        assert!((c[0] - 1.5).abs() < 1e-12);
        assert!(c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
    }

    #[test]
    fn oracle_order_one_is_the_mean() {
        let xs = [1.0, 4.0, -2.0, 7.0];
        let c = project_oracle(&xs, 1).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_fits_a_ramp_exactly() {
        let xs: Vec<f64> = (0..64).map(|i| 0.5 + 2.0 * i as f64).collect();
        let c = project_oracle(&xs, 2).unwrap();
        assert!(c[0].abs() > 1.0 && c[1].abs() > 1.0);
        let rec = reconstruct(&c, &midpoint_grid(64));
        assert!(relative_l2(&rec, &xs) < 1e-12);
    }

    #[test]
    fn oracle_needs_enough_samples() {
        assert_eq!(
            project_oracle(&[1.0, 2.0], 3).unwrap_err(),
            HippoError::RankDeficient { len: 2, order: 3 }
        );
    }

    #[test]
    fn reconstruct_trivial_expansions() {
        let grid = midpoint_grid(10);
        assert!(reconstruct(&[3.0, 0.0, 0.0], &grid)
            .iter()
            .all(|&v| (v - 3.0).abs() < 1e-15));
        assert!(reconstruct(&[0.0; 4], &grid).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrence_tracks_oracle_on_sine() {
        let k = 512;
        let xs: Vec<f64> = (0..k).map(|i| (i as f64 / (k - 1) as f64).sin()).collect();
        let rec = single_channel_state(&xs, 8);
        let oracle = project_oracle(&xs, 8).unwrap();
        assert!(relative_l2(&rec, &oracle) < 0.10);
    }
}
