//! Optimal bipartite assignment between predictions and ground truth.
//!
//! Rows of a [`CostMatrix`] are predictions, columns are ground-truth
//! objects. Among equal-cost optima the assignment whose sorted pair list is
//! lexicographically smallest is returned, so that matchings (and the
//! instability measured from them) are reproducible.

use serde::{Deserialize, Serialize};

use crate::denoising::GtObject;
use crate::error::{invalid, Error, Result};
use crate::geometry::{giou, BBox};

/// Largest `min(rows, cols)` accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(invalid(format!(
                "cost matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite cost entry {v}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    fn transposed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }

    /// Sum of the entries at `pairs`, accumulated in the order given.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Injective pairing of prediction rows to ground-truth columns.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, gt)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Prediction matched to each ground-truth column, if any.
    pub fn gt_to_pred(&self, n_gts: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_gts];
        for &(n, m) in &self.pairs {
            out[m] = Some(n);
        }
        out
    }
}

/// Weights of the class, L1 and GIoU terms of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// `C[n][m] = -w_cls * p_n(c_m) + w_l1 * |b_n - b_m|_1 - w_giou * GIoU(b_n, b_m)`.
///
/// `class_probs` is row-major `n_preds x n_classes`.
pub fn build_cost_matrix(
    class_probs: &[f64],
    n_classes: usize,
    pred_boxes: &[BBox],
    gts: &[GtObject],
    weights: &MatchWeights,
) -> Result<CostMatrix> {
    let n = pred_boxes.len();
    if class_probs.len() != n * n_classes {
        return Err(invalid(format!(
            "{} class probabilities for {n} boxes and {n_classes} classes",
            class_probs.len()
        )));
    }
    if let Some(gt) = gts.iter().find(|g| g.label >= n_classes) {
        return Err(invalid(format!("gt label {} out of range", gt.label)));
    }
    let mut values = Vec::with_capacity(n * gts.len());
    for (i, pb) in pred_boxes.iter().enumerate() {
        let probs = &class_probs[i * n_classes..(i + 1) * n_classes];
        for gt in gts {
            values.push(
                -weights.class * probs[gt.label] + weights.l1 * pb.l1(&gt.bbox)
                    - weights.giou * giou(pb, &gt.bbox),
            );
        }
    }
    CostMatrix::new(n, gts.len(), values)
}

/// Optimal assignment value of a `rows <= cols` matrix, restricted to the
/// given row and column subsets. Shortest augmenting path with potentials.
fn lsap_value(c: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let cost = |i: usize, j: usize| c.get(rows[i - 1], cols[j - 1]);
    // 1-based potentials; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    // row_to_col[i] is the local column index of row i
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let value = (0..n).map(|i| cost(i + 1, row_to_col[i] + 1)).sum();
    (value, row_to_col)
}

fn tie_tolerance(opt: f64) -> f64 {
    1e-9 * opt.abs().max(1.0)
}

/// Optimal value over a row/column subset, in either orientation.
fn sub_optimum(c: &CostMatrix, ct: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.len() <= cols.len() {
        lsap_value(c, rows, cols).0
    } else {
        lsap_value(ct, cols, rows).0
    }
}

/// Lexicographically smallest optimal pair list.
///
/// Rows are visited in order; each row takes the smallest column that still
/// admits an optimal completion, or stays unused if none does.
fn solve(c: &CostMatrix) -> Assignment {
    if c.rows() == 0 || c.cols() == 0 {
        return Assignment::default();
    }
    let ct = c.transposed();
    let all_rows: Vec<usize> = (0..c.rows()).collect();
    let all_cols: Vec<usize> = (0..c.cols()).collect();
    let opt = sub_optimum(c, &ct, &all_rows, &all_cols);
    let tol = tie_tolerance(opt);
    let target = c.rows().min(c.cols());

    let mut free_cols = all_cols;
    let mut fixed = 0.0;
    let mut pairs = Vec::with_capacity(target);
    for r in 0..c.rows() {
        if pairs.len() == target {
            break;
        }
        let later_rows: Vec<usize> = ((r + 1)..c.rows()).collect();
        let need = target - pairs.len() - 1;
        let mut chosen = None;
        for (k, &col) in free_cols.iter().enumerate() {
            let mut rest = free_cols.clone();
            rest.remove(k);
            if later_rows.len().min(rest.len()) < need {
                continue;
            }
            let sub = sub_optimum(c, &ct, &later_rows, &rest);
            if fixed + c.get(r, col) + sub <= opt + tol {
                chosen = Some(k);
                break;
            }
        }
        if let Some(k) = chosen {
            let col = free_cols.remove(k);
            fixed += c.get(r, col);
            pairs.push((r, col));
        }
    }
    debug_assert_eq!(pairs.len(), target);
    Assignment { pairs }
}

/// Minimum-cost injective matching; returns the assignment and its cost.
pub fn hungarian_assign(c: &CostMatrix) -> (Assignment, f64) {
    let a = solve(c);
    let total = c.total(&a.pairs);
    (a, total)
}

/// Exhaustive search over all injective maps; test oracle.
pub fn brute_force_assign(c: &CostMatrix) -> Result<(Assignment, f64)> {
    let size = c.rows().min(c.cols());
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if size == 0 {
        return Ok((Assignment::default(), 0.0));
    }
    // enumerate maps from the short side into the long side
    let transposed = c.rows() < c.cols();
    let (short, long) = if transposed {
        (c.rows(), c.cols())
    } else {
        (c.cols(), c.rows())
    };
    let pair = |s: usize, l: usize| if transposed { (s, l) } else { (l, s) };

    let mut candidates: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    let mut chosen = vec![0usize; short];
    let mut used = vec![false; long];
    fn rec(
        depth: usize,
        short: usize,
        long: usize,
        chosen: &mut Vec<usize>,
        used: &mut Vec<bool>,
        emit: &mut dyn FnMut(&[usize]),
    ) {
        if depth == short {
            emit(chosen);
            return;
        }
        for l in 0..long {
            if !used[l] {
                used[l] = true;
                chosen[depth] = l;
                rec(depth + 1, short, long, chosen, used, emit);
                used[l] = false;
            }
        }
    }
    let mut emit = |map: &[usize]| {
        let mut pairs: Vec<(usize, usize)> =
            map.iter().enumerate().map(|(s, &l)| pair(s, l)).collect();
        pairs.sort_unstable();
        candidates.push((c.total(&pairs), pairs));
    };
    rec(0, short, long, &mut chosen, &mut used, &mut emit);

    let best = candidates
        .iter()
        .map(|(v, _)| *v)
        .fold(f64::INFINITY, f64::min);
    let tol = tie_tolerance(best);
    let (_, pairs) = candidates
        .into_iter()
        .filter(|(v, _)| *v <= best + tol)
        .min_by(|a, b| a.1.cmp(&b.1))
        .expect("at least one candidate");
    let total = c.total(&pairs);
    Ok((Assignment { pairs }, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::geometry::Xyxy;

    fn m(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cost_entry_for_perfect_prediction() {
        let b = BBox::new(0.3, 0.4, 0.2, 0.1);
        let gts = [GtObject::new(b, 1)];
        let c = build_cost_matrix(&[0.0, 1.0], 2, &[b], &gts, &MatchWeights::default()).unwrap();
        assert_abs_diff_eq!(c.get(0, 0), -4.0, epsilon = 1e-12);
    }

    #[test]
    fn cost_entry_for_disjoint_boxes() {
        let pb = BBox::from_xyxy(Xyxy::new(0.0, 0.0, 0.5, 0.5));
        let gb = BBox::from_xyxy(Xyxy::new(0.5, 0.5, 1.0, 1.0));
        let gts = [GtObject::new(gb, 0)];
        let c = build_cost_matrix(&[0.0, 0.7], 2, &[pb], &gts, &MatchWeights::default()).unwrap();
        assert_abs_diff_eq!(c.get(0, 0), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn cost_matrix_errors_and_empty() {
        let b = BBox::new(0.5, 0.5, 0.1, 0.1);
        let w = MatchWeights::default();
        assert!(build_cost_matrix(&[0.5], 2, &[b], &[], &w).is_err());
        let c = build_cost_matrix(&[0.5, 0.5], 2, &[b], &[], &w).unwrap();
        assert_eq!((c.rows(), c.cols()), (1, 0));
        assert!(hungarian_assign(&c).0.is_empty());
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn small_known_instances() {
        let (a, v) = hungarian_assign(&m(&[&[0.0]]));
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(v, 0.0);

        let c = m(&[&[4.0, 1.0, 3.0], &[2.0, 0.0, 5.0], &[3.0, 2.0, 2.0]]);
        let (a, v) = hungarian_assign(&c);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(v, 5.0);

        let c = m(&[&[0.0, 3.0, 1.0], &[2.0, 0.0, 4.0], &[5.0, 1.0, 0.0]]);
        assert_eq!(hungarian_assign(&c).0.pairs, vec![(0, 0), (1, 1), (2, 2)]);

        let c = m(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let (a, v) = brute_force_assign(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(v, 2.0);
        assert_eq!(brute_force_assign(&m(&[&[0.0]])).unwrap().1, 0.0);
    }

    #[test]
    fn ties_prefer_lowest_rows() {
        // every prediction is identical: the first rows win
        let c = m(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(hungarian_assign(&c).0.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(brute_force_assign(&c).unwrap().0.pairs, vec![(0, 0), (1, 1)]);
        let c = m(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(hungarian_assign(&c).0.pairs, vec![(0, 0), (1, 1)]);
        let c = m(&[&[5.0, 5.0, 5.0]]);
        assert_eq!(hungarian_assign(&c).0.pairs, vec![(0, 0)]);
    }

    #[test]
    fn fewer_predictions_than_gts() {
        let c = m(&[&[3.0, 1.0, 2.0]]);
        let (a, v) = hungarian_assign(&c);
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(v, 1.0);
        let c = m(&[&[3.0, 1.0, 2.0], &[0.0, 1.0, 9.0]]);
        assert_eq!(hungarian_assign(&c), brute_force_assign(&c).unwrap());
    }

    #[test]
    fn brute_force_refuses_large() {
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(brute_force_assign(&c), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn agrees_with_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let r = rng.gen_range(1..=7);
            let c = rng.gen_range(1..=7);
            let vals = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cm = CostMatrix::new(r, c, vals).unwrap();
            let (ha, hv) = hungarian_assign(&cm);
            let (ba, bv) = brute_force_assign(&cm).unwrap();
            assert_eq!(hv, bv);
            assert_eq!(ha, ba);
        }
    }

    #[test]
    fn agrees_with_brute_force_on_integer_matrices_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let r = rng.gen_range(1..=6);
            let c = rng.gen_range(1..=6);
            let vals = (0..r * c).map(|_| rng.gen_range(0..3) as f64).collect();
            let cm = CostMatrix::new(r, c, vals).unwrap();
            assert_eq!(hungarian_assign(&cm), brute_force_assign(&cm).unwrap());
        }
    }

    fn arb_matrix() -> impl Strategy<Value = CostMatrix> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0..10.0f64, r * c)
                .prop_map(move |v| CostMatrix::new(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn row_shift_keeps_assignment(c in arb_matrix(), row in 0usize..6, shift in -5.0..5.0f64) {
            // only meaningful when every row is assigned
            prop_assume!(c.rows() <= c.cols());
            let row = row % c.rows();
            let mut vals = c.values.clone();
            for j in 0..c.cols() {
                vals[row * c.cols() + j] += shift;
            }
            let shifted = CostMatrix::new(c.rows(), c.cols(), vals).unwrap();
            let (a, v) = hungarian_assign(&c);
            let (b, w) = hungarian_assign(&shifted);
            prop_assert_eq!(&a, &b);
            prop_assert!((w - v - shift).abs() < 1e-9);
        }

        #[test]
        fn assignment_is_partial_injection(c in arb_matrix()) {
            let (a, _) = hungarian_assign(&c);
            prop_assert_eq!(a.len(), c.rows().min(c.cols()));
            let mut rows: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            rows.sort_unstable();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), a.len());
            prop_assert_eq!(cols.len(), a.len());
        }
    }
}
