//! Compressed-sparse-row matrices, a banded direct LU, and the differentiable
//! sparse ops (solve, matrix-vector product, block summation) used to build
//! Newton systems on the tape.

use std::io::Write;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{expect_inputs, NodeId, Op, Tape, Tensor};

/// Row offsets and sorted column indices of a CSR matrix, without values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityPattern {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl SparsityPattern {
    /// Builds a pattern from (row, col) pairs; duplicates are merged.
    pub fn from_entries(
        n_rows: usize,
        n_cols: usize,
        entries: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_rows];
        for (i, j) in entries {
            if i >= n_rows || j >= n_cols {
                return Err(Error::contract(format!(
                    "entry ({i}, {j}) outside a {n_rows}x{n_cols} matrix"
                )));
            }
            rows[i].push(j);
        }
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for mut cols in rows {
            cols.sort_unstable();
            cols.dedup();
            col_indices.extend(cols);
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
        })
    }

    pub fn from_raw(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 || row_offsets[0] != 0 {
            return Err(Error::contract("row_offsets must have n_rows + 1 entries starting at 0"));
        }
        if *row_offsets.last().unwrap() != col_indices.len() {
            return Err(Error::contract("last row offset must equal the entry count"));
        }
        for i in 0..n_rows {
            let (a, b) = (row_offsets[i], row_offsets[i + 1]);
            if a > b {
                return Err(Error::contract("row_offsets must be nondecreasing"));
            }
            let cols = &col_indices[a..b];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!("columns of row {i} not strictly increasing")));
            }
            if cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::contract(format!("column index out of range in row {i}")));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    /// Storage positions of row `i`.
    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_range(i);
        self.col_indices[r.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| r.start + k)
    }

    /// `(row, col)` of every stored position, in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row_range(i).map(move |k| (i, self.col_indices[k])))
    }

    /// Lower and upper bandwidth.
    pub fn bandwidth(&self) -> (usize, usize) {
        let mut lower = 0;
        let mut upper = 0;
        for (i, j) in self.entries() {
            if i > j {
                lower = lower.max(i - j);
            } else {
                upper = upper.max(j - i);
            }
        }
        (lower, upper)
    }

    /// For a structurally symmetric pattern, the storage position of `(j, i)`
    /// for every position `(i, j)`.
    pub fn transpose_positions(&self) -> Result<Vec<usize>> {
        self.entries()
            .map(|(i, j)| {
                self.find(j, i)
                    .ok_or_else(|| Error::contract(format!("pattern not symmetric at ({i}, {j})")))
            })
            .collect()
    }
}

/// CSR matrix: a shared pattern plus one value per stored entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(pattern: Arc<SparsityPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::contract(format!(
                "{} values for a pattern with {} entries",
                values.len(),
                pattern.nnz()
            )));
        }
        Ok(Self { pattern, values })
    }

    /// Sums duplicate triplets.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let pattern = Arc::new(SparsityPattern::from_entries(
            n_rows,
            n_cols,
            triplets.iter().map(|&(i, j, _)| (i, j)),
        )?);
        let mut values = vec![0.0; pattern.nnz()];
        for &(i, j, v) in triplets {
            values[pattern.find(i, j).expect("entry was inserted")] += v;
        }
        Ok(Self { pattern, values })
    }

    pub fn identity(n: usize) -> Self {
        let pattern = SparsityPattern::from_entries(n, n, (0..n).map(|i| (i, i))).expect("valid");
        Self {
            pattern: Arc::new(pattern),
            values: vec![1.0; n],
        }
    }

    /// Keeps exact zeros out of the pattern.
    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n_rows * n_cols {
            return Err(Error::contract("dense buffer has the wrong size"));
        }
        let triplets: Vec<_> = (0..n_rows)
            .flat_map(|i| (0..n_cols).map(move |j| (i, j)))
            .filter_map(|(i, j)| {
                let v = dense[i * n_cols + j];
                (v != 0.0).then_some((i, j, v))
            })
            .collect();
        Self::from_triplets(n_rows, n_cols, &triplets)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.pattern.n_cols;
        let mut out = vec![0.0; self.pattern.n_rows * n];
        for ((i, j), v) in self.pattern.entries().zip(&self.values) {
            out[i * n + j] = *v;
        }
        out
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn n_rows(&self) -> usize {
        self.pattern.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.pattern.n_cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.find(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.pattern.n_cols {
            return Err(Error::contract(format!(
                "spmv: matrix has {} columns, vector has {} entries",
                self.pattern.n_cols,
                x.len()
            )));
        }
        Ok(spmv_raw(&self.pattern, &self.values, x))
    }

    /// `Aᵀ x`.
    pub fn spmv_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.pattern.n_rows {
            return Err(Error::contract("spmv_transpose: dimension mismatch"));
        }
        Ok(spmv_transpose_raw(&self.pattern, &self.values, x))
    }

    /// MatrixMarket coordinate format, 1-based indices.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n_rows(), self.n_cols(), self.pattern.nnz())?;
        for ((i, j), v) in self.pattern.entries().zip(&self.values) {
            writeln!(w, "{} {} {:.16e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

pub fn spmv(a: &CsrMatrix, x: &[f64]) -> Result<Vec<f64>> {
    a.spmv(x)
}

fn spmv_raw(p: &SparsityPattern, values: &[f64], x: &[f64]) -> Vec<f64> {
    (0..p.n_rows)
        .map(|i| p.row_range(i).map(|k| values[k] * x[p.col_indices[k]]).sum())
        .collect()
}

fn spmv_transpose_raw(p: &SparsityPattern, values: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.n_cols];
    for i in 0..p.n_rows {
        for k in p.row_range(i) {
            out[p.col_indices[k]] += values[k] * x[i];
        }
    }
    out
}

/// Banded LU factorization with partial pivoting.
///
/// Row `i` of the working band covers columns `i - kl ..= i + kl + ku`; the
/// extra `kl` upper diagonals absorb fill from row interchanges. Multipliers
/// stay in the strictly lower part and are applied in elimination order, so
/// solves with `A` and `Aᵀ` both reuse the same storage.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    pivots: Vec<usize>,
}

impl LuFactors {
    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.width + j + self.kl - i
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::contract("solve: right-hand side has the wrong length"));
        }
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.pivots[k]);
            let xk = x[k];
            if xk != 0.0 {
                for r in k + 1..=(k + self.kl).min(n - 1) {
                    x[r] -= self.band[self.at(r, k)] * xk;
                }
            }
        }
        let reach = self.kl + self.ku;
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + reach).min(n - 1) {
                s -= self.band[self.at(k, j)] * x[j];
            }
            x[k] = s / self.band[self.at(k, k)];
        }
        Ok(x)
    }

    /// Solves `Aᵀ y = c`.
    pub fn solve_transpose(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.n {
            return Err(Error::contract("solve_transpose: right-hand side has the wrong length"));
        }
        let n = self.n;
        let reach = self.kl + self.ku;
        let mut z = c.to_vec();
        for k in 0..n {
            let mut s = z[k];
            for i in k.saturating_sub(reach)..k {
                s -= self.band[self.at(i, k)] * z[i];
            }
            z[k] = s / self.band[self.at(k, k)];
        }
        for k in (0..n).rev() {
            let mut s = z[k];
            for r in k + 1..=(k + self.kl).min(n - 1) {
                s -= self.band[self.at(r, k)] * z[r];
            }
            z[k] = s;
            z.swap(k, self.pivots[k]);
        }
        Ok(z)
    }
}

/// Factorizes a square CSR matrix.
pub fn lu_factorize(a: &CsrMatrix) -> Result<LuFactors> {
    lu_factorize_values(&a.pattern, &a.values)
}

fn lu_factorize_values(p: &SparsityPattern, values: &[f64]) -> Result<LuFactors> {
    if p.n_rows != p.n_cols {
        return Err(Error::contract(format!(
            "LU needs a square matrix, got {}x{}",
            p.n_rows, p.n_cols
        )));
    }
    let n = p.n_rows;
    let (kl, ku) = p.bandwidth();
    let width = 2 * kl + ku + 1;
    let mut lu = LuFactors {
        n,
        kl,
        ku,
        width,
        band: vec![0.0; n * width],
        pivots: vec![0; n],
    };
    let mut scale = 0.0_f64;
    for ((i, j), &v) in p.entries().zip(values) {
        let at = lu.at(i, j);
        lu.band[at] = v;
        scale = scale.max(v.abs());
    }
    let tiny = scale * f64::EPSILON * n as f64;

    for k in 0..n {
        let last = (k + kl).min(n - 1);
        let mut piv = k;
        let mut best = lu.band[lu.at(k, k)].abs();
        for r in k + 1..=last {
            let v = lu.band[lu.at(r, k)].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || best <= tiny || !best.is_finite() {
            return Err(Error::Singular { pivot: k });
        }
        lu.pivots[k] = piv;
        let jmax = (k + kl + ku).min(n - 1);
        if piv != k {
            for j in k..=jmax {
                let (a, b) = (lu.at(k, j), lu.at(piv, j));
                lu.band.swap(a, b);
            }
        }
        let pivot = lu.band[lu.at(k, k)];
        let row_k = lu.at(k, 0);
        for r in k + 1..=last {
            let at_rk = lu.at(r, k);
            let m = lu.band[at_rk] / pivot;
            lu.band[at_rk] = m;
            if m == 0.0 {
                continue;
            }
            let row_r = lu.at(r, 0);
            for j in k + 1..=jmax {
                // Both rows are addressed relative to their own band origin.
                lu.band[row_r + j] -= m * lu.band[row_k + j];
            }
        }
    }
    Ok(lu)
}

/// Entry values aligned with a fixed sparsity pattern, living on the tape.
#[derive(Clone, Debug)]
pub struct SparseBlock {
    pub pattern: Arc<SparsityPattern>,
    pub values: NodeId,
}

impl SparseBlock {
    pub fn to_matrix(&self, tape: &Tape) -> CsrMatrix {
        CsrMatrix {
            pattern: self.pattern.clone(),
            values: tape.value(self.values).data().to_vec(),
        }
    }
}

static CORRUPT_SOLVE_ADJOINT: AtomicBool = AtomicBool::new(false);

/// Flips the sign of the matrix adjoint in every subsequently recorded
/// sparse solve. Negative control for the gradient checker; never enable it
/// outside of that.
#[doc(hidden)]
pub fn corrupt_solve_adjoint(enabled: bool) {
    CORRUPT_SOLVE_ADJOINT.store(enabled, Ordering::SeqCst);
}

/// `x = A⁻¹ b` with `A` given by values on a fixed pattern.
///
/// The adjoint is `b̄ = A⁻ᵀ x̄` and `Ā_ij = -b̄_i x_j` on stored entries only.
pub struct SparseSolve {
    pattern: Arc<SparsityPattern>,
    corrupt: bool,
}

impl SparseSolve {
    pub fn new(pattern: Arc<SparsityPattern>) -> Self {
        Self {
            pattern,
            corrupt: CORRUPT_SOLVE_ADJOINT.load(Ordering::SeqCst),
        }
    }
}

impl Op for SparseSolve {
    fn name(&self) -> &'static str {
        "sparse_solve"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        check_values(&self.pattern, inputs[0])?;
        let lu = lu_factorize_values(&self.pattern, inputs[0].data())?;
        Ok(Tensor::vector(lu.solve(inputs[1].data())?))
    }

    fn backward(&self, inputs: &[&Tensor], x: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let lu = lu_factorize_values(&self.pattern, inputs[0].data())?;
        let lambda = lu.solve_transpose(g)?;
        let x = x.data();
        let sign = if self.corrupt { 1.0 } else { -1.0 };
        let ga = self
            .pattern
            .entries()
            .map(|(i, j)| sign * lambda[i] * x[j])
            .collect();
        Ok(vec![Some(ga), Some(lambda)])
    }
}

fn check_values(p: &SparsityPattern, values: &Tensor) -> Result<()> {
    if values.len() != p.nnz() {
        return Err(Error::contract(format!(
            "{} block values for a pattern with {} entries",
            values.len(),
            p.nnz()
        )));
    }
    Ok(())
}

/// Records a differentiable sparse solve.
pub fn solve_differentiable(tape: &mut Tape, a: &SparseBlock, b: NodeId) -> Result<NodeId> {
    tape.apply(SparseSolve::new(a.pattern.clone()), &[a.values, b])
}

/// `y = A x`, differentiable in both the entries of `A` and `x`.
pub struct SparseMatVec {
    pattern: Arc<SparsityPattern>,
}

impl Op for SparseMatVec {
    fn name(&self) -> &'static str {
        "spmv"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, 2)?;
        check_values(&self.pattern, inputs[0])?;
        if inputs[1].len() != self.pattern.n_cols {
            return Err(Error::contract("spmv: dimension mismatch"));
        }
        Ok(Tensor::vector(spmv_raw(&self.pattern, inputs[0].data(), inputs[1].data())))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let x = inputs[1].data();
        let ga = self.pattern.entries().map(|(i, j)| g[i] * x[j]).collect();
        let gx = spmv_transpose_raw(&self.pattern, inputs[0].data(), g);
        Ok(vec![Some(ga), Some(gx)])
    }
}

pub fn spmv_differentiable(tape: &mut Tape, a: &SparseBlock, x: NodeId) -> Result<NodeId> {
    tape.apply(
        SparseMatVec {
            pattern: a.pattern.clone(),
        },
        &[a.values, x],
    )
}

/// Where a block lands inside a larger pattern, with a scalar weight.
#[derive(Clone, Debug)]
pub struct Placement {
    /// Target storage position for every stored entry of the source block.
    pub positions: Arc<Vec<usize>>,
    pub weight: f64,
}

/// Weighted sum of blocks scattered into one target pattern.
pub struct BlockSum {
    target_nnz: usize,
    placements: Vec<Placement>,
}

impl BlockSum {
    pub fn new(target_nnz: usize, placements: Vec<Placement>) -> Self {
        Self {
            target_nnz,
            placements,
        }
    }
}

impl Op for BlockSum {
    fn name(&self) -> &'static str {
        "block_sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        expect_inputs(self.name(), inputs, self.placements.len())?;
        let mut out = vec![0.0; self.target_nnz];
        for (place, block) in self.placements.iter().zip(inputs) {
            if block.len() != place.positions.len() {
                return Err(Error::contract("block_sum: block does not match its placement"));
            }
            for (&pos, v) in place.positions.iter().zip(block.data()) {
                out[pos] += place.weight * v;
            }
        }
        Ok(Tensor::vector(out))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(self
            .placements
            .iter()
            .map(|place| Some(place.positions.iter().map(|&pos| place.weight * g[pos]).collect()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(n: usize, density: f64, seed: u64, dominant: bool) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                if i != j && rng.gen::<f64>() < density {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    dense[i * n + j] = v;
                    row_sum += v.abs();
                }
            }
            dense[i * n + i] = if dominant {
                row_sum + 1.0 + rng.gen::<f64>()
            } else {
                rng.gen_range(0.5..2.0)
            };
        }
        CsrMatrix::from_dense(n, n, &dense).unwrap()
    }

    fn rel_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
        let ax = a.spmv(x).unwrap();
        let num: f64 = ax.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        let den: f64 = b.iter().map(|q| q * q).sum();
        (num / den).sqrt()
    }

    #[test]
    fn identity_and_diagonal_solves() {
        let lu = lu_factorize(&CsrMatrix::identity(4)).unwrap();
        assert_eq!(lu.solve(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![1.0, -2.0, 3.0, 0.5]);

        let d = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 4.0)]).unwrap();
        assert_eq!(lu_factorize(&d).unwrap().solve(&[2.0, 4.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn diagonally_dominant_residual() {
        let a = random_sparse(50, 0.15, 3, true);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() + 0.1).collect();
        let x = lu_factorize(&a).unwrap().solve(&b).unwrap();
        assert!(rel_residual(&a, &x, &b) < 1e-10);
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        let a = CsrMatrix::from_dense(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 1.0]).unwrap();
        let b = [1.0, 2.0, 3.0];
        let lu = lu_factorize(&a).unwrap();
        assert!(rel_residual(&a, &lu.solve(&b).unwrap(), &b) < 1e-14);
        let y = lu.solve_transpose(&b).unwrap();
        let aty = a.spmv_transpose(&y).unwrap();
        for (p, q) in aty.iter().zip(b) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = CsrMatrix::from_dense(3, 3, &[1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(lu_factorize(&a), Err(Error::Singular { pivot: 1 })));
        let z = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0)]).unwrap();
        assert!(matches!(lu_factorize(&z), Err(Error::Singular { pivot: 1 })));
    }

    #[test]
    fn spmv_matches_dense_product() {
        let a = random_sparse(10, 0.5, 11, false);
        let x: Vec<f64> = (0..10).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let dense = a.to_dense();
        let y = spmv(&a, &x).unwrap();
        for i in 0..10 {
            let expect: f64 = (0..10).map(|j| dense[i * 10 + j] * x[j]).sum();
            assert!((y[i] - expect).abs() < 1e-14);
        }
        assert_eq!(spmv(&CsrMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let zero = CsrMatrix::new(
            Arc::new(SparsityPattern::from_entries(2, 2, [(0, 1)]).unwrap()),
            vec![0.0],
        )
        .unwrap();
        assert_eq!(spmv(&zero, &[5.0, 6.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(spmv(&zero, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn diagonal_solve_adjoint() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 2.0)]).unwrap();
        let mut tape = Tape::new();
        let av = tape.variable(Tensor::vector(a.values().to_vec()));
        let b = tape.variable(Tensor::vector(vec![2.0, 4.0]));
        let block = SparseBlock {
            pattern: a.pattern().clone(),
            values: av,
        };
        let x = solve_differentiable(&mut tape, &block, b).unwrap();
        assert_eq!(tape.value(x).data(), &[1.0, 2.0]);
        let c = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = tape.dot(c, x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.5, 0.0]);
        assert_eq!(g.get(av).unwrap().data(), &[-0.5, 0.0]);
    }

    #[test]
    fn solve_adjoint_matches_fd_on_every_entry() {
        let a = random_sparse(20, 0.2, 5, true);
        let b: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let c: Vec<f64> = (0..20).map(|i| 0.5 + (i as f64 * 1.3).sin()).collect();
        let pattern = a.pattern().clone();
        let f = |vals: &[f64]| {
            let mut tape = Tape::new();
            let av = tape.variable(Tensor::vector(vals.to_vec()));
            let bn = tape.constant(Tensor::vector(b.clone()));
            let cn = tape.constant(Tensor::vector(c.clone()));
            let x = solve_differentiable(
                &mut tape,
                &SparseBlock {
                    pattern: pattern.clone(),
                    values: av,
                },
                bn,
            )?;
            let l = tape.dot(cn, x)?;
            let g = tape.backward(l)?;
            Ok((tape.value(l).item(), g.get(av).unwrap().data().to_vec()))
        };
        let check = finite_difference_check(f, a.values(), 1e-6, None).unwrap();
        assert!(check.max_rel_error < 1e-6, "max rel error {}", check.max_rel_error);
    }

    #[test]
    fn block_sum_scatters_and_gathers() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.variable(Tensor::vector(vec![10.0]));
        let op = BlockSum::new(
            3,
            vec![
                Placement {
                    positions: Arc::new(vec![0, 2]),
                    weight: 1.0,
                },
                Placement {
                    positions: Arc::new(vec![2]),
                    weight: -0.5,
                },
            ],
        );
        let s = tape.apply(op, &[a, b]).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, -3.0]);
        let w = tape.constant(Tensor::vector(vec![1.0, 7.0, 2.0]));
        let l = tape.dot(w, s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn matrix_market_export() {
        let a = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.5), (1, 0, -2.0)]).unwrap();
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines[1], "2 3 2");
        assert!(lines[2].starts_with("1 3 1.5"));
    }

    #[test]
    fn raw_pattern_validation() {
        assert!(SparsityPattern::from_raw(2, 2, vec![0, 1, 2], vec![1, 0]).is_ok());
        assert!(SparsityPattern::from_raw(2, 2, vec![0, 2, 2], vec![1, 0]).is_err());
        assert!(SparsityPattern::from_raw(2, 2, vec![0, 1, 2], vec![0, 5]).is_err());
    }
}
