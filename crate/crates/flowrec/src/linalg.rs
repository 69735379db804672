//! Sparse and banded linear algebra kernels.
//!
//! Everything large in this crate lives on a structured grid, so direct
//! banded factorizations cover all sparse solves: the per-step saddle-point
//! systems, the Gram operators and the auxiliary Poisson problems. Dense
//! decompositions (QR/SVD/eigen) are delegated to nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Compressed sparse row matrix; assembled once, used for products.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from triplets, summing duplicates.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(i, j, v) in triplets {
            debug_assert!(i < n_rows && j < n_cols);
            per_row[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut per_row {
            row.sort_unstable_by_key(|&(j, _)| j);
            let mut last: Option<usize> = None;
            for &(j, v) in row.iter() {
                if last == Some(j) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                    last = Some(j);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Csr { n_rows, n_cols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        for i in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn matvec_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec(x, &mut y);
        y
    }

    /// xᵀ A y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n_rows);
        let mut acc = 0.0;
        for i in 0..self.n_rows {
            let mut row = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.values[k] * y[self.col_idx[k]];
            }
            acc += x[i] * row;
        }
        acc
    }

    /// ‖A − Aᵀ‖_F / ‖A‖_F.
    pub fn symmetry_residual(&self) -> f64 {
        assert_eq!(self.n_rows, self.n_cols);
        let mut map = std::collections::HashMap::new();
        for i in 0..self.n_rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                map.insert((i, self.col_idx[k]), self.values[k]);
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (&(i, j), &v) in &map {
            den += v * v;
            let vt = map.get(&(j, i)).copied().unwrap_or(0.0);
            num += (v - vt) * (v - vt);
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Infinity norm of A x − b.
    pub fn residual_inf(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut r: f64 = 0.0;
        for i in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            r = r.max((acc - b[i]).abs());
        }
        r
    }
}

/// General banded matrix in LAPACK-style band storage, column major.
///
/// Entry (i, j) with j − ku ≤ i ≤ j + kl is kept at `ab[j * ldab + kl + ku + i − j]`.
/// The leading `kl` slots of every column are head room for pivoting fill.
#[derive(Debug, Clone)]
pub struct Banded {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    ldab: usize,
    ab: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Banded { n, kl, ku, ldab, ab: vec![0.0; ldab * n] }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(j + self.kl >= i && i + self.ku >= j, "entry ({i},{j}) outside band");
        self.ab[j * self.ldab + self.kl + self.ku + i - j] += v;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.ab[j * self.ldab + self.kl + self.ku + i - j] = v;
    }

    pub fn reset(&mut self) {
        self.ab.fill(0.0);
    }

    /// LU factorization with partial pivoting (LAPACK `gbtf2` layout).
    pub fn factor(mut self) -> Result<BandedLu> {
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku; // row offset of the diagonal inside a column
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            // pivot search in column j among rows j..=j+km
            let col = j * ldab;
            let mut jp = 0usize;
            let mut best = self.ab[col + kv].abs();
            for t in 1..=km {
                let a = self.ab[col + kv + t].abs();
                if a > best {
                    best = a;
                    jp = t;
                }
            }
            ipiv[j] = j + jp;
            if best == 0.0 {
                return Err(Error::LinSolve(format!("zero pivot at column {j}")));
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                // swap rows j and j+jp over columns j..=ju
                for k in j..=ju {
                    let base = k * ldab + kv;
                    self.ab.swap(base + j - k, base + j + jp - k);
                }
            }
            if km > 0 {
                let piv = self.ab[col + kv];
                for t in 1..=km {
                    self.ab[col + kv + t] /= piv;
                }
                for k in (j + 1)..=ju {
                    let base = k * ldab + kv;
                    let amt = self.ab[base + j - k];
                    if amt != 0.0 {
                        let (lo, hi) = self.ab.split_at_mut(k * ldab);
                        let lcol = &lo[col + kv + 1..col + kv + 1 + km];
                        let ucol = &mut hi[kv + 1 + j - k..kv + 1 + j - k + km];
                        for t in 0..km {
                            ucol[t] -= lcol[t] * amt;
                        }
                    }
                }
            }
        }
        Ok(BandedLu { n, kl, ku, ldab, ab: self.ab, ipiv })
    }
}

/// Factored form of [`Banded`]; reusable for many right-hand sides.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku;
        if kl > 0 {
            for j in 0..n.saturating_sub(1) {
                let km = kl.min(n - 1 - j);
                let jp = self.ipiv[j];
                if jp != j {
                    b.swap(j, jp);
                }
                let bj = b[j];
                if bj != 0.0 {
                    let col = j * ldab + kv;
                    for t in 1..=km {
                        b[j + t] -= self.ab[col + t] * bj;
                    }
                }
            }
        }
        for j in (0..n).rev() {
            let col = j * ldab + kv;
            b[j] /= self.ab[col];
            let bj = b[j];
            if bj != 0.0 {
                let lm = (kl + ku).min(j);
                for t in 1..=lm {
                    b[j - t] -= self.ab[col - t] * bj;
                }
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Symmetric banded matrix (lower band stored) with Cholesky factorization.
///
/// Entry (i, j) with j ≤ i ≤ j + kb lives at `c[j * (kb + 1) + i − j]`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    pub n: usize,
    pub kb: usize,
    c: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, kb: usize) -> Self {
        BandedSpd { n, kb, c: vec![0.0; n * (kb + 1)] }
    }

    /// Adds to entry (i, j); only the lower triangle is stored.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(r - c <= self.kb, "entry ({i},{j}) outside band {}", self.kb);
        self.c[c * (self.kb + 1) + r - c] += v;
    }

    /// In-place Cholesky; fails if the matrix is not positive definite.
    pub fn factor(mut self) -> Result<BandedChol> {
        let (n, kb) = (self.n, self.kb);
        let ld = kb + 1;
        for j in 0..n {
            let mut diag = self.c[j * ld];
            let k0 = j.saturating_sub(kb);
            for k in k0..j {
                let l = self.c[k * ld + j - k];
                diag -= l * l;
            }
            if diag <= 0.0 {
                return Err(Error::LinSolve(format!("matrix not positive definite at pivot {j} ({diag:.3e})")));
            }
            let ljj = diag.sqrt();
            self.c[j * ld] = ljj;
            let imax = (j + kb).min(n - 1);
            for i in (j + 1)..=imax {
                let mut v = self.c[j * ld + i - j];
                let k0 = i.saturating_sub(kb).max(k0);
                for k in k0..j {
                    v -= self.c[k * ld + i - k] * self.c[k * ld + j - k];
                }
                self.c[j * ld + i - j] = v / ljj;
            }
        }
        Ok(BandedChol { n, kb, c: self.c })
    }
}

/// Cholesky factor of a [`BandedSpd`]; reusable for many right-hand sides.
#[derive(Debug, Clone)]
pub struct BandedChol {
    n: usize,
    kb: usize,
    c: Vec<f64>,
}

impl BandedChol {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let (n, kb, ld) = (self.n, self.kb, self.kb + 1);
        for j in 0..n {
            let x = b[j] / self.c[j * ld];
            b[j] = x;
            if x != 0.0 {
                let imax = (j + kb).min(n - 1);
                for i in (j + 1)..=imax {
                    b[i] -= self.c[j * ld + i - j] * x;
                }
            }
        }
        for j in (0..n).rev() {
            let imax = (j + kb).min(n - 1);
            let mut x = b[j];
            for i in (j + 1)..=imax {
                x -= self.c[j * ld + i - j] * b[i];
            }
            b[j] = x / self.c[j * ld];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
pub fn sym_eig_desc(mat: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(mat.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vecs = DMatrix::zeros(mat.nrows(), order.len());
    for (c, &k) in order.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(k));
    }
    (vals, vecs)
}

/// Smallest singular value of a rectangular matrix.
pub fn smallest_singular_value(mat: &DMatrix<f64>) -> f64 {
    if mat.ncols() == 0 || mat.nrows() == 0 {
        return 0.0;
    }
    let svd = mat.clone().svd(false, false);
    svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest generalized eigenvalue of Q η = λ M η for symmetric Q and SPD M.
///
/// Returns `(lambda_max, shifted)` where `shifted` reports whether M needed the
/// 1e-12·trace(M) regularization shift to admit a Cholesky factorization.
pub fn gen_eig_max(q: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(f64, bool)> {
    assert_eq!(q.nrows(), m.nrows());
    let n = m.nrows();
    let trace: f64 = m.diagonal().iter().sum();
    let mut shifted = false;
    let chol = match m.clone().cholesky() {
        Some(c) => c,
        None => {
            if !(trace > 0.0) {
                return Err(Error::SingularM(trace));
            }
            shifted = true;
            let mm = m + DMatrix::identity(n, n) * (1e-12 * trace);
            mm.cholesky().ok_or(Error::SingularM(trace))?
        }
    };
    // B = L⁻¹ Q L⁻ᵀ, then a plain symmetric eigensolve
    let l = chol.l();
    let mut b = q.clone();
    if !l.solve_lower_triangular_mut(&mut b) {
        return Err(Error::SingularM(trace));
    }
    b.transpose_mut();
    if !l.solve_lower_triangular_mut(&mut b) {
        return Err(Error::SingularM(trace));
    }
    let (vals, _) = sym_eig_desc(&b);
    Ok((vals.first().copied().unwrap_or(0.0), shifted))
}

/// Least squares min ‖A x − b‖₂ for tall A with full column rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.ncols();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax.max(f64::MIN_POSITIVE)).count();
    if rank < n {
        return Err(Error::RankDeficient { requested: n, rank });
    }
    svd.solve(b, 1e-12 * smax).map_err(|e| Error::LinSolve(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn dense_from_band(b: &Banded, entries: &[(usize, usize, f64)]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(b.n, b.n);
        for &(i, j, v) in entries {
            m[(i, j)] += v;
        }
        m
    }

    #[test]
    fn banded_lu_matches_dense_solve() {
        let mut rng = StdRng::seed_from_u64(7);
        for &(n, kl, ku) in &[(1usize, 0usize, 0usize), (5, 1, 1), (40, 3, 5), (80, 7, 2)] {
            let mut band = Banded::zeros(n, kl, ku);
            let mut entries = Vec::new();
            for i in 0..n {
                for j in i.saturating_sub(ku)..(i + kl + 1).min(n) {
                    // store (j, i)? keep within band for (i=row, j=col): rows i, cols j with i-j in [-ku, kl]
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    let (r, c) = (j, i); // iterate transposed to cover the band symmetrically
                    if c + kl >= r && r + ku >= c {
                        band.add(r, c, v);
                        entries.push((r, c, v));
                    }
                }
            }
            // make it comfortably nonsingular
            for i in 0..n {
                band.add(i, i, 5.0);
                entries.push((i, i, 5.0));
            }
            let dense = dense_from_band(&band, &entries);
            let lu = band.factor().unwrap();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = lu.solve(&b);
            let xd = dense.lu().solve(&DVector::from_column_slice(&b)).unwrap();
            for i in 0..n {
                assert!((x[i] - xd[i]).abs() < 1e-10, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn banded_lu_pivots_zero_diagonal() {
        // saddle-point-like 2x2 with zero (1,1) block
        let mut band = Banded::zeros(2, 1, 1);
        band.add(0, 0, 0.0);
        band.add(0, 1, 1.0);
        band.add(1, 0, 1.0);
        band.add(1, 1, 0.0);
        let lu = band.factor().unwrap();
        let x = lu.solve(&[2.0, 3.0]);
        assert!((x[0] - 3.0).abs() < 1e-14);
        assert!((x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn banded_cholesky_matches_dense() {
        let mut rng = StdRng::seed_from_u64(11);
        for &(n, kb) in &[(1usize, 0usize), (6, 2), (50, 5)] {
            let mut spd = BandedSpd::zeros(n, kb);
            let mut dense = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in j..(j + kb + 1).min(n) {
                    let v: f64 = if i == j { 4.0 + rng.gen_range(0.0..1.0) } else { rng.gen_range(-0.5..0.5) };
                    spd.add(i, j, v);
                    dense[(i, j)] += v;
                    if i != j {
                        dense[(j, i)] += v;
                    }
                }
            }
            let chol = spd.factor().unwrap();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = chol.solve(&b);
            let xd = dense.cholesky().unwrap().solve(&DVector::from_column_slice(&b));
            for i in 0..n {
                assert!((x[i] - xd[i]).abs() < 1e-10);
            }
        }
        // indefinite matrix must be rejected
        let mut bad = BandedSpd::zeros(2, 1);
        bad.add(0, 0, 1.0);
        bad.add(1, 1, -1.0);
        assert!(bad.factor().is_err());
    }

    #[test]
    fn csr_matvec_and_symmetry() {
        let t = vec![(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0), (0, 1, 0.5), (1, 0, 0.5)];
        let a = Csr::from_triplets(2, 2, &t);
        assert_eq!(a.nnz(), 4);
        let y = a.matvec_alloc(&[1.0, 2.0]);
        assert!((y[0] - 1.0).abs() < 1e-15);
        assert!((y[1] - 3.5).abs() < 1e-15);
        assert!(a.symmetry_residual() < 1e-15);
    }

    #[test]
    fn gen_eig_rank_one_closed_form() {
        // Q = q qᵀ, M SPD => λmax = qᵀ M⁻¹ q
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let qv = DVector::from_column_slice(&[0.7, -1.2]);
        let q = &qv * qv.transpose();
        let (lam, shifted) = gen_eig_max(&q, &m).unwrap();
        let expect = (qv.transpose() * m.clone().try_inverse().unwrap() * &qv)[(0, 0)];
        assert!(!shifted);
        assert!((lam - expect).abs() < 1e-12 * expect.abs());
    }

    #[test]
    fn lstsq_recovers_exact_solution() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let x_true = DVector::from_column_slice(&[0.3, -0.8]);
        let b = &a * &x_true;
        let x = lstsq(&a, &b).unwrap();
        assert!((&x - &x_true).norm() < 1e-12);
        let a_def = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, -1.0, -2.0]);
        assert!(matches!(lstsq(&a_def, &DVector::zeros(3)), Err(Error::RankDeficient { .. })));
    }
}
