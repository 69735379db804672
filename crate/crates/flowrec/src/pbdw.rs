//! Online reconstruction: the inf-sup stability constant, the PBDW normal
//! equations with their update term, piecewise dispatch over the trained
//! partition and the noise-robust least-squares variants.
//!
//! All per-cell least squares share one Householder QR of the full
//! cross-coordinate matrix: the factor of its leading n columns is the
//! leading block of R, so every truncation dimension reuses the same
//! offline decomposition.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::observation::{apply_functionals, ObservationSpace};
use crate::reduced::{PartitionCell, PartitionGrid};
use crate::spaces::{Field, GramOperator, OrthonormalBasis};

/// Stability floor below which reconstruction refuses to proceed.
pub const BETA_FLOOR: f64 = 1e-12;

/// β(V_n, W_m): smallest singular value of the cross Gram between the
/// G-orthonormal reduced basis and the G-orthonormal observation basis.
/// Zero when n > m, and always inside [0, 1].
pub fn infsup_beta(
    modes: &[Field],
    w: &ObservationSpace,
    g: &GramOperator,
    domain: &Domain,
) -> Result<f64> {
    if modes.is_empty() {
        return Err(Error::Domain("infsup_beta needs at least one mode".into()));
    }
    if modes.len() > w.m() {
        return Ok(0.0);
    }
    // the precondition: both bases orthonormal (W's is by construction)
    OrthonormalBasis::checked(modes.to_vec(), g)?;
    let mut cross = DMatrix::zeros(w.m(), modes.len());
    for (k, v) in modes.iter().enumerate() {
        let l = apply_functionals(domain, v, &w.vox)?;
        cross.set_column(k, &w.w_coords(&l));
    }
    Ok(crate::linalg::smallest_singular_value(&cross).clamp(0.0, 1.0))
}

/// Worst-case certificate ε_n / β.
pub fn error_bound(beta: f64, eps_n: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::ZeroBeta);
    }
    Ok(eps_n / beta)
}

/// Reconstruction output with its diagnostics.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    /// u* (velocity or joint state, matching the trained space).
    pub field: Field,
    /// Coefficients of v* in the cell basis.
    pub v_star_coeffs: Vec<f64>,
    pub cell_used: (usize, usize),
    pub n_used: usize,
    pub beta_used: f64,
    /// ‖ω − P_W v*‖, the size of the correction term.
    pub residual: f64,
    /// β⁻¹ ε_n with the cell's training ε.
    pub bound: f64,
}

/// Offline-factored least-squares operator of one cell.
pub struct OnlineCell {
    /// W-orthonormal coordinates of P_W v_k, m × n_modes.
    pub a_w: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    pub n_modes: usize,
}

impl OnlineCell {
    pub fn from_l_modes(l_modes: &DMatrix<f64>, w: &ObservationSpace) -> Self {
        let n_modes = l_modes.ncols();
        let mut a_w = l_modes.clone();
        for k in 0..n_modes {
            let col = w.w_coords(a_w.column(k).as_slice());
            a_w.set_column(k, &col);
        }
        let qr = a_w.clone().qr();
        OnlineCell { q: qr.q(), r: qr.r(), a_w, n_modes }
    }

    pub fn from_modes(
        modes: &[Field],
        w: &ObservationSpace,
        domain: &Domain,
    ) -> Result<Self> {
        let mut l_modes = DMatrix::zeros(w.m(), modes.len());
        for (k, v) in modes.iter().enumerate() {
            let l = apply_functionals(domain, v, &w.vox)?;
            for (i, &val) in l.iter().enumerate() {
                l_modes[(i, k)] = val;
            }
        }
        Ok(Self::from_l_modes(&l_modes, w))
    }

    /// β(V_n, W) of the leading n modes, straight from the stored coordinates.
    pub fn beta(&self, n: usize) -> f64 {
        crate::linalg::smallest_singular_value(&self.a_w.columns(0, n).clone_owned()).clamp(0.0, 1.0)
    }

    /// min over V_n of ‖ω − P_W v‖ through the prefix QR; `omega_w` holds
    /// W-orthonormal coordinates of the observation.
    pub fn v_star(&self, omega_w: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
        if n == 0 || n > self.n_modes {
            return Err(Error::Domain(format!("truncation n = {n} outside 1..={}", self.n_modes)));
        }
        let qt = self.q.columns(0, n).transpose() * omega_w;
        let rn = self.r.view((0, 0), (n, n));
        let mut c = qt;
        if !rn.solve_upper_triangular_mut(&mut c) {
            return Err(Error::IllConditioned(0.0));
        }
        Ok(c)
    }
}

/// Trained grid plus the factored per-cell operators.
pub struct Reconstructor<'a> {
    pub grid: &'a PartitionGrid,
    pub w: &'a ObservationSpace,
    online: Vec<OnlineCell>,
}

impl<'a> Reconstructor<'a> {
    pub fn new(grid: &'a PartitionGrid, w: &'a ObservationSpace) -> Self {
        let online = grid.cells.iter().map(|c| OnlineCell::from_l_modes(&c.l_modes, w)).collect();
        Reconstructor { grid, w, online }
    }

    pub fn cell(&self, kt: usize, kh: usize) -> (&PartitionCell, &OnlineCell) {
        let idx = kt * self.grid.k_prime + kh;
        (&self.grid.cells[idx], &self.online[idx])
    }

    /// Noiseless PBDW in a fixed cell: v* plus the W correction term,
    /// truncated at `n` (defaults to the cell's n*).
    pub fn reconstruct_in_cell(
        &self,
        z: &[f64],
        cell_idx: (usize, usize),
        n: Option<usize>,
    ) -> Result<ReconstructionResult> {
        let (cell, online) = self.cell(cell_idx.0, cell_idx.1);
        let n = n.unwrap_or(cell.n_star).min(online.n_modes);
        let beta = cell.beta.get(n - 1).copied().unwrap_or_else(|| online.beta(n));
        if beta < BETA_FLOOR {
            return Err(Error::IllConditioned(beta));
        }
        let omega_w = self.w.w_coords(z);
        let coeffs = online.v_star(&omega_w, n)?;

        // u* = v* + ω − P_W v*
        let eta_w = &omega_w - online.a_w.columns(0, n) * &coeffs;
        let mut field = self.w.field_from_w_coords(&eta_w);
        for (k, c) in coeffs.iter().enumerate() {
            field.axpy(*c, &cell.basis.modes[k]);
        }
        Ok(ReconstructionResult {
            field,
            v_star_coeffs: coeffs.iter().copied().collect(),
            cell_used: cell_idx,
            n_used: n,
            beta_used: beta,
            residual: eta_w.norm(),
            bound: error_bound(beta, cell.eps_cert[n - 1])?,
        })
    }

    /// Locates the cell of (t, HR) and reconstructs with its basis at n*.
    pub fn piecewise(&self, z: &[f64], y_obs: (f64, f64)) -> Result<ReconstructionResult> {
        let cell_idx = self.grid.locate(y_obs.0, y_obs.1)?;
        self.reconstruct_in_cell(z, cell_idx, None)
    }

    /// Noisy path: plain least squares on the raw measurements, v* only.
    pub fn ls(&self, z: &[f64], cell_idx: (usize, usize), n: usize) -> Result<ReconstructionResult> {
        let (cell, _) = self.cell(cell_idx.0, cell_idx.1);
        let coeffs = ls_unconstrained(&cell.l_modes, z, n)?;
        self.assemble_v_only(cell, cell_idx, coeffs, n)
    }

    /// Noisy path with the offline box constraints, v* only.
    pub fn cls(&self, z: &[f64], cell_idx: (usize, usize), n: usize) -> Result<ReconstructionResult> {
        let (cell, _) = self.cell(cell_idx.0, cell_idx.1);
        let coeffs = ls_constrained(&cell.l_modes, z, n, &cell.cls_bounds[..n])?;
        self.assemble_v_only(cell, cell_idx, coeffs, n)
    }

    fn assemble_v_only(
        &self,
        cell: &PartitionCell,
        cell_idx: (usize, usize),
        coeffs: DVector<f64>,
        n: usize,
    ) -> Result<ReconstructionResult> {
        let mut field = Field::zeros(cell.basis.modes[0].len(), cell.basis.tag);
        for (k, c) in coeffs.iter().enumerate() {
            field.axpy(*c, &cell.basis.modes[k]);
        }
        let beta = cell.beta.get(n - 1).copied().unwrap_or(0.0);
        let bound = if beta > 0.0 { cell.eps_cert[n - 1] / beta } else { f64::INFINITY };
        Ok(ReconstructionResult {
            field,
            v_star_coeffs: coeffs.iter().copied().collect(),
            cell_used: cell_idx,
            n_used: n,
            beta_used: beta,
            residual: f64::NAN,
            bound,
        })
    }
}

/// min over c of Σ_i |z_i − Σ_j c_j ℓ_i(v_j)|², leading n columns.
pub fn ls_unconstrained(l_modes: &DMatrix<f64>, z: &[f64], n: usize) -> Result<DVector<f64>> {
    if n == 0 || n > l_modes.ncols() || n > l_modes.nrows() {
        return Err(Error::Domain(format!("ls dimension n = {n} invalid")));
    }
    let a = l_modes.columns(0, n).clone_owned();
    crate::linalg::lstsq(&a, &DVector::from_column_slice(z))
}

/// Box-constrained least squares |c_j| ≤ bounds_j via projected gradient
/// with a Barzilai–Borwein step; tolerance 1e-10 on the projected gradient,
/// at most 5000 iterations.
pub fn ls_constrained(
    l_modes: &DMatrix<f64>,
    z: &[f64],
    n: usize,
    bounds: &[f64],
) -> Result<DVector<f64>> {
    if n == 0 || n > l_modes.ncols() || n > l_modes.nrows() {
        return Err(Error::Domain(format!("cls dimension n = {n} invalid")));
    }
    if bounds.len() != n || bounds.iter().any(|&b| b < 0.0 || b.is_nan()) {
        return Err(Error::Domain("cls bounds must be nonnegative, one per coefficient".into()));
    }
    // fast path: the unconstrained minimizer may already be feasible
    let a = l_modes.columns(0, n).clone_owned();
    let zv = DVector::from_column_slice(z);
    if let Ok(free) = crate::linalg::lstsq(&a, &zv) {
        if free.iter().zip(bounds).all(|(&c, &b)| c.abs() <= b) {
            return Ok(free);
        }
    }

    let proj = |c: &mut DVector<f64>| {
        for (j, v) in c.iter_mut().enumerate() {
            *v = v.clamp(-bounds[j], bounds[j]);
        }
    };
    let ata = a.transpose() * &a;
    let atz = a.transpose() * &zv;
    let lipschitz = ata.norm(); // Frobenius bound on the spectral norm
    // the optimality tolerance scales with the data, the problem is posed
    // in physical units
    let tol = 1e-10 * (1.0 + atz.norm());
    let max_iter = 5000;

    let mut c = DVector::zeros(n);
    proj(&mut c);
    let mut grad = &ata * &c - &atz;
    let mut step = 1.0 / lipschitz.max(1e-300);
    for _ in 0..max_iter {
        // projected-gradient optimality measure
        let mut probe = &c - &grad;
        proj(&mut probe);
        let pg_norm = (&probe - &c).norm();
        if pg_norm <= tol {
            return Ok(c);
        }
        let mut c_next = &c - &grad * step;
        proj(&mut c_next);
        let s = &c_next - &c;
        let y = &ata * &s;
        let sty = s.dot(&y);
        // BB1 step with a safeguarded fallback
        step = if sty > 1e-300 { s.dot(&s) / sty } else { 1.0 / lipschitz.max(1e-300) };
        grad += y;
        c = c_next;
    }
    // near-singular AᵀA stalls the iteration long before the tolerance; the
    // active set is stable by then, so polish it with an exact KKT solve on
    // the free block and keep the result only if it verifies
    if let Some(polished) = active_set_polish(&a, &zv, bounds, &c) {
        return Ok(polished);
    }
    Err(Error::SolverFail(format!(
        "projected gradient stalled before tol {tol:.3e} within {max_iter} iterations"
    )))
}

/// Primal active-set refinement seeded by the projected-gradient iterate:
/// repeatedly solve the free block by minimum-norm least squares, clamp the
/// worst violator, release the bound variable with the worst inward
/// multiplier, and accept only a KKT-verified point.
fn active_set_polish(
    a: &DMatrix<f64>,
    z: &DVector<f64>,
    bounds: &[f64],
    c: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = c.len();
    let mut active: Vec<Option<f64>> = (0..n)
        .map(|j| {
            let b = bounds[j];
            (b.is_finite() && (c[j].abs() - b).abs() <= 1e-8 * b.max(1.0)).then(|| b * c[j].signum())
        })
        .collect();

    let solve_free = |active: &[Option<f64>]| -> Option<DVector<f64>> {
        let free: Vec<usize> = (0..n).filter(|&j| active[j].is_none()).collect();
        let mut rhs = z.clone();
        for j in 0..n {
            if let Some(v) = active[j] {
                rhs -= a.column(j) * v;
            }
        }
        let mut out = DVector::zeros(n);
        if !free.is_empty() {
            let sub = DMatrix::from_fn(a.nrows(), free.len(), |r, k| a[(r, free[k])]);
            let svd = sub.svd(true, true);
            let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
            let cf = svd.solve(&rhs, 1e-12 * smax.max(f64::MIN_POSITIVE)).ok()?;
            for (k, &j) in free.iter().enumerate() {
                out[j] = cf[k];
            }
        }
        for j in 0..n {
            if let Some(v) = active[j] {
                out[j] = v;
            }
        }
        Some(out)
    };

    for _round in 0..(3 * n + 4) {
        let out = solve_free(&active)?;
        // clamp the worst infeasibility first
        let violator = (0..n)
            .filter(|&j| active[j].is_none() && bounds[j].is_finite() && out[j].abs() > bounds[j] * (1.0 + 1e-12))
            .max_by(|&x, &y| (out[x].abs() - bounds[x]).total_cmp(&(out[y].abs() - bounds[y])));
        if let Some(j) = violator {
            active[j] = Some(bounds[j] * out[j].signum());
            continue;
        }
        // feasible: release the active variable whose multiplier points inward
        let grad = a.transpose() * (a * &out - z);
        let gscale = 1e-8 * (1.0 + grad.norm());
        let release = (0..n)
            .filter_map(|j| {
                let v = active[j]?;
                let inward = if v > 0.0 { grad[j] } else { -grad[j] };
                (inward > gscale).then_some((j, inward))
            })
            .max_by(|x, y| x.1.total_cmp(&y.1));
        match release {
            Some((j, _)) => active[j] = None,
            None => {
                // KKT holds: free gradients vanish by the least-squares
                // solve, bound multipliers push outward, the point is box
                // feasible
                return Some(out);
            }
        }
    }
    None
}

/// Convenience wrappers over a one-off basis (no trained grid needed).
pub fn pbdw_v_star(
    z: &[f64],
    modes: &[Field],
    w: &ObservationSpace,
    domain: &Domain,
) -> Result<DVector<f64>> {
    let online = OnlineCell::from_modes(modes, w, domain)?;
    let beta = online.beta(modes.len());
    if beta < BETA_FLOOR {
        return Err(Error::IllConditioned(beta));
    }
    online.v_star(&w.w_coords(z), modes.len())
}

pub fn pbdw_reconstruct(
    z: &[f64],
    modes: &[Field],
    w: &ObservationSpace,
    domain: &Domain,
) -> Result<(Field, DVector<f64>, f64)> {
    let online = OnlineCell::from_modes(modes, w, domain)?;
    let beta = online.beta(modes.len());
    if beta < BETA_FLOOR {
        return Err(Error::IllConditioned(beta));
    }
    let omega_w = w.w_coords(z);
    let coeffs = online.v_star(&omega_w, modes.len())?;
    let eta_w = &omega_w - online.a_w.columns(0, modes.len()) * &coeffs;
    let mut field = w.field_from_w_coords(&eta_w);
    for (k, c) in coeffs.iter().enumerate() {
        field.axpy(*c, &modes[k]);
    }
    Ok((field, coeffs, eta_w.norm()))
}
