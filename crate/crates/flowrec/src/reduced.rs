//! Offline training: POD bases, approximation-error curves, the partition
//! search over the observed parameters (t, HR) and the per-cell selection
//! of the reduced dimension n*.
//!
//! The search is exhaustive over (K, K′). All candidates share one global
//! snapshot Gram matrix, so each cell POD is an eigensolve of a submatrix
//! and no mode fields are materialized until the winning partition is built.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{smallest_singular_value, sym_eig_desc};
use crate::observation::ObservationSpace;
use crate::spaces::{inner, norm, Field, GramOperator, SpaceTag};

/// Relative eigenvalue cutoff declaring POD rank.
const POD_RANK_TOL: f64 = 1e-12;

/// Hard cap on the reduced dimension; desk-scale cells never need more.
pub const N_CAP: usize = 60;

/// G-orthonormal modes with their singular values, nonincreasing.
pub struct ReducedBasis {
    pub modes: Vec<Field>,
    pub singular_values: Vec<f64>,
    pub tag: SpaceTag,
    /// Set when the requested size exceeded the numerical rank and the
    /// basis was truncated to the achievable rank.
    pub rank_warning: bool,
}

impl ReducedBasis {
    pub fn n(&self) -> usize {
        self.modes.len()
    }
}

/// POD by the method of snapshots under the G inner product.
pub fn pod_basis(snaps: &[Field], g: &GramOperator, n_max: usize) -> Result<ReducedBasis> {
    if snaps.is_empty() {
        return Err(Error::Domain("POD needs at least one snapshot".into()));
    }
    if n_max > snaps.len().min(g.dim()) {
        return Err(Error::Domain(format!(
            "n_max = {n_max} exceeds min(snapshot count {}, unknowns {})",
            snaps.len(),
            g.dim()
        )));
    }
    let n_s = snaps.len();
    let gx: Vec<Vec<f64>> = snaps.par_iter().map(|x| g.apply(x)).collect();
    let mut c = DMatrix::zeros(n_s, n_s);
    for i in 0..n_s {
        for j in i..n_s {
            let dot: f64 = snaps[i].coeffs.iter().zip(&gx[j]).map(|(&a, &b)| a * b).sum();
            c[(i, j)] = dot;
            c[(j, i)] = dot;
        }
    }
    let (vals, vecs) = sym_eig_desc(&c);
    let lmax = vals.first().copied().unwrap_or(0.0).max(0.0);
    let rank = vals.iter().filter(|&&l| l > POD_RANK_TOL * lmax).count();
    let keep = n_max.min(rank);
    let mut modes = Vec::with_capacity(keep);
    let mut singular_values = Vec::with_capacity(keep);
    for k in 0..keep {
        let sigma = vals[k].sqrt();
        let mut mode = Field::zeros(g.dim(), g.tag);
        for j in 0..n_s {
            mode.axpy(vecs[(j, k)] / sigma, &snaps[j]);
        }
        modes.push(mode);
        singular_values.push(sigma);
    }
    // one re-orthonormalization sweep against eigensolver roundoff
    for k in 0..modes.len() {
        for l in 0..k {
            let c = inner(g, &modes[k], &modes[l])?;
            let prev = modes[l].clone();
            modes[k].axpy(-c, &prev);
        }
        let nk = norm(g, &modes[k])?;
        modes[k] = modes[k].scaled(1.0 / nk);
    }
    Ok(ReducedBasis { modes, singular_values, tag: g.tag, rank_warning: keep < n_max })
}

/// Worst-case (ε_n) and root-mean-square (δ_n) projection errors of the test
/// set, indexed so entry `n − 1` belongs to an n-dimensional basis.
///
/// Distances come from explicit residual fields, not the Pythagoras update,
/// so fully-representable snapshots report errors at machine level instead
/// of the sqrt-cancellation floor.
pub fn eps_curve(basis: &ReducedBasis, g: &GramOperator, test_snaps: &[Field]) -> Result<(Vec<f64>, Vec<f64>)> {
    if test_snaps.is_empty() {
        return Err(Error::Domain("eps_curve needs a nonempty test set".into()));
    }
    let n_modes = basis.n();
    let mut eps = vec![0.0f64; n_modes];
    let mut delta2 = vec![0.0f64; n_modes];
    for x in test_snaps {
        let gx = g.apply(x);
        let mut residual = x.clone();
        for (k, mode) in basis.modes.iter().enumerate() {
            let c: f64 = mode.coeffs.iter().zip(&gx).map(|(&a, &b)| a * b).sum();
            residual.axpy(-c, mode);
            let d2 = inner(g, &residual, &residual)?.max(0.0);
            eps[k] = eps[k].max(d2.sqrt());
            delta2[k] += d2;
        }
    }
    let delta = delta2.iter().map(|&d| (d / test_snaps.len() as f64).sqrt()).collect();
    Ok((eps, delta))
}

/// Snapshot set prepared for the partition search: the global snapshot Gram,
/// the raw measurements of every snapshot and the observed coordinates.
pub struct TrainingSet<'a> {
    pub domain: &'a crate::geometry::Domain,
    pub fields: Vec<Field>,
    /// (t, HR) per snapshot; t is the phase within the cycle.
    pub obs: Vec<(f64, f64)>,
    pub g: &'a GramOperator,
    pub w: &'a ObservationSpace,
    gram: DMatrix<f64>,
    /// m × N matrix of ℓ_i(x_j).
    l_snap: DMatrix<f64>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(
        domain: &'a crate::geometry::Domain,
        fields: Vec<Field>,
        obs: Vec<(f64, f64)>,
        g: &'a GramOperator,
        w: &'a ObservationSpace,
    ) -> Result<Self> {
        assert_eq!(fields.len(), obs.len());
        if fields.is_empty() {
            return Err(Error::Domain("empty training set".into()));
        }
        let n_s = fields.len();
        let gx: Vec<Vec<f64>> = fields.par_iter().map(|x| g.apply(x)).collect();
        let mut gram = DMatrix::zeros(n_s, n_s);
        let rows: Vec<Vec<f64>> = (0..n_s)
            .into_par_iter()
            .map(|i| {
                (i..n_s)
                    .map(|j| fields[i].coeffs.iter().zip(&gx[j]).map(|(&a, &b)| a * b).sum())
                    .collect()
            })
            .collect();
        for (i, row) in rows.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                gram[(i, i + off)] = v;
                gram[(i + off, i)] = v;
            }
        }
        let mut l_snap = DMatrix::zeros(w.m(), n_s);
        for (j, x) in fields.iter().enumerate() {
            let l = crate::observation::apply_functionals(domain, x, &w.vox)?;
            for (i, &v) in l.iter().enumerate() {
                l_snap[(i, j)] = v;
            }
        }
        Ok(TrainingSet { domain, fields, obs, g, w, gram, l_snap })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Largest measurement over the whole set: the σ reference of the noise
    /// model, max_t max_i ℓ_i(u(t)).
    pub fn sigma_ref(&self) -> f64 {
        self.l_snap.iter().fold(f64::MIN, |a, &b| a.max(b))
    }
}

/// Uniform half-open cell membership for a snapshot: the last cell in each
/// direction is closed. The time axis normalizes by the snapshot's own
/// period T = 60/HR, so every heart rate sees K uniform subintervals.
pub fn locate_cell(t: f64, hr: f64, k: usize, k_prime: usize, hr_range: (f64, f64)) -> Result<(usize, usize)> {
    if !(hr_range.0..=hr_range.1).contains(&hr) {
        return Err(Error::OutOfRange(format!("HR {hr} outside [{}, {}]", hr_range.0, hr_range.1)));
    }
    let period = 60.0 / hr;
    if !(0.0..=period).contains(&t) {
        return Err(Error::OutOfRange(format!("t {t} outside [0, {period}] at HR {hr}")));
    }
    let kt = ((t / period * k as f64).floor() as usize).min(k - 1);
    let kh = (((hr - hr_range.0) / (hr_range.1 - hr_range.0) * k_prime as f64).floor() as usize)
        .min(k_prime - 1);
    Ok((kt, kh))
}

/// Per-cell curves computed on the snapshot-Gram submatrix.
struct CellAnalysis {
    /// snapshot indices of the cell
    idx: Vec<usize>,
    /// eigen pairs of the cell Gram, descending
    sigma: Vec<f64>,
    coeffs: DMatrix<f64>,
    eps: Vec<f64>,
    delta: Vec<f64>,
    beta: Vec<f64>,
    /// leave-one-out width estimate used by the certificates
    eps_cert: Vec<f64>,
}

fn analyze_cell(ts: &TrainingSet, idx: Vec<usize>, n_cap: usize, with_loo: bool) -> CellAnalysis {
    let nc = idx.len();
    let mut c = DMatrix::zeros(nc, nc);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            c[(a, b)] = ts.gram[(i, j)];
        }
    }
    let (vals, vecs) = sym_eig_desc(&c);
    let lmax = vals.first().copied().unwrap_or(0.0).max(0.0);
    let rank = vals.iter().filter(|&&l| l > POD_RANK_TOL * lmax).count();
    // keep n strictly below the cell count: at full rank the in-sample ε_n
    // collapses to zero, which degenerates both the n* selection and every
    // ε-based certificate
    let n_modes = rank.min(n_cap).min(ts.w.m()).min(N_CAP).min(nc.saturating_sub(1)).max(1);
    let sigma: Vec<f64> = vals.iter().take(n_modes).map(|&l| l.max(0.0).sqrt()).collect();

    // projection coefficients ⟨x_j, mode_k⟩ = σ_k a_kj
    let mut eps = vec![0.0f64; n_modes];
    let mut delta2 = vec![0.0f64; n_modes];
    for (b, _) in idx.iter().enumerate() {
        let mut rem = c[(b, b)];
        for k in 0..n_modes {
            let coef = sigma[k] * vecs[(b, k)];
            rem = (rem - coef * coef).max(0.0);
            eps[k] = eps[k].max(rem.sqrt());
            delta2[k] += rem;
        }
    }
    let delta: Vec<f64> = delta2.iter().map(|&d| (d / nc as f64).sqrt()).collect();

    // leave-one-out width: the in-sample maximum underestimates the width of
    // the manifold piece, so the certificate curve measures each snapshot
    // against the basis trained without it
    let mut eps_cert = eps.clone();
    if with_loo && nc > 2 {
        for b in 0..nc {
            let keep: Vec<usize> = (0..nc).filter(|&x| x != b).collect();
            let mut sub = DMatrix::zeros(nc - 1, nc - 1);
            for (r, &i) in keep.iter().enumerate() {
                for (s, &j) in keep.iter().enumerate() {
                    sub[(r, s)] = c[(i, j)];
                }
            }
            let (vals_b, vecs_b) = sym_eig_desc(&sub);
            let lmax_b = vals_b.first().copied().unwrap_or(0.0).max(0.0);
            let mut rem = c[(b, b)];
            for k in 0..n_modes {
                if k < nc - 1 && vals_b[k] > POD_RANK_TOL * lmax_b {
                    let sigma_bk = vals_b[k].max(0.0).sqrt();
                    let mut coef = 0.0;
                    for (r, &j) in keep.iter().enumerate() {
                        coef += vecs_b[(r, k)] * c[(b, j)];
                    }
                    coef /= sigma_bk;
                    rem = (rem - coef * coef).max(0.0);
                }
                eps_cert[k] = eps_cert[k].max(rem.sqrt());
            }
        }
    }

    // β(V_n, W): smallest singular value of the W-orthonormal coordinates of
    // the first n modes; ℓ(mode_k) = L_cell a_k / σ_k
    let mut l_modes = DMatrix::zeros(ts.w.m(), n_modes);
    for k in 0..n_modes {
        for (b, &j) in idx.iter().enumerate() {
            let scale = vecs[(b, k)] / sigma[k];
            for r in 0..ts.w.m() {
                l_modes[(r, k)] += ts.l_snap[(r, j)] * scale;
            }
        }
    }
    let mut a_w = l_modes.clone();
    for k in 0..n_modes {
        let col = ts.w.w_coords(a_w.column(k).as_slice());
        a_w.set_column(k, &col);
    }
    let beta: Vec<f64> = (1..=n_modes)
        .map(|n| smallest_singular_value(&a_w.columns(0, n).clone_owned()).clamp(0.0, 1.0))
        .collect();

    CellAnalysis { idx, sigma, coeffs: vecs, eps, delta, beta, eps_cert }
}

fn cell_indices(ts: &TrainingSet, k: usize, k_prime: usize, hr_range: (f64, f64)) -> Result<Vec<Vec<usize>>> {
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); k * k_prime];
    for (j, &(t, hr)) in ts.obs.iter().enumerate() {
        let (kt, kh) = locate_cell(t, hr, k, k_prime, hr_range)?;
        cells[kt * k_prime + kh].push(j);
    }
    for (flat, cell) in cells.iter().enumerate() {
        if cell.len() < 2 {
            return Err(Error::EmptyCell { k: flat / k_prime, k_prime: flat % k_prime, count: cell.len() });
        }
    }
    Ok(cells)
}

/// e(K, K′): the worst cell of min over n of ε_n / β_n.
pub fn partition_score(
    ts: &TrainingSet,
    k: usize,
    k_prime: usize,
    hr_range: (f64, f64),
    n_cap: usize,
) -> Result<f64> {
    let cells = cell_indices(ts, k, k_prime, hr_range)?;
    let scores: Vec<f64> = cells
        .into_par_iter()
        .map(|idx| {
            let cell = analyze_cell(ts, idx, n_cap, false);
            best_ratio(&cell.eps, &cell.beta).map(|(_, r)| r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.into_iter().fold(f64::MIN, f64::max))
}

/// argmin over n of ε_n/β_n; ties go to the smaller n. Returns (n, ratio)
/// with n counted from 1.
fn best_ratio(eps: &[f64], beta: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for n in 0..eps.len() {
        if beta[n] <= 0.0 {
            continue;
        }
        let r = eps[n] / beta[n];
        if best.map_or(true, |(_, rb)| r < rb) {
            best = Some((n + 1, r));
        }
    }
    best.ok_or(Error::ZeroBeta)
}

/// The multi-space selection n* = argmin ε_n/β_n for one trained cell.
pub fn select_n_star(eps: &[f64], beta: &[f64]) -> Result<usize> {
    best_ratio(eps, beta).map(|(n, _)| n)
}

/// One trained partition cell, ready for online reconstruction.
pub struct PartitionCell {
    pub basis: ReducedBasis,
    /// ε_n and δ_n over the cell's training snapshots, entry n−1 for size n.
    pub eps: Vec<f64>,
    /// Leave-one-out width estimate; certificates use this curve.
    pub eps_cert: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    /// Selected reduced dimension (1-based count of modes).
    pub n_star: usize,
    /// Box bounds max_u |⟨u, v_k⟩| over the cell's training snapshots.
    pub cls_bounds: Vec<f64>,
    /// ℓ_i(v_k), m × n_modes.
    pub l_modes: DMatrix<f64>,
    pub count: usize,
}

/// Partition of the observed-parameter rectangle with per-cell bases.
pub struct PartitionGrid {
    pub k: usize,
    pub k_prime: usize,
    pub hr_range: (f64, f64),
    pub cells: Vec<PartitionCell>,
    pub tag: SpaceTag,
    pub score: f64,
    /// (K, K′) candidates skipped for holding a cell with < 2 snapshots.
    pub skipped: Vec<(usize, usize)>,
}

impl PartitionGrid {
    pub fn cell(&self, kt: usize, kh: usize) -> &PartitionCell {
        &self.cells[kt * self.k_prime + kh]
    }

    pub fn locate(&self, t: f64, hr: f64) -> Result<(usize, usize)> {
        locate_cell(t, hr, self.k, self.k_prime, self.hr_range)
    }
}

/// Exhaustive (K, K′) search; candidates with an under-filled cell are
/// skipped and recorded, ties break toward smaller K + K′ then smaller K.
pub fn select_partition(
    ts: &TrainingSet,
    k_range: std::ops::RangeInclusive<usize>,
    k_prime_range: std::ops::RangeInclusive<usize>,
    hr_range: (f64, f64),
    n_cap: usize,
) -> Result<PartitionGrid> {
    let mut best: Option<(usize, usize, f64)> = None;
    let mut skipped = Vec::new();
    for k in k_range.clone() {
        for kp in k_prime_range.clone() {
            match partition_score(ts, k, kp, hr_range, n_cap) {
                Ok(score) => {
                    let better = match best {
                        None => true,
                        Some((bk, bkp, bs)) => {
                            score < bs * (1.0 - 1e-12)
                                || ((score - bs).abs() <= 1e-12 * bs.abs()
                                    && (k + kp, k) < (bk + bkp, bk))
                        }
                    };
                    if better {
                        best = Some((k, kp, score));
                    }
                }
                Err(Error::EmptyCell { .. }) => skipped.push((k, kp)),
                Err(e) => return Err(e),
            }
        }
    }
    let Some((k_opt, kp_opt, score)) = best else {
        return Err(Error::Config("every (K, K') candidate had an under-filled cell".into()));
    };

    // materialize the winning partition
    let cells_idx = cell_indices(ts, k_opt, kp_opt, hr_range)?;
    let analyses: Vec<CellAnalysis> =
        cells_idx.into_par_iter().map(|idx| analyze_cell(ts, idx, n_cap, true)).collect();
    let mut cells = Vec::with_capacity(analyses.len());
    for cell in analyses {
        let n_modes = cell.sigma.len();
        let mut modes = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            let mut mode = Field::zeros(ts.g.dim(), ts.g.tag);
            for (b, &j) in cell.idx.iter().enumerate() {
                mode.axpy(cell.coeffs[(b, k)] / cell.sigma[k], &ts.fields[j]);
            }
            modes.push(mode);
        }
        // re-orthonormalize exactly like pod_basis
        for k in 0..modes.len() {
            for l in 0..k {
                let c = inner(ts.g, &modes[k], &modes[l])?;
                let prev = modes[l].clone();
                modes[k].axpy(-c, &prev);
            }
            let nk = norm(ts.g, &modes[k])?;
            modes[k] = modes[k].scaled(1.0 / nk);
        }
        let mut l_modes = DMatrix::zeros(ts.w.m(), n_modes);
        for k in 0..n_modes {
            let l = crate::observation::apply_functionals(ts.domain, &modes[k], &ts.w.vox)?;
            for (i, &v) in l.iter().enumerate() {
                l_modes[(i, k)] = v;
            }
        }
        // ⟨x_j, v_k⟩ = σ_k a_kj for the POD construction
        let cls_bounds: Vec<f64> = (0..n_modes)
            .map(|k| {
                (0..cell.idx.len())
                    .map(|b| (cell.sigma[k] * cell.coeffs[(b, k)]).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let n_star = select_n_star(&cell.eps, &cell.beta)?;
        cells.push(PartitionCell {
            basis: ReducedBasis {
                modes,
                singular_values: cell.sigma.clone(),
                tag: ts.g.tag,
                rank_warning: false,
            },
            eps: cell.eps,
            eps_cert: cell.eps_cert,
            delta: cell.delta,
            beta: cell.beta,
            n_star,
            cls_bounds,
            l_modes,
            count: cell.idx.len(),
        });
    }
    Ok(PartitionGrid {
        k: k_opt,
        k_prime: kp_opt,
        hr_range,
        cells,
        tag: ts.g.tag,
        score,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, Domain, DomainConfig};
    use crate::observation::{build_voxels, riesz_representers, VoxelConfig};
    use crate::spaces::{assemble_gram, project_subspace, random_field, OrthonormalBasis};
    use rand::prelude::*;

    fn small_setup() -> (Domain, GramOperator) {
        let domain = build_domain(&DomainConfig {
            nx: 24,
            ny: 12,
            length_cm: 6.0,
            height_cm: 1.0,
            ..DomainConfig::default()
        })
        .unwrap();
        let g = assemble_gram(&domain, SpaceTag::VelocityH1);
        (domain, g)
    }

    #[test]
    fn pod_of_orthonormal_pair_keeps_unit_spectrum() {
        let (_, g) = small_setup();
        let mut rng = StdRng::seed_from_u64(1);
        let a = random_field(&mut rng, g.dim(), g.tag);
        let mut b = random_field(&mut rng, g.dim(), g.tag);
        let a = a.scaled(1.0 / norm(&g, &a).unwrap());
        let c = inner(&g, &b, &a).unwrap();
        b.axpy(-c, &a);
        let b = b.scaled(1.0 / norm(&g, &b).unwrap());

        let basis = pod_basis(&[a.clone(), b.clone()], &g, 2).unwrap();
        assert!(!basis.rank_warning);
        assert!((basis.singular_values[0] - 1.0).abs() < 1e-10);
        assert!((basis.singular_values[1] - 1.0).abs() < 1e-10);
        // span is preserved: both inputs project onto themselves
        let ob = OrthonormalBasis::checked(basis.modes.iter().cloned().collect(), &g).unwrap();
        for x in [&a, &b] {
            let px = project_subspace(&ob, &g, x).unwrap();
            assert!(norm(&g, &px.sub(x)).unwrap() < 1e-9);
        }
    }

    #[test]
    fn pod_of_single_snapshot_is_its_normalization() {
        let (_, g) = small_setup();
        let mut rng = StdRng::seed_from_u64(2);
        let x = random_field(&mut rng, g.dim(), g.tag);
        let nx = norm(&g, &x).unwrap();
        let basis = pod_basis(&[x.clone()], &g, 1).unwrap();
        assert!((basis.singular_values[0] - nx).abs() < 1e-10 * nx);
        let diff = basis.modes[0].sub(&x.scaled(1.0 / nx));
        assert!(norm(&g, &diff).unwrap() < 1e-10);
        // duplicated snapshot: rank 1, warning when asking for 2
        let again = pod_basis(&[x.clone(), x.clone()], &g, 2).unwrap();
        assert_eq!(again.n(), 1);
        assert!(again.rank_warning);
    }

    #[test]
    fn pod_energy_identity_matches_projection_oracle() {
        let (_, g) = small_setup();
        let mut rng = StdRng::seed_from_u64(3);
        // random 50-snapshot set from a 10-dimensional latent space
        let latent: Vec<Field> = (0..10).map(|_| random_field(&mut rng, g.dim(), g.tag)).collect();
        let snaps: Vec<Field> = (0..50)
            .map(|_| {
                let mut x = Field::zeros(g.dim(), g.tag);
                for l in &latent {
                    x.axpy(rng.gen_range(-1.0..1.0), l);
                }
                x
            })
            .collect();
        let basis = pod_basis(&snaps, &g, 10).unwrap();
        let total_energy: f64 = basis.singular_values.iter().map(|s| s * s).sum();
        for n in [1usize, 3, 7, 10] {
            let tail: f64 = basis.singular_values[n..].iter().map(|s| s * s).sum();
            let ob = OrthonormalBasis::checked(basis.modes[..n].to_vec(), &g).unwrap();
            let oracle: f64 = snaps
                .iter()
                .map(|x| {
                    let px = project_subspace(&ob, &g, x).unwrap();
                    inner(&g, &x.sub(&px), &x.sub(&px)).unwrap()
                })
                .sum();
            assert!(
                (tail - oracle).abs() <= 1e-8 * total_energy,
                "n={n}: tail {tail} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn eps_curve_is_monotone_and_vanishes_in_sample() {
        let (_, g) = small_setup();
        let mut rng = StdRng::seed_from_u64(4);
        let snaps: Vec<Field> = (0..8).map(|_| random_field(&mut rng, g.dim(), g.tag)).collect();
        let basis = pod_basis(&snaps, &g, 8).unwrap();
        let (eps, delta) = eps_curve(&basis, &g, &snaps).unwrap();
        let scale = norm(&g, &snaps[0]).unwrap();
        assert!(eps[7] <= 1e-8 * scale, "full-rank eps {}", eps[7]);
        for n in 1..eps.len() {
            assert!(eps[n] <= eps[n - 1] + 1e-12);
            assert!(delta[n] <= delta[n - 1] + 1e-12);
        }
        for n in 0..eps.len() {
            assert!(delta[n] <= eps[n] + 1e-12, "delta must not exceed eps");
        }
    }

    fn synthetic_training<'a>(
        domain: &'a Domain,
        g: &'a GramOperator,
        w: &'a ObservationSpace,
        obs: Vec<(f64, f64)>,
        seed: u64,
    ) -> TrainingSet<'a> {
        let mut rng = StdRng::seed_from_u64(seed);
        let fields: Vec<Field> =
            (0..obs.len()).map(|_| random_field(&mut rng, g.dim(), g.tag)).collect();
        TrainingSet::new(domain, fields, obs, g, w).unwrap()
    }

    #[test]
    fn degenerate_partition_score_equals_global_ratio() {
        let (domain, g) = small_setup();
        let vox = build_voxels(&domain, &VoxelConfig { voxel_size_cm: 0.3, ..VoxelConfig::default() }).unwrap();
        let w = riesz_representers(&domain, &vox, &g).unwrap();
        let obs: Vec<(f64, f64)> = (0..12).map(|k| (0.1 + 0.05 * k as f64, 60.0)).collect();
        let ts = synthetic_training(&domain, &g, &w, obs, 5);

        let n_cap = 6;
        let score = partition_score(&ts, 1, 1, (48.0, 120.0), n_cap).unwrap();
        // oracle: global POD + eps_curve + explicit beta over mode fields
        let basis = pod_basis(&ts.fields, &g, n_cap).unwrap();
        let (eps, _) = eps_curve(&basis, &g, &ts.fields).unwrap();
        let mut best = f64::MAX;
        for n in 1..=basis.n() {
            let beta = crate::pbdw::infsup_beta(&basis.modes[..n], &w, &g, &domain).unwrap();
            if beta > 0.0 {
                best = best.min(eps[n - 1] / beta);
            }
        }
        assert!((score - best).abs() <= 1e-6 * best.abs().max(1e-12), "{score} vs {best}");

        // invariance under snapshot reordering
        let mut order: Vec<usize> = (0..ts.fields.len()).collect();
        order.shuffle(&mut StdRng::seed_from_u64(9));
        let fields2: Vec<Field> = order.iter().map(|&i| ts.fields[i].clone()).collect();
        let obs2: Vec<(f64, f64)> = order.iter().map(|&i| ts.obs[i]).collect();
        let ts2 = TrainingSet::new(&domain, fields2, obs2, &g, &w).unwrap();
        let score2 = partition_score(&ts2, 1, 1, (48.0, 120.0), n_cap).unwrap();
        assert!((score - score2).abs() <= 1e-8 * score.abs());
    }

    #[test]
    fn two_cell_score_matches_per_cell_oracle() {
        let (domain, g) = small_setup();
        let vox = build_voxels(&domain, &VoxelConfig { voxel_size_cm: 0.3, ..VoxelConfig::default() }).unwrap();
        let w = riesz_representers(&domain, &vox, &g).unwrap();
        // HR = 60 → period 1 s; first three snapshots in the early half cycle
        let obs = vec![(0.1, 60.0), (0.2, 60.0), (0.3, 60.0), (0.6, 60.0), (0.7, 60.0), (0.9, 60.0)];
        let ts = synthetic_training(&domain, &g, &w, obs.clone(), 6);

        let n_cap = 2;
        let score = partition_score(&ts, 2, 1, (48.0, 120.0), n_cap).unwrap();
        let mut oracle: f64 = f64::MIN;
        for half in 0..2 {
            let idx: Vec<usize> =
                (0..obs.len()).filter(|&j| (obs[j].0 < 0.5) == (half == 0)).collect();
            let fields: Vec<Field> = idx.iter().map(|&j| ts.fields[j].clone()).collect();
            let basis = pod_basis(&fields, &g, n_cap).unwrap();
            let (eps, _) = eps_curve(&basis, &g, &fields).unwrap();
            let mut best = f64::MAX;
            for n in 1..=basis.n() {
                let beta = crate::pbdw::infsup_beta(&basis.modes[..n], &w, &g, &domain).unwrap();
                if beta > 0.0 {
                    best = best.min(eps[n - 1] / beta);
                }
            }
            oracle = oracle.max(best);
        }
        assert!((score - oracle).abs() <= 1e-6 * oracle.abs().max(1e-12), "{score} vs {oracle}");
    }

    #[test]
    fn time_degenerate_manifold_selects_single_time_cell() {
        let (domain, g) = small_setup();
        let vox = build_voxels(&domain, &VoxelConfig { voxel_size_cm: 0.3, ..VoxelConfig::default() }).unwrap();
        let w = riesz_representers(&domain, &vox, &g).unwrap();
        // all snapshots share one t; K > 1 always leaves empty time cells
        let obs: Vec<(f64, f64)> = (0..10)
            .map(|k| (0.25, 50.0 + 7.0 * k as f64))
            .collect();
        let ts = synthetic_training(&domain, &g, &w, obs, 7);
        let grid = select_partition(&ts, 1..=3, 1..=2, (48.0, 120.0), N_CAP).unwrap();
        assert_eq!(grid.k, 1, "time splitting cannot help a time-degenerate manifold");
        assert!(grid.skipped.iter().all(|&(k, _)| k > 1));
        for cell in &grid.cells {
            assert!(cell.n_star >= 1 && cell.n_star <= cell.basis.n());
            assert!(cell.count >= 2);
        }
        // grid score must not exceed the degenerate (1,1) score
        let s11 = partition_score(&ts, 1, 1, (48.0, 120.0), N_CAP).unwrap();
        assert!(grid.score <= s11 + 1e-12);
    }

    #[test]
    fn n_star_selection_follows_the_ratio() {
        // β ≡ 1 with strictly decreasing ε → n* = m
        let eps = vec![0.9, 0.5, 0.2, 0.1];
        let beta = vec![1.0, 1.0, 1.0, 1.0];
        assert_eq!(select_n_star(&eps, &beta).unwrap(), 4);
        // flat ε with decreasing β → n* = 1
        let eps = vec![0.3, 0.3, 0.3, 0.3];
        let beta = vec![0.9, 0.7, 0.4, 0.1];
        assert_eq!(select_n_star(&eps, &beta).unwrap(), 1);
        // hand-checked interior minimum: ratios 1.0, 0.25, 0.5
        let eps = vec![0.8, 0.2, 0.1];
        let beta = vec![0.8, 0.8, 0.2];
        assert_eq!(select_n_star(&eps, &beta).unwrap(), 2);
        // ties break toward smaller n
        let eps = vec![0.4, 0.4];
        let beta = vec![0.8, 0.8];
        assert_eq!(select_n_star(&eps, &beta).unwrap(), 1);
        assert!(matches!(select_n_star(&[1.0], &[0.0]), Err(Error::ZeroBeta)));
    }

    #[test]
    fn half_open_cells_tile_the_rectangle() {
        // interior breakpoints belong to the right cell, endpoints close
        let hr_range = (48.0, 120.0);
        assert_eq!(locate_cell(0.0, 60.0, 4, 3, hr_range).unwrap(), (0, 0));
        // t = T/4 at HR 60 (period 1 s) is the first interior breakpoint
        assert_eq!(locate_cell(0.25, 60.0, 4, 3, hr_range).unwrap().0, 1);
        assert_eq!(locate_cell(1.0, 60.0, 4, 3, hr_range).unwrap().0, 3);
        assert_eq!(locate_cell(0.0, 120.0, 4, 3, hr_range).unwrap().1, 2);
        assert_eq!(locate_cell(0.0, 48.0 + 24.0, 4, 3, hr_range).unwrap().1, 1);
        assert!(matches!(locate_cell(1.2, 60.0, 4, 3, hr_range), Err(Error::OutOfRange(_))));
        assert!(matches!(locate_cell(0.0, 140.0, 4, 3, hr_range), Err(Error::OutOfRange(_))));
    }
}
