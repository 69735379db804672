//! Measurement model: voxel-averaged beam projections of the velocity,
//! their Riesz representers, the observation projection P_W and the
//! synthetic Gaussian noise model.
//!
//! Each functional integrates u·b over one voxel (midpoint rule per cell).
//! Representers are solved against the velocity H¹ Gram; in the product
//! space their pressure block is identically zero, which makes the pressure
//! a purely unobserved quantity.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::spaces::{Field, GramOperator, SpaceTag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelConfig {
    /// Voxel edge length (cm).
    pub voxel_size_cm: f64,
    /// Sensed sub-rectangle as fractions of the channel: (x0, x1, y0, y1).
    pub region: (f64, f64, f64, f64),
    /// Beam angle against the axial direction (rad).
    pub beam_angle_rad: f64,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        // sense only the half upstream of the bifurcation, beam at π/4
        VoxelConfig {
            voxel_size_cm: 0.15,
            region: (0.0, 0.5, 0.0, 1.0),
            beam_angle_rad: std::f64::consts::FRAC_PI_4,
        }
    }
}

/// Voxel partition of the sensed region plus the beam direction.
#[derive(Debug, Clone)]
pub struct VoxelSet {
    /// Active-cell ids per voxel; pairwise disjoint, each nonempty.
    pub voxels: Vec<Vec<usize>>,
    /// Unit beam vector.
    pub beam: (f64, f64),
    pub config: VoxelConfig,
}

impl VoxelSet {
    pub fn m(&self) -> usize {
        self.voxels.len()
    }
}

/// Minimum cells a voxel must cover to stay; smaller ones sit on the masked
/// boundary and would make near-dependent functionals.
const MIN_CELLS_PER_VOXEL: usize = 4;

pub fn build_voxels(domain: &Domain, config: &VoxelConfig) -> Result<VoxelSet> {
    let vs = config.voxel_size_cm;
    if vs < 2.0 * domain.hx.min(domain.hy) {
        return Err(Error::Config(format!(
            "voxel size {vs} cm below twice the cell size"
        )));
    }
    let (fx0, fx1, fy0, fy1) = config.region;
    if !(fx0 < fx1 && fy0 < fy1) {
        return Err(Error::Config("empty voxel region".into()));
    }
    let (rx0, rx1) = (fx0 * domain.length_cm, fx1 * domain.length_cm);
    let (ry0, ry1) = (fy0 * domain.height_cm, fy1 * domain.height_cm);

    let mut tiles: std::collections::BTreeMap<(i64, i64), Vec<usize>> = Default::default();
    for (id, (i, j)) in domain.cells() {
        let (xc, yc) = domain.cell_pos(i, j);
        if xc < rx0 || xc > rx1 || yc < ry0 || yc > ry1 {
            continue;
        }
        let tile = (((xc - rx0) / vs).floor() as i64, ((yc - ry0) / vs).floor() as i64);
        tiles.entry(tile).or_default().push(id);
    }
    let voxels: Vec<Vec<usize>> =
        tiles.into_values().filter(|cells| cells.len() >= MIN_CELLS_PER_VOXEL).collect();
    if voxels.is_empty() {
        return Err(Error::Config("voxel tiling produced no usable voxels".into()));
    }
    Ok(VoxelSet {
        voxels,
        beam: (config.beam_angle_rad.cos(), config.beam_angle_rad.sin()),
        config: *config,
    })
}

fn velocity_len_ok(domain: &Domain, f: &Field) -> Result<()> {
    let expect = match f.tag {
        SpaceTag::VelocityH1 => domain.n_u + domain.n_v,
        SpaceTag::ProductUxP => domain.n_u + domain.n_v + domain.n_cells,
        _ => {
            return Err(Error::TagMismatch {
                expected: "VelocityH1 or ProductUxP".into(),
                got: f.tag.to_string(),
            })
        }
    };
    if f.len() != expect {
        return Err(Error::Domain(format!("field length {} does not match domain", f.len())));
    }
    Ok(())
}

/// ℓ_i(v) = ∫_{Ω_i} v·b dx for every voxel, midpoint rule per cell.
pub fn apply_functionals(domain: &Domain, v: &Field, vox: &VoxelSet) -> Result<Vec<f64>> {
    velocity_len_ok(domain, v)?;
    let vol = domain.hx * domain.hy;
    let (bx, by) = vox.beam;
    Ok(vox
        .voxels
        .iter()
        .map(|cells| {
            cells
                .iter()
                .map(|&cid| {
                    let (i, j) = domain.cell_of(cid);
                    let ux = 0.5 * (v.coeffs[domain.u_id(i, j).unwrap()] + v.coeffs[domain.u_id(i + 1, j).unwrap()]);
                    let uy = 0.5
                        * (v.coeffs[domain.n_u + domain.v_id(i, j).unwrap()]
                            + v.coeffs[domain.n_u + domain.v_id(i, j + 1).unwrap()]);
                    vol * (bx * ux + by * uy)
                })
                .sum()
        })
        .collect())
}

/// Load vector of ℓ_i against the velocity degrees of freedom.
fn functional_load(domain: &Domain, vox: &VoxelSet, i: usize) -> Vec<f64> {
    let mut load = vec![0.0; domain.n_u + domain.n_v];
    let vol = domain.hx * domain.hy;
    let (bx, by) = vox.beam;
    for &cid in &vox.voxels[i] {
        let (ci, cj) = domain.cell_of(cid);
        load[domain.u_id(ci, cj).unwrap()] += 0.5 * vol * bx;
        load[domain.u_id(ci + 1, cj).unwrap()] += 0.5 * vol * bx;
        load[domain.n_u + domain.v_id(ci, cj).unwrap()] += 0.5 * vol * by;
        load[domain.n_u + domain.v_id(ci, cj + 1).unwrap()] += 0.5 * vol * by;
    }
    load
}

/// Riesz representers of the voxel functionals and their Gram matrix.
pub struct ObservationSpace {
    pub vox: VoxelSet,
    pub representers: Vec<Field>,
    pub gram_w: DMatrix<f64>,
    /// Lower Cholesky factor of gram_w.
    chol_l: DMatrix<f64>,
    pub tag: SpaceTag,
    /// Spectral condition number of gram_w, reported for diagnostics.
    pub condition: f64,
}

impl ObservationSpace {
    pub fn m(&self) -> usize {
        self.representers.len()
    }

    /// Coordinates of P_W u in the G-orthonormal basis of W, from the raw
    /// measurement vector z_i = ℓ_i(u).
    pub fn w_coords(&self, z: &[f64]) -> DVector<f64> {
        let mut x = DVector::from_column_slice(z);
        self.chol_l.solve_lower_triangular_mut(&mut x);
        x
    }

    /// Field with the given coordinates in the G-orthonormal basis of W.
    pub fn field_from_w_coords(&self, coords: &DVector<f64>) -> Field {
        // basis B = Ω L⁻ᵀ, so B η = Ω (L⁻ᵀ η)
        let mut c = coords.clone();
        self.chol_l.transpose().solve_upper_triangular_mut(&mut c);
        let mut out = Field::zeros(self.representers[0].len(), self.tag);
        for (k, w) in self.representers.iter().enumerate() {
            out.axpy(c[k], w);
        }
        out
    }

    /// Solves gram_w c = z.
    pub fn gram_solve(&self, z: &[f64]) -> DVector<f64> {
        let mut x = DVector::from_column_slice(z);
        self.chol_l.solve_lower_triangular_mut(&mut x);
        self.chol_l.transpose().solve_upper_triangular_mut(&mut x);
        x
    }
}

/// Solves G ω_i = L_i for every functional; in the product space the
/// pressure block of each representer is exactly zero.
pub fn riesz_representers(
    domain: &Domain,
    vox: &VoxelSet,
    g: &GramOperator,
) -> Result<ObservationSpace> {
    if !matches!(g.tag, SpaceTag::VelocityH1 | SpaceTag::ProductUxP) {
        return Err(Error::TagMismatch {
            expected: "VelocityH1 or ProductUxP".into(),
            got: g.tag.to_string(),
        });
    }
    let m = vox.m();
    let n_vel = domain.n_u + domain.n_v;
    let loads: Vec<Vec<f64>> = (0..m).map(|i| functional_load(domain, vox, i)).collect();

    let pad = match g.tag {
        SpaceTag::VelocityH1 => 0,
        SpaceTag::ProductUxP => domain.n_cells,
        _ => unreachable!(),
    };
    let solves: Vec<Vec<f64>> = loads
        .par_iter()
        .map(|load| {
            if pad == 0 {
                g.solve(load)
            } else {
                // block-diagonal product Gram: velocity block equals the H¹
                // Gram, pressure block never couples; solve padded system
                let mut rhs = load.clone();
                rhs.extend(std::iter::repeat(0.0).take(pad));
                g.solve(&rhs)
            }
        })
        .collect();

    let representers: Vec<Field> = solves
        .into_iter()
        .map(|mut coeffs| {
            if pad > 0 {
                // enforce the exact zero pressure block
                for c in coeffs[n_vel..].iter_mut() {
                    *c = 0.0;
                }
            }
            Field { coeffs, tag: g.tag }
        })
        .collect();

    // gram_w[i][j] = ⟨ω_i, ω_j⟩ = L_i ⋅ ω_j
    let mut gram_w = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let dot: f64 = loads[i].iter().zip(&representers[j].coeffs[..n_vel]).map(|(&a, &b)| a * b).sum();
            gram_w[(i, j)] = dot;
        }
    }
    // symmetrize away solver roundoff
    let gram_w = (&gram_w + gram_w.transpose()) * 0.5;

    let eigs = nalgebra::SymmetricEigen::new(gram_w.clone()).eigenvalues;
    let emax = eigs.iter().copied().fold(f64::MIN, f64::max);
    let emin = eigs.iter().copied().fold(f64::MAX, f64::min);
    if !(emin > 1e-12 * emax) {
        return Err(Error::Config(format!(
            "voxel functionals numerically dependent (eigs {emin:.3e} .. {emax:.3e})"
        )));
    }
    let chol_l = gram_w
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinSolve("observation Gram not positive definite".into()))?
        .l()
        .clone_owned();
    Ok(ObservationSpace {
        vox: vox.clone(),
        representers,
        gram_w,
        chol_l,
        tag: g.tag,
        condition: emax / emin,
    })
}

/// P_W v via the gram_w solve; idempotent, G-orthogonal.
pub fn observe(domain: &Domain, v: &Field, w: &ObservationSpace) -> Result<Field> {
    if v.tag != w.tag {
        return Err(Error::TagMismatch { expected: w.tag.to_string(), got: v.tag.to_string() });
    }
    let z = apply_functionals(domain, v, &w.vox)?;
    let c = w.gram_solve(&z);
    let mut out = Field::zeros(v.len(), v.tag);
    for (k, rep) in w.representers.iter().enumerate() {
        out.axpy(c[k], rep);
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise with σ = sigma_ref/alpha; `alpha = ∞` returns
/// the input unchanged. Deterministic in the seed (Box–Muller on ChaCha).
pub fn add_noise(l_values: &[f64], alpha: f64, seed: u64, sigma_ref: f64) -> Vec<f64> {
    assert!(alpha > 0.0, "noise level alpha must be positive");
    if alpha.is_infinite() {
        return l_values.to_vec();
    }
    let sigma = sigma_ref / alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    l_values.iter().map(|&v| v + sigma * standard_normal(&mut rng)).collect()
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box–Muller; u1 is kept away from zero
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, DomainConfig};
    use crate::spaces::{assemble_gram, inner, norm, random_field};

    fn setup() -> (Domain, VoxelSet) {
        let domain = build_domain(&DomainConfig::default()).unwrap();
        let vox = build_voxels(&domain, &VoxelConfig::default()).unwrap();
        (domain, vox)
    }

    #[test]
    fn beam_and_tiling_follow_the_config() {
        let (domain, vox) = setup();
        let r = std::f64::consts::SQRT_2 / 2.0;
        assert!((vox.beam.0 - r).abs() < 1e-12 && (vox.beam.1 - r).abs() < 1e-12);
        assert!(vox.m() > 20, "expected a usable voxel count, got {}", vox.m());

        // every voxel cell sits in the left half, voxels are disjoint
        let mut seen = std::collections::HashSet::new();
        let mut region_cells = 0usize;
        for (id, (i, j)) in domain.cells() {
            let (xc, _) = domain.cell_pos(i, j);
            if xc <= 0.5 * domain.length_cm {
                region_cells += 1;
            }
            let _ = id;
        }
        let mut total = 0usize;
        for vxl in &vox.voxels {
            assert!(vxl.len() >= 4);
            for &cid in vxl {
                let (i, j) = domain.cell_of(cid);
                let (xc, _) = domain.cell_pos(i, j);
                assert!(xc <= 0.5 * domain.length_cm);
                assert!(seen.insert(cid), "cell in two voxels");
                total += 1;
            }
        }
        assert!(total <= region_cells);
    }

    #[test]
    fn functionals_are_linear_beam_projections() {
        let (domain, vox) = setup();
        let vol = domain.hx * domain.hy;
        let dim = domain.n_u + domain.n_v;
        // v = b everywhere → ℓ_i = |Ω_i|
        let mut along = Field::zeros(dim, SpaceTag::VelocityH1);
        along.coeffs[..domain.n_u].fill(vox.beam.0);
        along.coeffs[domain.n_u..].fill(vox.beam.1);
        let l = apply_functionals(&domain, &along, &vox).unwrap();
        for (i, &li) in l.iter().enumerate() {
            let area = vox.voxels[i].len() as f64 * vol;
            assert!((li - area).abs() < 1e-12 * area, "voxel {i}");
        }
        // v ⟂ b → 0
        let mut perp = Field::zeros(dim, SpaceTag::VelocityH1);
        perp.coeffs[..domain.n_u].fill(-vox.beam.1);
        perp.coeffs[domain.n_u..].fill(vox.beam.0);
        for &li in &apply_functionals(&domain, &perp, &vox).unwrap() {
            assert!(li.abs() < 1e-12);
        }
        // linearity on random fields
        let mut rng = StdRng::seed_from_u64(1);
        let a = random_field(&mut rng, dim, SpaceTag::VelocityH1);
        let b = random_field(&mut rng, dim, SpaceTag::VelocityH1);
        let la = apply_functionals(&domain, &a, &vox).unwrap();
        let lb = apply_functionals(&domain, &b, &vox).unwrap();
        let mut combo = a.scaled(0.3);
        combo.axpy(1.0, &b);
        let lc = apply_functionals(&domain, &combo, &vox).unwrap();
        for i in 0..vox.m() {
            assert!((lc[i] - (0.3 * la[i] + lb[i])).abs() < 1e-12 * (1.0 + lc[i].abs()));
        }
    }

    #[test]
    fn representers_reproduce_functionals() {
        let (domain, vox) = setup();
        let g = assemble_gram(&domain, SpaceTag::VelocityH1);
        let w = riesz_representers(&domain, &vox, &g).unwrap();
        assert!(w.condition.is_finite() && w.condition >= 1.0);
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let v = random_field(&mut rng, g.dim(), SpaceTag::VelocityH1);
            let nv = norm(&g, &v).unwrap();
            let l = apply_functionals(&domain, &v, &vox).unwrap();
            for (i, rep) in w.representers.iter().enumerate() {
                let ip = inner(&g, rep, &v).unwrap();
                assert!((ip - l[i]).abs() <= 1e-10 * nv, "voxel {i}: {} vs {}", ip, l[i]);
            }
        }
    }

    #[test]
    fn product_space_representers_have_zero_pressure_block() {
        let (domain, vox) = setup();
        let g = assemble_gram(&domain, SpaceTag::ProductUxP);
        let w = riesz_representers(&domain, &vox, &g).unwrap();
        let n_vel = domain.n_u + domain.n_v;
        for rep in &w.representers {
            assert!(rep.coeffs[n_vel..].iter().all(|&c| c == 0.0));
        }
        // reproducing property holds in the product space too
        let mut rng = StdRng::seed_from_u64(13);
        let v = random_field(&mut rng, g.dim(), SpaceTag::ProductUxP);
        let l = apply_functionals(&domain, &v, &vox).unwrap();
        let nv = norm(&g, &v).unwrap();
        for (i, rep) in w.representers.iter().enumerate() {
            let ip = inner(&g, rep, &v).unwrap();
            assert!((ip - l[i]).abs() <= 1e-10 * nv);
        }
    }

    #[test]
    fn single_whole_domain_voxel_projects_along_one_representer() {
        let domain = build_domain(&DomainConfig::default()).unwrap();
        let cfg = VoxelConfig { voxel_size_cm: 10.0, region: (0.0, 1.0, 0.0, 1.0), beam_angle_rad: 0.0 };
        let vox = build_voxels(&domain, &cfg).unwrap();
        assert_eq!(vox.m(), 1);
        let g = assemble_gram(&domain, SpaceTag::VelocityH1);
        let w = riesz_representers(&domain, &vox, &g).unwrap();
        // constant field along the beam
        let mut v = Field::zeros(g.dim(), SpaceTag::VelocityH1);
        v.coeffs[..domain.n_u].fill(2.0);
        let proj = observe(&domain, &v, &w).unwrap();
        let l1 = apply_functionals(&domain, &v, &vox).unwrap()[0];
        let w1 = &w.representers[0];
        let expect = w1.scaled(l1 / inner(&g, w1, w1).unwrap());
        assert!(norm(&g, &proj.sub(&expect)).unwrap() < 1e-10 * norm(&g, &expect).unwrap());
        let lproj = apply_functionals(&domain, &proj, &vox).unwrap()[0];
        assert!((lproj - l1).abs() < 1e-10 * l1.abs());
    }

    #[test]
    fn observe_is_an_orthogonal_projection() {
        let (domain, vox) = setup();
        let g = assemble_gram(&domain, SpaceTag::VelocityH1);
        let w = riesz_representers(&domain, &vox, &g).unwrap();
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..5 {
            let v = random_field(&mut rng, g.dim(), SpaceTag::VelocityH1);
            let pv = observe(&domain, &v, &w).unwrap();
            let ppv = observe(&domain, &pv, &w).unwrap();
            assert!(norm(&g, &ppv.sub(&pv)).unwrap() <= 1e-10 * norm(&g, &pv).unwrap());
            // measurements are reproduced
            let lv = apply_functionals(&domain, &v, &vox).unwrap();
            let lp = apply_functionals(&domain, &pv, &vox).unwrap();
            let scale = norm(&g, &v).unwrap();
            for i in 0..vox.m() {
                assert!((lv[i] - lp[i]).abs() <= 1e-10 * scale);
            }
            // self-adjoint
            let y = random_field(&mut rng, g.dim(), SpaceTag::VelocityH1);
            let py = observe(&domain, &y, &w).unwrap();
            let a = inner(&g, &pv, &y).unwrap();
            let b = inner(&g, &v, &py).unwrap();
            assert!((a - b).abs() <= 1e-10 * scale * norm(&g, &y).unwrap());
        }
        // element of W is reproduced, orthogonal complement maps to zero
        let mut rng2 = StdRng::seed_from_u64(29);
        let z: Vec<f64> = (0..vox.m()).map(|_| rng2.gen_range(-1.0..1.0)).collect();
        let v_in = w.field_from_w_coords(&w.w_coords(&z));
        let pv_in = observe(&domain, &v_in, &w).unwrap();
        assert!(norm(&g, &pv_in.sub(&v_in)).unwrap() <= 1e-9 * norm(&g, &v_in).unwrap());
        let v = random_field(&mut rng2, g.dim(), SpaceTag::VelocityH1);
        let v_perp = v.sub(&observe(&domain, &v, &w).unwrap());
        let p0 = observe(&domain, &v_perp, &w).unwrap();
        assert!(norm(&g, &p0).unwrap() <= 1e-9 * norm(&g, &v_perp).unwrap());
    }

    #[test]
    fn noise_model_matches_its_specification() {
        let z = vec![1.0, -2.0, 0.5];
        // alpha = ∞ is the identity
        assert_eq!(add_noise(&z, f64::INFINITY, 42, 3.0), z);
        // deterministic in the seed
        assert_eq!(add_noise(&z, 10.0, 42, 3.0), add_noise(&z, 10.0, 42, 3.0));
        assert_ne!(add_noise(&z, 10.0, 42, 3.0), add_noise(&z, 10.0, 43, 3.0));
        // empirical standard deviation within 2% over 1e5 draws
        let sigma_ref = 3.0;
        let alpha = 10.0;
        let n = 100_000;
        let base = vec![0.0; 1];
        let mut acc = 0.0;
        for seed in 0..n {
            let s = add_noise(&base, alpha, seed as u64, sigma_ref)[0];
            acc += s * s;
        }
        let std = (acc / n as f64).sqrt();
        let sigma = sigma_ref / alpha;
        assert!((std - sigma).abs() < 0.02 * sigma, "std {std} vs sigma {sigma}");
    }
}
