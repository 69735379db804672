//! Discrete operators shared by the solver, the observation model and the
//! derived-quantity estimators. Velocity vectors follow the crate-wide layout
//! `[u faces | v faces]` in the domain's i-major numbering.

use crate::geometry::{BoundaryLabel, Domain};

/// Per-cell discrete divergence (u_E − u_W)/hx + (v_N − v_S)/hy.
pub fn divergence(domain: &Domain, vel: &[f64]) -> Vec<f64> {
    assert_eq!(vel.len(), domain.n_u + domain.n_v);
    let mut div = vec![0.0; domain.n_cells];
    for (id, (i, j)) in domain.cells() {
        let uw = vel[domain.u_id(i, j).unwrap()];
        let ue = vel[domain.u_id(i + 1, j).unwrap()];
        let vs = vel[domain.n_u + domain.v_id(i, j).unwrap()];
        let vn = vel[domain.n_u + domain.v_id(i, j + 1).unwrap()];
        div[id] = (ue - uw) / domain.hx + (vn - vs) / domain.hy;
    }
    div
}

/// L² norm of the discrete divergence.
pub fn divergence_norm(domain: &Domain, vel: &[f64]) -> f64 {
    let vol = domain.hx * domain.hy;
    divergence(domain, vel).iter().map(|d| d * d * vol).sum::<f64>().sqrt()
}

/// ∫_Γ u·n ds over one labeled boundary piece (midpoint rule).
pub fn boundary_flux(domain: &Domain, vel: &[f64], label: BoundaryLabel) -> f64 {
    domain
        .boundary_faces(label)
        .iter()
        .map(|f| {
            let value = if f.is_x_normal { vel[f.dof] } else { vel[domain.n_u + f.dof] };
            value * (f.normal.0 + f.normal.1) * f.length
        })
        .sum()
}

/// ∫ a·b dx over the velocity space, with the control-volume mass weights
/// the Gram operator uses.
pub fn mass_dot(domain: &Domain, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), domain.n_u + domain.n_v);
    assert_eq!(b.len(), a.len());
    let half = 0.5 * domain.hx * domain.hy;
    let mut acc = 0.0;
    for (_, (i, j)) in domain.cells() {
        let uw = domain.u_id(i, j).unwrap();
        let ue = domain.u_id(i + 1, j).unwrap();
        let vs = domain.n_u + domain.v_id(i, j).unwrap();
        let vn = domain.n_u + domain.v_id(i, j + 1).unwrap();
        for dof in [uw, ue, vs, vn] {
            acc += half * a[dof] * b[dof];
        }
    }
    acc
}

/// Boundary mean (1/|Γ|) ∫_Γ p ds of a cell-centered scalar, sampling the
/// pressure in the cell owning each face.
pub fn boundary_mean_pressure(domain: &Domain, p: &[f64], label: BoundaryLabel) -> f64 {
    assert_eq!(p.len(), domain.n_cells);
    let faces = domain.boundary_faces(label);
    let mut num = 0.0;
    let mut den = 0.0;
    for f in &faces {
        let id = domain.cell_id(f.cell.0, f.cell.1).unwrap();
        num += p[id] * f.length;
        den += f.length;
    }
    num / den
}
