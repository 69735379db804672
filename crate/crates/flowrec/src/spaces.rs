//! Discrete inner-product spaces realized as Gram operators.
//!
//! Velocity fields live in a discrete [H¹]² (mass plus full-gradient
//! stiffness assembled with the staggered-grid stencils of the flow solver),
//! pressure in L², and joint states in the block-diagonal product space.
//! All norms, distances and subspace projections downstream go through the
//! operators built here, so solver snapshots are exactly representable.

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::linalg::{BandedChol, BandedSpd, Csr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpaceTag {
    VelocityH1,
    PressureL2,
    ProductUxP,
    /// Scalar vorticity values on interior grid corners, plain L² weights.
    CurlL2,
}

impl std::fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Coefficient vector tagged with the space it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub coeffs: Vec<f64>,
    pub tag: SpaceTag,
}

impl Field {
    pub fn zeros(len: usize, tag: SpaceTag) -> Self {
        Field { coeffs: vec![0.0; len], tag }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field { coeffs: self.coeffs.iter().map(|&x| a * x).collect(), tag: self.tag }
    }

    pub fn axpy(&mut self, a: f64, other: &Field) {
        assert_eq!(self.tag, other.tag);
        for (x, &y) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *x += a * y;
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        assert_eq!(self.tag, other.tag);
        Field {
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(&a, &b)| a - b).collect(),
            tag: self.tag,
        }
    }
}

/// Sparse SPD matrix realizing an inner product.
pub struct GramOperator {
    pub tag: SpaceTag,
    pub matrix: Csr,
    chol: BandedChol,
    dim: usize,
}

impl GramOperator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_tag(&self, f: &Field) -> Result<()> {
        if f.tag != self.tag {
            return Err(Error::TagMismatch { expected: self.tag.to_string(), got: f.tag.to_string() });
        }
        if f.len() != self.dim {
            return Err(Error::Domain(format!("field length {} does not match Gram dimension {}", f.len(), self.dim)));
        }
        Ok(())
    }

    /// G x as a raw vector.
    pub fn apply(&self, f: &Field) -> Vec<f64> {
        self.matrix.matvec_alloc(&f.coeffs)
    }

    /// Solves G x = rhs (used for Riesz representers).
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.chol.solve(rhs)
    }
}

/// ⟨a, b⟩ in the space realized by `g`.
pub fn inner(g: &GramOperator, a: &Field, b: &Field) -> Result<f64> {
    g.check_tag(a)?;
    g.check_tag(b)?;
    Ok(g.matrix.bilinear(&a.coeffs, &b.coeffs))
}

/// ‖a‖ in the space realized by `g`.
pub fn norm(g: &GramOperator, a: &Field) -> Result<f64> {
    Ok(inner(g, a, a)?.max(0.0).sqrt())
}

/// Assembles the Gram operator for the requested space on this domain.
///
/// `VelocityH1` realizes ∫ u·v + ∇u:∇v with the same staggered stencils the
/// flow solver uses; `PressureL2` is the diagonal of cell volumes;
/// `ProductUxP` stacks both blocks; `CurlL2` weights interior corner nodes.
pub fn assemble_gram(domain: &Domain, tag: SpaceTag) -> GramOperator {
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    let (hx, hy) = (domain.hx, domain.hy);
    let vol = hx * hy;

    let dim = match tag {
        SpaceTag::VelocityH1 => {
            velocity_mass_triplets(domain, &mut trip);
            velocity_stiffness_triplets(domain, &mut trip);
            domain.n_u + domain.n_v
        }
        SpaceTag::PressureL2 => {
            for (id, _) in domain.cells() {
                trip.push((id, id, vol));
            }
            domain.n_cells
        }
        SpaceTag::ProductUxP => {
            velocity_mass_triplets(domain, &mut trip);
            velocity_stiffness_triplets(domain, &mut trip);
            let off_p = domain.n_u + domain.n_v;
            for (id, _) in domain.cells() {
                trip.push((off_p + id, off_p + id, vol));
            }
            off_p + domain.n_cells
        }
        SpaceTag::CurlL2 => {
            let corners = interior_corners(domain);
            for k in 0..corners.len() {
                trip.push((k, k, vol));
            }
            corners.len()
        }
    };

    let matrix = Csr::from_triplets(dim, dim, &trip);
    // bandwidth: same-component neighbors are at most ny + 2 apart in the
    // i-major numbering, and blocks never couple
    let kb = domain.ny + 2;
    let mut band = BandedSpd::zeros(dim, kb);
    for &(i, j, v) in &trip {
        if i >= j {
            band.add(i, j, v);
        }
    }
    let chol = band.factor().expect("Gram operator must be positive definite");
    GramOperator { tag, matrix, chol, dim }
}

fn add_diff(trip: &mut Vec<(usize, usize, f64)>, a: usize, b: usize, w: f64) {
    trip.push((a, a, w));
    trip.push((b, b, w));
    trip.push((a, b, -w));
    trip.push((b, a, -w));
}

/// L² mass of the velocity space: each active cell donates half its volume
/// to each of its four faces.
pub(crate) fn velocity_mass_triplets(domain: &Domain, trip: &mut Vec<(usize, usize, f64)>) {
    let vol = domain.hx * domain.hy;
    for (_, (i, j)) in domain.cells() {
        let uw = domain.u_id(i, j).unwrap();
        let ue = domain.u_id(i + 1, j).unwrap();
        let vs = domain.n_u + domain.v_id(i, j).unwrap();
        let vn = domain.n_u + domain.v_id(i, j + 1).unwrap();
        for dof in [uw, ue, vs, vn] {
            trip.push((dof, dof, 0.5 * vol));
        }
    }
}

/// ∫ ∇u : ∇v stiffness of the velocity space with the staggered stencils;
/// shared by the Gram assembly and the virtual-works estimator.
pub(crate) fn velocity_stiffness_triplets(domain: &Domain, trip: &mut Vec<(usize, usize, f64)>) {
    let (hx, hy) = (domain.hx, domain.hy);
    let vol = hx * hy;
    let off_v = domain.n_u;
    // ∂u/∂x and ∂v/∂y sit at cell centers
    for (_, (i, j)) in domain.cells() {
        let uw = domain.u_id(i, j).unwrap();
        let ue = domain.u_id(i + 1, j).unwrap();
        let vs = domain.v_id(i, j).unwrap() + off_v;
        let vn = domain.v_id(i, j + 1).unwrap() + off_v;
        add_diff(trip, ue, uw, vol / (hx * hx));
        add_diff(trip, vn, vs, vol / (hy * hy));
    }
    // ∂u/∂y between vertically adjacent u-faces; weight from active column pairs
    for i in 0..=domain.nx {
        for j in 0..domain.ny.saturating_sub(1) {
            let (Some(a), Some(b)) = (domain.u_id(i, j), domain.u_id(i, j + 1)) else { continue };
            let mut w = 0.0;
            if i > 0 && domain.is_active(i as i64 - 1, j as i64) && domain.is_active(i as i64 - 1, j as i64 + 1) {
                w += 0.5 * vol;
            }
            if domain.is_active(i as i64, j as i64) && domain.is_active(i as i64, j as i64 + 1) {
                w += 0.5 * vol;
            }
            if w > 0.0 {
                add_diff(trip, b, a, w / (hy * hy));
            }
        }
    }
    // ∂v/∂x between horizontally adjacent v-faces
    for i in 0..domain.nx.saturating_sub(1) {
        for j in 0..=domain.ny {
            let (Some(a), Some(b)) = (domain.v_id(i, j), domain.v_id(i + 1, j)) else { continue };
            let mut w = 0.0;
            if j > 0 && domain.is_active(i as i64, j as i64 - 1) && domain.is_active(i as i64 + 1, j as i64 - 1) {
                w += 0.5 * vol;
            }
            if domain.is_active(i as i64, j as i64) && domain.is_active(i as i64 + 1, j as i64) {
                w += 0.5 * vol;
            }
            if w > 0.0 {
                add_diff(trip, b + off_v, a + off_v, w / (hx * hx));
            }
        }
    }
}

/// Interior corner nodes (i, j), 1 ≤ i < nx, 1 ≤ j < ny with all four
/// surrounding cells active; carries the vorticity degrees of freedom.
pub fn interior_corners(domain: &Domain) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 1..domain.nx {
        for j in 1..domain.ny {
            let (i, j) = (i as i64, j as i64);
            if domain.is_active(i - 1, j - 1)
                && domain.is_active(i, j - 1)
                && domain.is_active(i - 1, j)
                && domain.is_active(i, j)
            {
                out.push((i as usize, j as usize));
            }
        }
    }
    out
}

/// A G-orthonormal family; orthonormality is verified once at construction.
pub struct OrthonormalBasis {
    pub fields: Vec<Field>,
    pub tag: SpaceTag,
}

impl OrthonormalBasis {
    pub fn checked(fields: Vec<Field>, g: &GramOperator) -> Result<Self> {
        let tag = g.tag;
        let mut worst: f64 = 0.0;
        let gx: Vec<Vec<f64>> = fields.iter().map(|f| g.apply(f)).collect();
        for (i, f) in fields.iter().enumerate() {
            g.check_tag(f)?;
            for j in 0..=i {
                let dot: f64 = f.coeffs.iter().zip(&gx[j]).map(|(&a, &b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        if worst > 1e-10 {
            return Err(Error::BasisNotOrthonormal(worst));
        }
        Ok(OrthonormalBasis { fields, tag })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// Orthogonal projection P_B x = Σ ⟨x, b_i⟩ b_i.
pub fn project_subspace(basis: &OrthonormalBasis, g: &GramOperator, x: &Field) -> Result<Field> {
    g.check_tag(x)?;
    if basis.tag != g.tag {
        return Err(Error::TagMismatch { expected: g.tag.to_string(), got: basis.tag.to_string() });
    }
    let gx = g.apply(x);
    let mut out = Field::zeros(x.len(), x.tag);
    for b in &basis.fields {
        let c: f64 = b.coeffs.iter().zip(&gx).map(|(&a, &w)| a * w).sum();
        out.axpy(c, b);
    }
    Ok(out)
}

/// Deterministic random field, handy for tests and probes.
pub fn random_field(rng: &mut impl Rng, dim: usize, tag: SpaceTag) -> Field {
    Field { coeffs: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), tag }
}
