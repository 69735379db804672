//! Unsteady incompressible flow solver on the staggered (MAC) grid.
//!
//! Time discretization is semi-implicit: the convective term advects the new
//! velocity with the lagged field, while viscosity and pressure are implicit
//! and solved monolithically with the divergence constraint in one banded
//! saddle-point system per step. Outlets carry a traction condition fed by an
//! explicitly-coupled two-element Windkessel model per branch.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryLabel, Domain, DomainConfig, FaceKind};
use crate::linalg::Banded;
use crate::ops;

/// Diastolic baseline of the inlet pulse.
const GBASE: f64 = 0.2;

/// Parameter vector y = (t, HR, s, T_sys, u0, η) plus the fluid constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Time within the cardiac cycle (s).
    pub t: f64,
    /// Heart rate (beats/min).
    pub hr: f64,
    /// Inlet asymmetry (dimensionless).
    pub s: f64,
    /// Systole duration (s).
    pub t_sys: f64,
    /// Inlet velocity scale (cm/s).
    pub u0: f64,
    /// Distal resistance ratio R_d¹/R_d².
    pub eta: f64,
    /// Density (g/cm³).
    pub rho: f64,
    /// Dynamic viscosity (Poise).
    pub mu: f64,
}

impl FlowParams {
    pub fn period(&self) -> f64 {
        60.0 / self.hr
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (48.0..=120.0).contains(&self.hr)
            && (0.0..=0.2).contains(&self.s)
            && (0.2863..=0.3182).contains(&self.t_sys)
            && (17.0..=20.0).contains(&self.u0)
            && (0.5..=1.5).contains(&self.eta)
            && (0.0..=self.period()).contains(&self.t)
            && self.rho > 0.0
            && self.mu > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("flow parameters outside admissible ranges: {self:?}")))
        }
    }

    /// Observed coordinates (t, HR).
    pub fn observed(&self) -> (f64, f64) {
        (self.t, self.hr)
    }
}

/// Uniform sampling box for the five drawn parameters (t comes from the cycle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub hr: (f64, f64),
    pub s: (f64, f64),
    pub t_sys: (f64, f64),
    pub u0: (f64, f64),
    pub eta: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            hr: (48.0, 120.0),
            s: (0.0, 0.2),
            t_sys: (0.2863, 0.3182),
            u0: (17.0, 20.0),
            eta: (0.5, 1.5),
        }
    }
}

/// Temporal pulse of the inlet velocity: a sin² systolic bump over
/// [0, T_sys] on a diastolic baseline, periodic with the cardiac cycle.
pub fn inlet_profile_g(t: f64, hr: f64, t_sys: f64) -> f64 {
    debug_assert!(t >= 0.0 && t_sys < 60.0 / hr);
    let period = 60.0 / hr;
    let phase = t.rem_euclid(period);
    if phase <= t_sys {
        GBASE + (1.0 - GBASE) * (std::f64::consts::PI * phase / t_sys).sin().powi(2)
    } else {
        GBASE
    }
}

fn logit_normal_raw(xi: f64, s: f64) -> f64 {
    let l = (xi / (1.0 - xi)).ln();
    (-0.5 * (l - s) * (l - s)).exp() / (xi * (1.0 - xi))
}

/// Location of the logit-normal peak: solves ln(ξ/(1−ξ)) − (2ξ−1) = s,
/// whose left side is strictly increasing in ξ.
fn logit_normal_argmax(s: f64) -> f64 {
    let phi = |xi: f64| (xi / (1.0 - xi)).ln() - (2.0 * xi - 1.0);
    let (mut lo, mut hi) = if s >= 0.0 { (0.5, 1.0 - 1e-12) } else { (1e-12, 0.5) };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Spatial inlet profile: 1D logit-normal cross-section normalized to unit
/// peak; `s` skews the peak away from the centerline.
pub fn inlet_profile_f(xi: f64, s: f64) -> Result<f64> {
    if !(0.0 < xi && xi < 1.0) {
        return Err(Error::Domain(format!("inlet coordinate {xi} outside (0,1)")));
    }
    let peak = logit_normal_raw(logit_normal_argmax(s), s);
    Ok(logit_normal_raw(xi, s) / peak)
}

/// Two-element Windkessel constants for one outlet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindkesselParams {
    pub c_d: f64,
    pub r_p: f64,
    pub r_d: f64,
}

/// Distal pressures of the outlet branches.
#[derive(Debug, Clone, PartialEq)]
pub struct WindkesselState {
    pub p_d: Vec<f64>,
    pub params: Vec<WindkesselParams>,
}

impl WindkesselState {
    pub fn new(p_d: Vec<f64>, params: Vec<WindkesselParams>) -> Result<Self> {
        if p_d.len() != params.len() {
            return Err(Error::Config("one distal pressure per outlet required".into()));
        }
        for p in &params {
            if !(p.c_d > 0.0 && p.r_p >= 0.0 && p.r_d > 0.0) {
                return Err(Error::Config(format!("Windkessel constants must be positive: {p:?}")));
            }
        }
        Ok(WindkesselState { p_d, params })
    }
}

/// One explicit step of C_d ṗ_d + p_d/R_d = q followed by the algebraic
/// outlet pressure p̄ = p_d + R_p q.
///
/// The update decays with the factor 1 − Δt/(C_d R_d); Δt ≥ C_d R_d flips
/// its sign and is rejected.
pub fn windkessel_step(
    state: &WindkesselState,
    flux: &[f64],
    dt: f64,
) -> Result<(WindkesselState, Vec<f64>)> {
    assert_eq!(flux.len(), state.p_d.len());
    if dt <= 0.0 {
        return Err(Error::Domain("dt must be positive".into()));
    }
    let mut next = state.clone();
    let mut pbar = vec![0.0; flux.len()];
    for k in 0..flux.len() {
        let wk = state.params[k];
        let tau = wk.c_d * wk.r_d;
        if dt >= tau {
            return Err(Error::Stability(format!(
                "explicit Windkessel update unstable: dt = {dt} >= C_d R_d = {tau}"
            )));
        }
        next.p_d[k] = state.p_d[k] * (1.0 - dt / tau) + dt / wk.c_d * flux[k];
        pbar[k] = next.p_d[k] + wk.r_p * flux[k];
    }
    Ok((next, pbar))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Time step (s).
    pub dt: f64,
    pub n_cycles: usize,
    /// Snapshots saved per cycle, spread uniformly over the cycle.
    pub save_per_cycle: usize,
    pub rho: f64,
    pub mu: f64,
    pub c_d: f64,
    pub r_p: f64,
    /// Initial distal pressure (dyn/cm²).
    pub p_d0: f64,
    /// Distal resistance of branch 1; branch 2 gets R_d¹/η.
    pub r_d1: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dt: 2e-3,
            n_cycles: 2,
            save_per_cycle: 20,
            rho: 1.0,
            mu: 0.03,
            c_d: 1.6e-5,
            r_p: 7501.5,
            p_d0: 1.06e5,
            r_d1: 60012.0,
        }
    }
}

/// One saved state of the unsteady solve.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Velocity coefficients `[u | v]`.
    pub u: Vec<f64>,
    /// Cell-centered pressure coefficients.
    pub p: Vec<f64>,
    /// Parameter vector with `t` set to the phase within the cycle.
    pub params: FlowParams,
    pub cycle_index: usize,
    /// L² norm of the discrete divergence, reported with the snapshot.
    pub div_norm: f64,
}

/// A sampled solution set: one entry per parameter draw.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: FlowParams,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone)]
pub struct Manifold {
    pub domain_config: DomainConfig,
    pub solver_config: SolverConfig,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl Manifold {
    pub fn snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.trajectories.iter().flat_map(|t| t.snapshots.iter())
    }

    pub fn n_snapshots(&self) -> usize {
        self.trajectories.iter().map(|t| t.snapshots.len()).sum()
    }
}

enum Sink<'a> {
    /// Records the maximum |row − col| over the stencil template.
    Span(&'a mut usize),
    Matrix(&'a mut Banded),
}

impl Sink<'_> {
    #[inline]
    fn add(&mut self, r: usize, c: usize, v: f64) {
        match self {
            Sink::Span(span) => **span = (**span).max(r.abs_diff(c)),
            Sink::Matrix(b) => b.add(r, c, v),
        }
    }
}

/// Reusable discretization context for one domain + parameter set.
pub struct FlowSolver<'a> {
    pub domain: &'a Domain,
    pub cfg: SolverConfig,
    params: FlowParams,
    n_unknowns: usize,
    u_unk: Vec<Option<usize>>,
    v_unk: Vec<Option<usize>>,
    p_unk: Vec<usize>,
    band: usize,
    /// (u dof, normalized inlet coordinate).
    inlet: Vec<(usize, f64)>,
    /// u dofs per outlet, branch order [Outlet1, Outlet2].
    outlets: [Vec<usize>; 2],
    /// branch index per u dof (usize::MAX when not an outlet face)
    outlet_branch: Vec<usize>,
}

impl<'a> FlowSolver<'a> {
    pub fn new(domain: &'a Domain, cfg: SolverConfig, params: FlowParams) -> Result<Self> {
        params.validate()?;
        if cfg.dt <= 0.0 {
            return Err(Error::Domain("dt must be positive".into()));
        }
        // axial CFL guard; the semi-implicit scheme is robust, this protects accuracy
        if cfg.dt * params.u0 / domain.hx > 1.0 {
            return Err(Error::Stability(format!(
                "axial CFL violated: dt u0 / hx = {:.3}",
                cfg.dt * params.u0 / domain.hx
            )));
        }

        // unknown numbering by x-slab: u(i,·), v(i,·), p(i,·)
        let mut u_unk = vec![None; domain.n_u];
        let mut v_unk = vec![None; domain.n_v];
        let mut p_unk = vec![usize::MAX; domain.n_cells];
        let mut next = 0usize;
        for i in 0..=domain.nx {
            for j in 0..domain.ny {
                if let Some(id) = domain.u_id(i, j) {
                    let unknown = matches!(
                        domain.u_kind(id),
                        FaceKind::Interior
                            | FaceKind::Boundary(BoundaryLabel::Outlet1)
                            | FaceKind::Boundary(BoundaryLabel::Outlet2)
                    );
                    if unknown {
                        u_unk[id] = Some(next);
                        next += 1;
                    }
                }
            }
            if i < domain.nx {
                for j in 0..=domain.ny {
                    if let Some(id) = domain.v_id(i, j) {
                        if domain.v_kind(id) == FaceKind::Interior {
                            v_unk[id] = Some(next);
                            next += 1;
                        }
                    }
                }
                for j in 0..domain.ny {
                    if let Some(id) = domain.cell_id(i, j) {
                        p_unk[id] = next;
                        next += 1;
                    }
                }
            }
        }

        let inlet_faces = domain.boundary_faces(BoundaryLabel::Inlet);
        let n_in = inlet_faces.len();
        let inlet: Vec<(usize, f64)> = inlet_faces
            .iter()
            .enumerate()
            .map(|(k, f)| (f.dof, (k as f64 + 0.5) / n_in as f64))
            .collect();
        let outlets: [Vec<usize>; 2] = [
            domain.boundary_faces(BoundaryLabel::Outlet1).iter().map(|f| f.dof).collect(),
            domain.boundary_faces(BoundaryLabel::Outlet2).iter().map(|f| f.dof).collect(),
        ];
        let mut outlet_branch = vec![usize::MAX; domain.n_u];
        for (b, dofs) in outlets.iter().enumerate() {
            for &d in dofs {
                outlet_branch[d] = b;
            }
        }

        let mut solver = FlowSolver {
            domain,
            cfg,
            params,
            n_unknowns: next,
            u_unk,
            v_unk,
            p_unk,
            band: 0,
            inlet,
            outlets,
            outlet_branch,
        };
        // symbolic pass to size the band
        let zero = vec![0.0; domain.n_u + domain.n_v];
        let mut span = 0usize;
        let mut rhs = vec![0.0; next];
        solver.assemble(&zero, &zero, &[0.0, 0.0], &mut Sink::Span(&mut span), &mut rhs);
        solver.band = span;
        Ok(solver)
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_unknowns
    }

    /// Writes the inlet Dirichlet values for time `t` into a velocity vector.
    pub fn apply_inlet(&self, vel: &mut [f64], t: f64) {
        let g = inlet_profile_g(t, self.params.hr, self.params.t_sys);
        for &(dof, xi) in &self.inlet {
            vel[dof] = self.params.u0 * g * inlet_profile_f(xi, self.params.s).expect("xi in (0,1)");
        }
    }

    pub fn outlet_flux(&self, vel: &[f64]) -> Vec<f64> {
        self.outlets
            .iter()
            .map(|dofs| dofs.iter().map(|&d| vel[d] * self.domain.hy).sum())
            .collect()
    }

    /// Assembles the monolithic system for one step. `lag` is the advecting
    /// field (previous state), `bc` carries the new-time Dirichlet values,
    /// `pd_next` the updated distal pressures.
    ///
    /// The outlet traction is p̄ = p_d^{n+1} + R_p q^{n+1}. The distal ODE is
    /// explicit, but the algebraic R_p q part must take the new flux: with
    /// the lagged flux the antisymmetric outlet mode feeds back with gain
    /// R_p ∂q/∂p̄ ≫ 1 at this scale and the coupling diverges. q^{n+1} is
    /// linear in the outlet unknowns, so it folds into the matrix.
    fn assemble(&self, lag: &[f64], bc: &[f64], pd_next: &[f64], sink: &mut Sink, rhs: &mut [f64]) {
        let d = self.domain;
        let (hx, hy) = (d.hx, d.hy);
        let (rho, mu, dt) = (self.params.rho, self.params.mu, self.cfg.dt);
        let n_u = d.n_u;

        let lag_v = |i: i64, j: i64| -> f64 {
            if i < 0 || j < 0 || i as usize >= d.nx || j as usize > d.ny {
                return 0.0;
            }
            d.v_id(i as usize, j as usize).map_or(0.0, |id| lag[n_u + id])
        };
        let lag_u = |i: i64, j: i64| -> f64 {
            if i < 0 || j < 0 || i as usize > d.nx || j as usize >= d.ny {
                return 0.0;
            }
            d.u_id(i as usize, j as usize).map_or(0.0, |id| lag[id])
        };

        // ---- x momentum ----
        for id in 0..d.n_u {
            let Some(row) = self.u_unk[id] else { continue };
            let (i, j) = d.u_of(id);
            let (ii, jj) = (i as i64, j as i64);
            let is_outlet = i == d.nx;
            let ub = lag[id];
            let vb = 0.25 * (lag_v(ii - 1, jj) + lag_v(ii - 1, jj + 1) + lag_v(ii, jj) + lag_v(ii, jj + 1));

            rhs[row] += rho / dt * ub;
            sink.add(row, row, rho / dt);
            let mut center = 0.0;

            // transverse: vb ∂u/∂y (central) and −μ ∂²u/∂y², wall mirror ghosts
            for (dj, conv_sign) in [(1i64, 1.0), (-1i64, -1.0)] {
                let coef = rho * vb * conv_sign / (2.0 * hy) - mu / (hy * hy);
                let nid = if jj + dj < 0 || jj + dj >= d.ny as i64 { None } else { d.u_id(i, (jj + dj) as usize) };
                match nid {
                    Some(nid) => match self.u_unk[nid] {
                        Some(col) => sink.add(row, col, coef),
                        None => rhs[row] -= coef * bc[nid],
                    },
                    // no-slip wall beyond: ghost = −u(center)
                    None => center -= coef,
                }
            }
            center += 2.0 * mu / (hy * hy);

            if !is_outlet {
                // axial: ub ∂u/∂x (central) and −μ ∂²u/∂x²
                for (di, conv_sign) in [(1i64, 1.0), (-1i64, -1.0)] {
                    let nid = d.u_id((ii + di) as usize, j).expect("axial neighbor exists");
                    let coef = rho * ub * conv_sign / (2.0 * hx) - mu / (hx * hx);
                    match self.u_unk[nid] {
                        Some(col) => sink.add(row, col, coef),
                        None => rhs[row] -= coef * bc[nid],
                    }
                }
                center += 2.0 * mu / (hx * hx);
                let pw = self.p_unk[d.cell_id(i - 1, j).unwrap()];
                let pe = self.p_unk[d.cell_id(i, j).unwrap()];
                sink.add(row, pe, 1.0 / hx);
                sink.add(row, pw, -1.0 / hx);
            } else {
                // traction outlet over the boundary half control volume:
                // outer flux μ∂u/∂x − p = −p̄, inner flux one-sided
                let wid = d.u_id(i - 1, j).expect("upstream face exists");
                let cconv = rho * ub / hx; // one-sided ub (u_B − u_W)/hx
                let cvisc = 2.0 * mu / (hx * hx);
                center += cconv + cvisc;
                match self.u_unk[wid] {
                    Some(col) => sink.add(row, col, -cconv - cvisc),
                    None => rhs[row] += (cconv + cvisc) * bc[wid],
                }
                let pw = self.p_unk[d.cell_id(i - 1, j).unwrap()];
                sink.add(row, pw, -2.0 / hx);
                let branch = self.outlet_branch[id];
                for &other in &self.outlets[branch] {
                    let col = self.u_unk[other].expect("outlet faces are unknowns");
                    sink.add(row, col, 2.0 / hx * self.cfg.r_p * hy);
                }
                rhs[row] -= 2.0 / hx * pd_next[branch];
            }
            sink.add(row, row, center);
        }

        // ---- y momentum ----
        for id in 0..d.n_v {
            let Some(row) = self.v_unk[id] else { continue };
            let (i, j) = d.v_of(id);
            let ii = i as i64;
            let vb = lag[n_u + id];
            let ub = 0.25
                * (lag_u(ii, j as i64 - 1) + lag_u(ii, j as i64) + lag_u(ii + 1, j as i64 - 1) + lag_u(ii + 1, j as i64));

            rhs[row] += rho / dt * vb;
            sink.add(row, row, rho / dt);
            let mut center = 0.0;

            // axial: ub ∂v/∂x and −μ ∂²v/∂x²; outlet edge uses a zero-gradient
            // ghost (do-nothing tangential), inlet edge and walls mirror
            for (di, conv_sign) in [(1i64, 1.0), (-1i64, -1.0)] {
                let coef = rho * ub * conv_sign / (2.0 * hx) - mu / (hx * hx);
                let nid = if ii + di < 0 || ii + di >= d.nx as i64 { None } else { d.v_id((ii + di) as usize, j) };
                match nid {
                    Some(nid) => match self.v_unk[nid] {
                        Some(col) => sink.add(row, col, coef),
                        None => rhs[row] -= coef * bc[n_u + nid],
                    },
                    None => {
                        if ii + di >= d.nx as i64 {
                            center += coef;
                        } else {
                            center -= coef;
                        }
                    }
                }
            }
            center += 2.0 * mu / (hx * hx);

            // vertical neighbors always exist as dofs
            for (dj, conv_sign) in [(1i64, 1.0), (-1i64, -1.0)] {
                let nid = d.v_id(i, (j as i64 + dj) as usize).expect("vertical neighbor exists");
                let coef = rho * vb * conv_sign / (2.0 * hy) - mu / (hy * hy);
                match self.v_unk[nid] {
                    Some(col) => sink.add(row, col, coef),
                    None => rhs[row] -= coef * bc[n_u + nid],
                }
            }
            center += 2.0 * mu / (hy * hy);

            let ps = self.p_unk[d.cell_id(i, j - 1).unwrap()];
            let pn = self.p_unk[d.cell_id(i, j).unwrap()];
            sink.add(row, pn, 1.0 / hy);
            sink.add(row, ps, -1.0 / hy);
            sink.add(row, row, center);
        }

        // ---- continuity ----
        for (cid, (i, j)) in d.cells() {
            let row = self.p_unk[cid];
            let faces = [
                (d.u_id(i + 1, j).unwrap(), 1.0 / hx, true),
                (d.u_id(i, j).unwrap(), -1.0 / hx, true),
                (d.v_id(i, j + 1).unwrap(), 1.0 / hy, false),
                (d.v_id(i, j).unwrap(), -1.0 / hy, false),
            ];
            for (fid, coef, is_u) in faces {
                let unk = if is_u { self.u_unk[fid] } else { self.v_unk[fid] };
                let val = if is_u { bc[fid] } else { bc[n_u + fid] };
                match unk {
                    Some(col) => sink.add(row, col, coef),
                    None => rhs[row] -= coef * val,
                }
            }
        }
    }

    /// Advances one step in place; `t_next` is the time of the new state.
    pub fn step(
        &self,
        vel: &mut Vec<f64>,
        pres: &mut [f64],
        wk: &mut WindkesselState,
        t_next: f64,
    ) -> Result<()> {
        let flux = self.outlet_flux(vel);
        let (wk_next, _pbar_lagged) = windkessel_step(wk, &flux, self.cfg.dt)?;
        *wk = wk_next;

        let mut bc = vel.clone();
        self.apply_inlet(&mut bc, t_next);

        let mut rhs = vec![0.0; self.n_unknowns];
        let mut band = Banded::zeros(self.n_unknowns, self.band, self.band);
        {
            let mut sink = Sink::Matrix(&mut band);
            self.assemble(vel, &bc, &wk.p_d, &mut sink, &mut rhs);
        }
        let lu = band.factor()?;
        lu.solve_in_place(&mut rhs);

        let mut new_vel = bc;
        for (id, unk) in self.u_unk.iter().enumerate() {
            if let Some(r) = unk {
                new_vel[id] = rhs[*r];
            }
        }
        for (id, unk) in self.v_unk.iter().enumerate() {
            if let Some(r) = unk {
                new_vel[self.domain.n_u + id] = rhs[*r];
            }
        }
        for (cid, &r) in self.p_unk.iter().enumerate() {
            pres[cid] = rhs[r];
        }
        let vmax = new_vel.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if !vmax.is_finite() || vmax > 1e6 {
            return Err(Error::Stability(format!("velocity blow-up (max |u| = {vmax:.3e})")));
        }
        *vel = new_vel;
        Ok(())
    }
}

/// Runs the unsteady solve and returns snapshots of the last cycle only.
pub fn solve_unsteady(
    params: &FlowParams,
    domain: &Domain,
    cfg: &SolverConfig,
) -> Result<Vec<Snapshot>> {
    let solver = FlowSolver::new(domain, *cfg, *params)?;
    let period = params.period();
    let n_steps = (cfg.n_cycles as f64 * period / cfg.dt - 1e-9).ceil() as usize;
    let t0_last = (cfg.n_cycles - 1) as f64 * period;

    let mut save_steps: Vec<usize> = (0..cfg.save_per_cycle)
        .map(|k| {
            let t = t0_last + (k as f64 + 0.5) / cfg.save_per_cycle as f64 * period;
            ((t / cfg.dt).round() as usize).clamp(1, n_steps)
        })
        .collect();
    save_steps.dedup();

    let mut vel = vec![0.0; domain.n_u + domain.n_v];
    let mut pres = vec![0.0; domain.n_cells];
    let wk_params = vec![
        WindkesselParams { c_d: cfg.c_d, r_p: cfg.r_p, r_d: cfg.r_d1 },
        WindkesselParams { c_d: cfg.c_d, r_p: cfg.r_p, r_d: cfg.r_d1 / params.eta },
    ];
    let mut wk = WindkesselState::new(vec![cfg.p_d0; 2], wk_params)?;

    let mut out = Vec::with_capacity(save_steps.len());
    let mut save_iter = save_steps.iter().peekable();
    for n in 1..=n_steps {
        let t_next = n as f64 * cfg.dt;
        solver.step(&mut vel, &mut pres, &mut wk, t_next)?;
        if save_iter.peek() == Some(&&n) {
            save_iter.next();
            let phase = (t_next - t0_last).clamp(0.0, period);
            out.push(Snapshot {
                u: vel.clone(),
                p: pres.to_vec(),
                params: FlowParams { t: phase, ..*params },
                cycle_index: cfg.n_cycles - 1,
                div_norm: ops::divergence_norm(domain, &vel),
            });
        }
    }
    Ok(out)
}

/// Draws parameter vectors uniformly and solves each one; deterministic in
/// the seed, trajectories run in parallel.
pub fn sample_manifold(
    ranges: &ParamRanges,
    count: usize,
    seed: u64,
    domain: &Domain,
    cfg: &SolverConfig,
) -> Result<Manifold> {
    if count == 0 {
        return Err(Error::Config("manifold needs at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<FlowParams> = (0..count)
        .map(|_| FlowParams {
            t: 0.0,
            hr: rng.gen_range(ranges.hr.0..=ranges.hr.1),
            s: rng.gen_range(ranges.s.0..=ranges.s.1),
            t_sys: rng.gen_range(ranges.t_sys.0..=ranges.t_sys.1),
            u0: rng.gen_range(ranges.u0.0..=ranges.u0.1),
            eta: rng.gen_range(ranges.eta.0..=ranges.eta.1),
            rho: cfg.rho,
            mu: cfg.mu,
        })
        .collect();

    let trajectories: Vec<Result<Trajectory>> = draws
        .par_iter()
        .map(|params| {
            let snapshots = solve_unsteady(params, domain, cfg).map_err(|e| {
                Error::Stability(format!("solve failed for parameters {params:?}: {e}"))
            })?;
            Ok(Trajectory { params: *params, snapshots })
        })
        .collect();

    let mut out = Vec::with_capacity(count);
    for t in trajectories {
        out.push(t?);
    }
    Ok(Manifold {
        domain_config: domain.config().clone(),
        solver_config: *cfg,
        seed,
        trajectories: out,
    })
}
