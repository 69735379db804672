//! Masked structured-grid domain: a 2D channel with one inlet, an interior
//! splitter that creates two outlet branches on the right edge, and an
//! optional wall-attached stenosis bump upstream of the split.
//!
//! Cells are `hx × hy` rectangles; velocity lives on cell faces (MAC layout)
//! and pressure on cell centers. The domain is immutable after construction
//! and owns the degree-of-freedom numbering used by every other module:
//! cells, u-faces and v-faces are each numbered i-major / j-fast.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryLabel {
    Inlet,
    Outlet1,
    Outlet2,
    Wall,
}

impl BoundaryLabel {
    pub const ALL: [BoundaryLabel; 4] =
        [BoundaryLabel::Inlet, BoundaryLabel::Outlet1, BoundaryLabel::Outlet2, BoundaryLabel::Wall];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitterConfig {
    /// Fractions of the channel length/height, `0 < x0 < x1 <= 1`, `0 < y0 < y1 < 1`.
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WallSide {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StenosisConfig {
    /// Axial extent as fractions of the channel length, strictly inside (0, 1).
    pub x0: f64,
    pub x1: f64,
    /// Peak obstruction depth as a fraction of the channel height, in [0, 1).
    pub depth_frac: f64,
    pub side: WallSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub nx: usize,
    pub ny: usize,
    pub length_cm: f64,
    pub height_cm: f64,
    #[serde(default)]
    pub splitter: Option<SplitterConfig>,
    #[serde(default)]
    pub stenosis: Option<StenosisConfig>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            nx: 64,
            ny: 32,
            length_cm: 6.0,
            height_cm: 1.0,
            splitter: Some(SplitterConfig { x0: 0.6, x1: 1.0, y0: 0.45, y1: 0.55 }),
            stenosis: Some(StenosisConfig { x0: 0.35, x1: 0.5, depth_frac: 0.25, side: WallSide::Top }),
        }
    }
}

/// One labeled boundary face of the active mask.
#[derive(Debug, Clone, Copy)]
pub struct Face {
    /// The active cell this face belongs to.
    pub cell: (usize, usize),
    /// Outward unit normal (axis aligned).
    pub normal: (f64, f64),
    /// Face midpoint in physical coordinates (cm).
    pub center: (f64, f64),
    /// Face measure (cm).
    pub length: f64,
    /// Index of the velocity degree of freedom sitting on this face.
    pub dof: usize,
    /// True for x-normal faces (u dof), false for y-normal faces (v dof).
    pub is_x_normal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceKind {
    Interior,
    Boundary(BoundaryLabel),
}

#[derive(Debug, Clone)]
pub struct Domain {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub length_cm: f64,
    pub height_cm: f64,
    active: Vec<bool>,
    pub n_cells: usize,
    cell_id: Vec<Option<usize>>,
    cell_of: Vec<(usize, usize)>,
    pub n_u: usize,
    u_id: Vec<Option<usize>>,
    u_of: Vec<(usize, usize)>,
    u_kind: Vec<FaceKind>,
    pub n_v: usize,
    v_id: Vec<Option<usize>>,
    v_of: Vec<(usize, usize)>,
    v_kind: Vec<FaceKind>,
    config: DomainConfig,
}

const OVERLAP_EPS: f64 = 1e-9;

/// Builds the masked domain and validates every boundary-label invariant.
pub fn build_domain(config: &DomainConfig) -> Result<Domain> {
    let (nx, ny) = (config.nx, config.ny);
    if nx < 8 || ny < 8 {
        return Err(Error::Config(format!("grid {nx}x{ny} too coarse, need nx, ny >= 8")));
    }
    if !(config.length_cm > 0.0 && config.height_cm > 0.0) {
        return Err(Error::Config("channel dimensions must be positive".into()));
    }
    if let Some(s) = &config.splitter {
        if !(0.0 < s.x0 && s.x0 < s.x1 && s.x1 <= 1.0 && 0.0 < s.y0 && s.y0 < s.y1 && s.y1 < 1.0) {
            return Err(Error::Config("splitter rectangle must lie strictly inside the channel".into()));
        }
    }
    if let Some(s) = &config.stenosis {
        if !(0.0 < s.x0 && s.x0 < s.x1 && s.x1 < 1.0 && (0.0..1.0).contains(&s.depth_frac)) {
            return Err(Error::Config("stenosis bump must lie strictly inside the channel".into()));
        }
    }

    let mut active = vec![true; nx * ny];
    let idx = |i: usize, j: usize| i * ny + j;

    if let Some(s) = &config.splitter {
        // block every cell whose open interior overlaps the splitter rectangle
        for i in 0..nx {
            let (cx0, cx1) = (i as f64 / nx as f64, (i + 1) as f64 / nx as f64);
            if cx0 + OVERLAP_EPS < s.x1 && cx1 > s.x0 + OVERLAP_EPS {
                for j in 0..ny {
                    let (cy0, cy1) = (j as f64 / ny as f64, (j + 1) as f64 / ny as f64);
                    if cy0 + OVERLAP_EPS < s.y1 && cy1 > s.y0 + OVERLAP_EPS {
                        active[idx(i, j)] = false;
                    }
                }
            }
        }
    }
    if let Some(s) = &config.stenosis {
        // smooth sin² bump sampled at cell centers
        for i in 0..nx {
            let xc = (i as f64 + 0.5) / nx as f64;
            if xc < s.x0 || xc > s.x1 {
                continue;
            }
            let depth = s.depth_frac * (std::f64::consts::PI * (xc - s.x0) / (s.x1 - s.x0)).sin().powi(2);
            for j in 0..ny {
                let yc = (j as f64 + 0.5) / ny as f64;
                let blocked = match s.side {
                    WallSide::Top => yc > 1.0 - depth,
                    WallSide::Bottom => yc < depth,
                };
                if blocked {
                    active[idx(i, j)] = false;
                }
            }
        }
    }

    if !active.iter().any(|&a| a) {
        return Err(Error::Config("no active cells remain".into()));
    }

    // single connected component
    let start = (0..nx * ny).find(|&k| active[k]).unwrap();
    let mut seen = vec![false; nx * ny];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 1usize;
    while let Some(k) = stack.pop() {
        let (i, j) = (k / ny, k % ny);
        let mut push = |ii: i64, jj: i64| {
            if ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny {
                let kk = idx(ii as usize, jj as usize);
                if active[kk] && !seen[kk] {
                    seen[kk] = true;
                    count += 1;
                    stack.push(kk);
                }
            }
        };
        push(i as i64 - 1, j as i64);
        push(i as i64 + 1, j as i64);
        push(i as i64, j as i64 - 1);
        push(i as i64, j as i64 + 1);
        let _ = &mut push;
    }
    let n_active = active.iter().filter(|&&a| a).count();
    if count != n_active {
        return Err(Error::Config(format!(
            "active region splits into multiple components ({count} of {n_active} cells reachable)"
        )));
    }

    // resolve the right edge into exactly two outlet runs (upper = Outlet1)
    let right_js: Vec<usize> = (0..ny).filter(|&j| active[idx(nx - 1, j)]).collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &j in &right_js {
        match runs.last_mut() {
            Some((_, hi)) if *hi + 1 == j => *hi = j,
            _ => runs.push((j, j)),
        }
    }
    if runs.len() != 2 {
        return Err(Error::Config(format!(
            "right edge must form exactly two outlet segments, found {}",
            runs.len()
        )));
    }
    let outlet1_run = runs[1]; // upper branch; runs[0] is the lower one

    let is_active = |i: i64, j: i64| {
        i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny && active[idx(i as usize, j as usize)]
    };

    // cell numbering
    let mut cell_id = vec![None; nx * ny];
    let mut cell_of = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            if active[idx(i, j)] {
                cell_id[idx(i, j)] = Some(cell_of.len());
                cell_of.push((i, j));
            }
        }
    }

    // u faces: (i, j) with i in 0..=nx sits between cells (i-1, j) and (i, j)
    let u_idx = |i: usize, j: usize| i * ny + j;
    let mut u_id = vec![None; (nx + 1) * ny];
    let mut u_of = Vec::new();
    let mut u_kind = Vec::new();
    for i in 0..=nx {
        for j in 0..ny {
            let west = is_active(i as i64 - 1, j as i64);
            let east = is_active(i as i64, j as i64);
            if west || east {
                u_id[u_idx(i, j)] = Some(u_of.len());
                u_of.push((i, j));
                u_kind.push(if west && east {
                    FaceKind::Interior
                } else if i == 0 {
                    FaceKind::Boundary(BoundaryLabel::Inlet)
                } else if i == nx {
                    if j >= outlet1_run.0 && j <= outlet1_run.1 {
                        FaceKind::Boundary(BoundaryLabel::Outlet1)
                    } else {
                        FaceKind::Boundary(BoundaryLabel::Outlet2)
                    }
                } else {
                    FaceKind::Boundary(BoundaryLabel::Wall)
                });
            }
        }
    }

    // v faces: (i, j) with j in 0..=ny sits between cells (i, j-1) and (i, j)
    let v_idx = |i: usize, j: usize| i * (ny + 1) + j;
    let mut v_id = vec![None; nx * (ny + 1)];
    let mut v_of = Vec::new();
    let mut v_kind = Vec::new();
    for i in 0..nx {
        for j in 0..=ny {
            let south = is_active(i as i64, j as i64 - 1);
            let north = is_active(i as i64, j as i64);
            if south || north {
                v_id[v_idx(i, j)] = Some(v_of.len());
                v_of.push((i, j));
                v_kind.push(if south && north {
                    FaceKind::Interior
                } else {
                    FaceKind::Boundary(BoundaryLabel::Wall)
                });
            }
        }
    }

    let domain = Domain {
        nx,
        ny,
        hx: config.length_cm / nx as f64,
        hy: config.height_cm / ny as f64,
        length_cm: config.length_cm,
        height_cm: config.height_cm,
        active,
        n_cells: cell_of.len(),
        cell_id,
        cell_of,
        n_u: u_of.len(),
        u_id,
        u_of,
        u_kind,
        n_v: v_of.len(),
        v_id,
        v_of,
        v_kind,
        config: config.clone(),
    };

    for label in BoundaryLabel::ALL {
        if domain.boundary_faces(label).is_empty() {
            return Err(Error::Config(format!("boundary label {label:?} is empty")));
        }
    }
    // inlet must be a single contiguous run
    let inlet = domain.boundary_faces(BoundaryLabel::Inlet);
    for w in inlet.windows(2) {
        if w[1].cell.1 != w[0].cell.1 + 1 {
            return Err(Error::Config("inlet is not connected".into()));
        }
    }
    Ok(domain)
}

impl Domain {
    pub fn config(&self) -> &DomainConfig {
        &self.config
    }

    #[inline]
    pub fn is_active(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.nx && (j as usize) < self.ny && self.active[i as usize * self.ny + j as usize]
    }

    #[inline]
    pub fn cell_id(&self, i: usize, j: usize) -> Option<usize> {
        self.cell_id[i * self.ny + j]
    }

    #[inline]
    pub fn cell_of(&self, id: usize) -> (usize, usize) {
        self.cell_of[id]
    }

    #[inline]
    pub fn u_id(&self, i: usize, j: usize) -> Option<usize> {
        self.u_id[i * self.ny + j]
    }

    #[inline]
    pub fn u_of(&self, id: usize) -> (usize, usize) {
        self.u_of[id]
    }

    #[inline]
    pub fn u_kind(&self, id: usize) -> FaceKind {
        self.u_kind[id]
    }

    #[inline]
    pub fn v_id(&self, i: usize, j: usize) -> Option<usize> {
        self.v_id[i * (self.ny + 1) + j]
    }

    #[inline]
    pub fn v_of(&self, id: usize) -> (usize, usize) {
        self.v_of[id]
    }

    #[inline]
    pub fn v_kind(&self, id: usize) -> FaceKind {
        self.v_kind[id]
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        self.cell_of.iter().enumerate().map(|(id, &ij)| (id, ij))
    }

    /// Physical center of a u-face.
    pub fn u_pos(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.hx, (j as f64 + 0.5) * self.hy)
    }

    /// Physical center of a v-face.
    pub fn v_pos(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx, j as f64 * self.hy)
    }

    /// Physical center of a cell.
    pub fn cell_pos(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy)
    }

    /// Ordered boundary faces carrying the given label, with outward normals.
    pub fn boundary_faces(&self, label: BoundaryLabel) -> Vec<Face> {
        let mut out = Vec::new();
        for (dof, (&(i, j), &kind)) in self.u_of.iter().zip(&self.u_kind).enumerate() {
            if kind != FaceKind::Boundary(label) {
                continue;
            }
            let east_active = self.is_active(i as i64, j as i64);
            let (normal, cell) = if east_active {
                ((-1.0, 0.0), (i, j))
            } else {
                ((1.0, 0.0), (i - 1, j))
            };
            out.push(Face {
                cell,
                normal,
                center: self.u_pos(i, j),
                length: self.hy,
                dof,
                is_x_normal: true,
            });
        }
        for (dof, (&(i, j), &kind)) in self.v_of.iter().zip(&self.v_kind).enumerate() {
            if kind != FaceKind::Boundary(label) {
                continue;
            }
            let north_active = self.is_active(i as i64, j as i64);
            let (normal, cell) = if north_active {
                ((0.0, -1.0), (i, j))
            } else {
                ((0.0, 1.0), (i, j - 1))
            };
            out.push(Face {
                cell,
                normal,
                center: self.v_pos(i, j),
                length: self.hx,
                dof,
                is_x_normal: false,
            });
        }
        // inlet/outlets are x-normal columns: order along the edge bottom-up
        out.sort_by_key(|f| (!f.is_x_normal, f.cell.0, f.cell.1));
        out
    }

    /// Boundary measure |Γ_label| in cm.
    pub fn boundary_measure(&self, label: BoundaryLabel) -> f64 {
        self.boundary_faces(label).iter().map(|f| f.length).sum()
    }

    /// Total number of boundary faces of the active mask.
    pub fn boundary_face_count(&self) -> usize {
        self.u_kind.iter().filter(|k| matches!(k, FaceKind::Boundary(_))).count()
            + self.v_kind.iter().filter(|k| matches!(k, FaceKind::Boundary(_))).count()
    }

    /// Area of the active region, |Ω| = n_cells·hx·hy.
    pub fn area(&self) -> f64 {
        self.n_cells as f64 * self.hx * self.hy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn splitter_config(nx: usize, ny: usize) -> DomainConfig {
        DomainConfig {
            nx,
            ny,
            length_cm: 6.0,
            height_cm: 1.0,
            splitter: Some(SplitterConfig { x0: 0.6, x1: 1.0, y0: 0.45, y1: 0.55 }),
            stenosis: None,
        }
    }

    #[test]
    fn plain_channel_misses_second_outlet() {
        let cfg = DomainConfig { nx: 16, ny: 8, length_cm: 2.0, height_cm: 1.0, splitter: None, stenosis: None };
        match build_domain(&cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("outlet"), "{msg}"),
            other => panic!("expected ConfigError, got {other:?}"),
        }
    }

    #[test]
    fn centered_splitter_gives_two_14_face_outlets() {
        let domain = build_domain(&splitter_config(64, 32)).unwrap();
        let o1 = domain.boundary_faces(BoundaryLabel::Outlet1);
        let o2 = domain.boundary_faces(BoundaryLabel::Outlet2);
        assert_eq!(o1.len(), 14);
        assert_eq!(o2.len(), 14);
        // upper branch is Outlet1
        assert!(o1.iter().map(|f| f.cell.1).min().unwrap() > o2.iter().map(|f| f.cell.1).max().unwrap());
    }

    #[test]
    fn labeled_faces_partition_the_boundary() {
        let domain = build_domain(&DomainConfig::default()).unwrap();
        let total: usize = BoundaryLabel::ALL.iter().map(|&l| domain.boundary_faces(l).len()).sum();
        assert_eq!(total, domain.boundary_face_count());
        let mut seen = std::collections::HashSet::new();
        for label in BoundaryLabel::ALL {
            for f in domain.boundary_faces(label) {
                assert!(seen.insert((f.is_x_normal, f.dof)), "face listed twice");
            }
        }
        for label in BoundaryLabel::ALL {
            assert!(domain.boundary_measure(label) > 0.0);
        }
    }

    #[test]
    fn inlet_normals_point_left_and_walls_are_axis_aligned() {
        let domain = build_domain(&DomainConfig::default()).unwrap();
        for f in domain.boundary_faces(BoundaryLabel::Inlet) {
            assert_eq!(f.normal, (-1.0, 0.0));
        }
        for f in domain.boundary_faces(BoundaryLabel::Wall) {
            let n = f.normal;
            assert!((n.0 * n.0 + n.1 * n.1 - 1.0).abs() < 1e-12);
            assert!(n.0 == 0.0 || n.1 == 0.0);
            if f.cell.1 == 0 || f.cell.1 == domain.ny - 1 {
                // exterior top/bottom walls
                if !f.is_x_normal {
                    assert!(n.1 == 1.0 || n.1 == -1.0);
                }
            }
        }
        for f in domain.boundary_faces(BoundaryLabel::Outlet1) {
            assert_eq!(f.normal, (1.0, 0.0));
        }
    }

    #[test]
    fn full_height_splitter_disconnects() {
        let cfg = DomainConfig {
            splitter: Some(SplitterConfig { x0: 0.3, x1: 0.6, y0: 0.02, y1: 0.98 }),
            stenosis: None,
            ..splitter_config(64, 32)
        };
        match build_domain(&cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("components"), "{msg}"),
            other => panic!("expected disconnect error, got {other:?}"),
        }
    }

    #[test]
    fn stenosis_blocks_top_cells_only() {
        let domain = build_domain(&DomainConfig::default()).unwrap();
        let s = domain.config().stenosis.unwrap();
        // at the bump apex the top rows are gone
        let i_mid = ((s.x0 + s.x1) / 2.0 * domain.nx as f64) as usize;
        assert!(!domain.is_active(i_mid as i64, domain.ny as i64 - 1));
        assert!(domain.is_active(i_mid as i64, 0));
    }
}
