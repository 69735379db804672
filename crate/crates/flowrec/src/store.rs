//! On-disk formats: the snapshot store (one directory per manifold, a JSON
//! manifest plus per-snapshot flat little-endian f64 arrays, velocity block
//! then pressure block) and the trained store (partition grids with modes
//! as binary arrays, curves and selections in JSON, curves also as CSV).

use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{build_domain, Domain, DomainConfig};
use crate::observation::{apply_functionals, ObservationSpace, VoxelConfig};
use crate::reduced::{PartitionCell, PartitionGrid, ReducedBasis};
use crate::solver::{FlowParams, Manifold, Snapshot, SolverConfig, Trajectory};
use crate::spaces::{Field, SpaceTag};

pub const MANIFOLD_FORMAT: &str = "flowrec-manifold-v1";
pub const TRAINED_FORMAT: &str = "flowrec-trained-v1";

/// Documented layout of every stored coefficient vector.
pub const ORDERING_NOTE: &str = "u faces (i-major, j-fast, i in 0..=nx) | v faces (i-major, j-fast, j in 0..=ny) | pressure cells (i-major, j-fast); only faces/cells touching the active mask, f64 little-endian";

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() % 8 != 0 {
        return Err(Error::Store(format!("{} is not a flat f64 array", path.display())));
    }
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Canonical sha256 of a serializable value.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    let mut h = Sha256::new();
    h.update(&bytes);
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub file: String,
    pub t: f64,
    pub cycle_index: usize,
    pub div_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub params: FlowParams,
    pub snapshots: Vec<SnapshotMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifoldManifest {
    pub format: String,
    pub domain: DomainConfig,
    pub domain_hash: String,
    pub solver: SolverConfig,
    pub seed: u64,
    pub units: std::collections::BTreeMap<String, String>,
    pub ordering: String,
    pub n_u: usize,
    pub n_v: usize,
    pub n_cells: usize,
    pub trajectories: Vec<TrajectoryMeta>,
}

/// Persists a manifold; returns the manifest hash.
pub fn save_manifold(manifold: &Manifold, dir: &Path) -> Result<String> {
    let snap_dir = dir.join("snapshots");
    std::fs::create_dir_all(&snap_dir).map_err(|e| Error::io(snap_dir.display().to_string(), e))?;
    let domain = build_domain(&manifold.domain_config)?;
    let mut units = std::collections::BTreeMap::new();
    units.insert("velocity".into(), "cm/s".into());
    units.insert("pressure".into(), "dyn/cm2".into());
    units.insert("length".into(), "cm".into());
    units.insert("time".into(), "s".into());

    let mut trajectories = Vec::new();
    let mut counter = 0usize;
    for traj in &manifold.trajectories {
        let mut metas = Vec::new();
        for snap in &traj.snapshots {
            let name = format!("snapshots/snap_{counter:06}.bin");
            let mut flat = snap.u.clone();
            flat.extend_from_slice(&snap.p);
            write_f64s(&dir.join(&name), &flat)?;
            metas.push(SnapshotMeta {
                file: name,
                t: snap.params.t,
                cycle_index: snap.cycle_index,
                div_norm: snap.div_norm,
            });
            counter += 1;
        }
        trajectories.push(TrajectoryMeta { params: traj.params, snapshots: metas });
    }
    let manifest = ManifoldManifest {
        format: MANIFOLD_FORMAT.into(),
        domain: manifold.domain_config.clone(),
        domain_hash: json_hash(&manifold.domain_config),
        solver: manifold.solver_config,
        seed: manifold.seed,
        units,
        ordering: ORDERING_NOTE.into(),
        n_u: domain.n_u,
        n_v: domain.n_v,
        n_cells: domain.n_cells,
        trajectories,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&path, &json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(json_hash(&manifest))
}

/// Loads a manifold store back into memory.
pub fn load_manifold(dir: &Path) -> Result<(Manifold, ManifoldManifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: ManifoldManifest =
        serde_json::from_str(&text).map_err(|e| Error::Store(format!("bad manifest: {e}")))?;
    if manifest.format != MANIFOLD_FORMAT {
        return Err(Error::Store(format!("unsupported manifold format {}", manifest.format)));
    }
    let n_vel = manifest.n_u + manifest.n_v;
    let mut trajectories = Vec::new();
    for tm in &manifest.trajectories {
        let mut snapshots = Vec::new();
        for sm in &tm.snapshots {
            let flat = read_f64s(&dir.join(&sm.file))?;
            if flat.len() != n_vel + manifest.n_cells {
                return Err(Error::Store(format!("{}: wrong coefficient count", sm.file)));
            }
            snapshots.push(Snapshot {
                u: flat[..n_vel].to_vec(),
                p: flat[n_vel..].to_vec(),
                params: FlowParams { t: sm.t, ..tm.params },
                cycle_index: sm.cycle_index,
                div_norm: sm.div_norm,
            });
        }
        trajectories.push(Trajectory { params: tm.params, snapshots });
    }
    Ok((
        Manifold {
            domain_config: manifest.domain.clone(),
            solver_config: manifest.solver,
            seed: manifest.seed,
            trajectories,
        },
        manifest,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedCellMeta {
    pub n_star: usize,
    pub count: usize,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub eps_cert: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    pub cls_bounds: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub modes: Vec<String>,
    /// κ per outlet at n*, for the joint space.
    #[serde(default)]
    pub kappa: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedGridMeta {
    pub k: usize,
    pub k_prime: usize,
    pub score: f64,
    pub skipped: Vec<(usize, usize)>,
    pub hr_range: (f64, f64),
    pub cells: Vec<TrainedCellMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedManifest {
    pub format: String,
    pub domain: DomainConfig,
    pub domain_hash: String,
    pub voxels: VoxelConfig,
    pub manifold_hash: String,
    /// Trajectory indices of the train/test split.
    pub train_trajectories: Vec<usize>,
    pub test_trajectories: Vec<usize>,
    pub split_seed: u64,
    /// max over the training set of max_i ℓ_i(u), the noise σ reference.
    pub sigma_ref: f64,
    pub velocity: TrainedGridMeta,
    pub joint: TrainedGridMeta,
}

fn space_prefix(tag: SpaceTag) -> &'static str {
    match tag {
        SpaceTag::VelocityH1 => "u",
        SpaceTag::ProductUxP => "up",
        _ => "x",
    }
}

fn save_grid(grid: &PartitionGrid, kappa: Option<&[[f64; 2]]>, dir: &Path) -> Result<TrainedGridMeta> {
    let prefix = space_prefix(grid.tag);
    let cell_dir = dir.join("cells");
    std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(cell_dir.display().to_string(), e))?;
    let mut cells = Vec::new();
    for (idx, cell) in grid.cells.iter().enumerate() {
        let (kt, kh) = (idx / grid.k_prime, idx % grid.k_prime);
        let mut modes = Vec::new();
        for (m, mode) in cell.basis.modes.iter().enumerate() {
            let name = format!("cells/{prefix}_k{kt}_h{kh}_m{m:03}.bin");
            write_f64s(&dir.join(&name), &mode.coeffs)?;
            modes.push(name);
        }
        cells.push(TrainedCellMeta {
            n_star: cell.n_star,
            count: cell.count,
            eps: cell.eps.clone(),
            eps_cert: cell.eps_cert.clone(),
            delta: cell.delta.clone(),
            beta: cell.beta.clone(),
            cls_bounds: cell.cls_bounds.clone(),
            singular_values: cell.basis.singular_values.clone(),
            modes,
            kappa: kappa.map(|k| k[idx]),
        });
    }
    Ok(TrainedGridMeta {
        k: grid.k,
        k_prime: grid.k_prime,
        score: grid.score,
        skipped: grid.skipped.clone(),
        hr_range: grid.hr_range,
        cells,
    })
}

/// Writes the per-cell ε/δ/β curves of both spaces as one CSV.
fn save_curves_csv(manifest: &TrainedManifest, dir: &Path) -> Result<()> {
    let mut out = String::from("space,k,k_prime,n,eps,delta,beta\n");
    for (name, grid) in [("u", &manifest.velocity), ("up", &manifest.joint)] {
        for (idx, cell) in grid.cells.iter().enumerate() {
            let (kt, kh) = (idx / grid.k_prime, idx % grid.k_prime);
            for n in 0..cell.eps.len() {
                out.push_str(&format!(
                    "{name},{kt},{kh},{},{:.12e},{:.12e},{:.12e}\n",
                    n + 1,
                    cell.eps[n],
                    cell.delta[n],
                    cell.beta[n]
                ));
            }
        }
    }
    let path = dir.join("curves.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub struct TrainedStore {
    pub manifest: TrainedManifest,
    pub dir: PathBuf,
}

/// Persists both trained grids plus the split bookkeeping.
#[allow(clippy::too_many_arguments)]
pub fn save_trained(
    dir: &Path,
    domain_config: &DomainConfig,
    voxels: &VoxelConfig,
    manifold_hash: &str,
    split: (&[usize], &[usize], u64),
    sigma_ref: f64,
    velocity: &PartitionGrid,
    joint: &PartitionGrid,
    joint_kappa: &[[f64; 2]],
) -> Result<TrainedManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = TrainedManifest {
        format: TRAINED_FORMAT.into(),
        domain: domain_config.clone(),
        domain_hash: json_hash(domain_config),
        voxels: *voxels,
        manifold_hash: manifold_hash.into(),
        train_trajectories: split.0.to_vec(),
        test_trajectories: split.1.to_vec(),
        split_seed: split.2,
        sigma_ref,
        velocity: save_grid(velocity, None, dir)?,
        joint: save_grid(joint, Some(joint_kappa), dir)?,
    };
    save_curves_csv(&manifest, dir)?;
    let path = dir.join("trained.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&path, &json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Rebuilds a partition grid from its stored cells; `l_modes` come back from
/// the voxel functionals, which is cheaper than storing them.
pub fn load_grid(
    meta: &TrainedGridMeta,
    tag: SpaceTag,
    dir: &Path,
    domain: &Domain,
    w: &ObservationSpace,
) -> Result<PartitionGrid> {
    let mut cells = Vec::new();
    for cm in &meta.cells {
        let mut modes = Vec::new();
        for name in &cm.modes {
            let coeffs = read_f64s(&dir.join(name))?;
            modes.push(Field { coeffs, tag });
        }
        let mut l_modes = DMatrix::zeros(w.m(), modes.len());
        for (k, mode) in modes.iter().enumerate() {
            let l = apply_functionals(domain, mode, &w.vox)?;
            for (i, &v) in l.iter().enumerate() {
                l_modes[(i, k)] = v;
            }
        }
        let eps_cert = if cm.eps_cert.len() == cm.eps.len() { cm.eps_cert.clone() } else { cm.eps.clone() };
        cells.push(PartitionCell {
            basis: ReducedBasis {
                modes,
                singular_values: cm.singular_values.clone(),
                tag,
                rank_warning: false,
            },
            eps: cm.eps.clone(),
            eps_cert,
            delta: cm.delta.clone(),
            beta: cm.beta.clone(),
            n_star: cm.n_star,
            cls_bounds: cm.cls_bounds.clone(),
            l_modes,
            count: cm.count,
        });
    }
    Ok(PartitionGrid {
        k: meta.k,
        k_prime: meta.k_prime,
        hr_range: meta.hr_range,
        cells,
        tag,
        score: meta.score,
        skipped: meta.skipped.clone(),
    })
}

pub fn load_trained_manifest(dir: &Path) -> Result<TrainedManifest> {
    let path = dir.join("trained.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: TrainedManifest =
        serde_json::from_str(&text).map_err(|e| Error::Store(format!("bad trained store: {e}")))?;
    if manifest.format != TRAINED_FORMAT {
        return Err(Error::Store(format!("unsupported trained format {}", manifest.format)));
    }
    Ok(manifest)
}

/// Writes a measurement vector as `voxel_index,value` CSV.
pub fn save_measurements_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::from("voxel_index,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{v:.17e}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a `voxel_index,value` CSV back into a dense vector.
pub fn load_measurements_csv(path: &Path, m: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut values = vec![f64::NAN; m];
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line.to_lowercase().starts_with("voxel_index") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let idx: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Store(format!("{}:{}: bad voxel index", path.display(), lineno + 1)))?;
        let value: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Store(format!("{}:{}: bad value", path.display(), lineno + 1)))?;
        if idx >= m {
            return Err(Error::Store(format!("voxel index {idx} out of range (m = {m})")));
        }
        values[idx] = value;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Store(format!("measurement file covers fewer than m = {m} voxels")));
    }
    Ok(values)
}

/// Writes a reconstructed field as a flat f64 array.
pub fn save_field(path: &Path, field: &Field) -> Result<()> {
    write_f64s(path, &field.coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SplitterConfig;
    use crate::solver::{sample_manifold, ParamRanges};

    #[test]
    fn manifold_round_trip_preserves_bits_and_hash() {
        let cfg = DomainConfig {
            nx: 24,
            ny: 12,
            length_cm: 6.0,
            height_cm: 1.0,
            splitter: Some(SplitterConfig { x0: 0.6, x1: 1.0, y0: 0.45, y1: 0.55 }),
            stenosis: None,
        };
        let domain = build_domain(&cfg).unwrap();
        let solver = SolverConfig { n_cycles: 1, save_per_cycle: 3, ..SolverConfig::default() };
        let manifold = sample_manifold(&ParamRanges::default(), 2, 5, &domain, &solver).unwrap();
        let tmp = std::env::temp_dir().join(format!("flowrec_store_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&tmp);
        let h1 = save_manifold(&manifold, &tmp).unwrap();
        let (loaded, manifest) = load_manifold(&tmp).unwrap();
        assert_eq!(manifest.ordering, ORDERING_NOTE);
        assert_eq!(loaded.n_snapshots(), manifold.n_snapshots());
        for (a, b) in loaded.snapshots().zip(manifold.snapshots()) {
            assert_eq!(a.u, b.u);
            assert_eq!(a.p, b.p);
            assert_eq!(a.params, b.params);
        }
        // saving again yields the identical manifest hash
        let tmp2 = tmp.join("again");
        let h2 = save_manifold(&manifold, &tmp2).unwrap();
        assert_eq!(h1, h2);
        let _ = std::fs::remove_dir_all(&tmp);
    }

    #[test]
    fn measurement_csv_round_trip() {
        let tmp = std::env::temp_dir().join(format!("flowrec_meas_{}.csv", std::process::id()));
        let z = vec![1.5, -2.25, 3.75e-3];
        save_measurements_csv(&tmp, &z).unwrap();
        let back = load_measurements_csv(&tmp, 3).unwrap();
        assert_eq!(z, back);
        assert!(load_measurements_csv(&tmp, 4).is_err());
        let _ = std::fs::remove_file(&tmp);
    }
}
