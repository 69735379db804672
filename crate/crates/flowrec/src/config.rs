//! Run configuration: one JSON file drives every pipeline command. All
//! randomness is funneled through the seeds recorded here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DomainConfig;
use crate::observation::VoxelConfig;
use crate::solver::{ParamRanges, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldConfig {
    /// Number of parameter draws (trajectories).
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub k_max: usize,
    pub kprime_max: usize,
    /// Cap on the reduced dimension per cell.
    pub n_cap: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { k_max: 7, kprime_max: 7, n_cap: crate::reduced::N_CAP }
    }
}

/// Noise level; `∞` is spelled "inf" in JSON (no Infinity literal there).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alpha(pub f64);

impl Serialize for Alpha {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::Number(n) => {
                let x = n.as_f64().ok_or_else(|| D::Error::custom("bad alpha"))?;
                if x <= 0.0 {
                    return Err(D::Error::custom("alpha must be positive"));
                }
                Ok(Alpha(x))
            }
            serde_json::Value::String(s) if s == "inf" => Ok(Alpha(f64::INFINITY)),
            _ => Err(D::Error::custom("alpha must be a positive number or \"inf\"")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub alphas: Vec<Alpha>,
    pub realizations: usize,
    pub seed: u64,
    /// How many held-out snapshots enter the noise sweep.
    pub sweep_snapshots: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            alphas: vec![Alpha(10.0), Alpha(20.0), Alpha(f64::INFINITY)],
            realizations: 100,
            seed: 2718,
            sweep_snapshots: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub bounds: bool,
    pub qoi: bool,
    pub noise: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig { bounds: true, qoi: true, noise: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub solver: SolverConfig,
    pub voxels: VoxelConfig,
    pub manifold: ManifoldConfig,
    #[serde(default)]
    pub ranges: Option<ParamRanges>,
    #[serde(default)]
    pub partition: PartitionConfig,
    /// Fraction of trajectories used for training.
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Probe budget for the κ certificate.
    pub kappa_probes: usize,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub campaign: CampaignConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            domain: DomainConfig::default(),
            solver: SolverConfig::default(),
            voxels: VoxelConfig::default(),
            manifold: ManifoldConfig { count: 25, seed: 2024 },
            ranges: None,
            partition: PartitionConfig::default(),
            train_fraction: 0.8,
            split_seed: 7,
            kappa_probes: 200,
            noise: NoiseConfig::default(),
            campaign: CampaignConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.manifold.count == 0 {
            return Err(Error::Config("manifold.count must be positive".into()));
        }
        if self.partition.k_max == 0 || self.partition.kprime_max == 0 || self.partition.n_cap == 0 {
            return Err(Error::Config("partition search ranges must be nonempty".into()));
        }
        Ok(())
    }

    pub fn ranges(&self) -> ParamRanges {
        self.ranges.unwrap_or_default()
    }

    pub fn hash(&self) -> String {
        crate::store::json_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        assert!(back.noise.alphas.iter().any(|a| a.0.is_infinite()));
    }

    #[test]
    fn alpha_accepts_numbers_and_inf_only() {
        let ok: NoiseConfig =
            serde_json::from_str(r#"{"alphas":[5,"inf"],"realizations":3,"seed":1,"sweep_snapshots":1}"#).unwrap();
        assert_eq!(ok.alphas[0].0, 5.0);
        assert!(ok.alphas[1].0.is_infinite());
        let bad = serde_json::from_str::<NoiseConfig>(
            r#"{"alphas":[-1],"realizations":3,"seed":1,"sweep_snapshots":1}"#,
        );
        assert!(bad.is_err());
    }
}
