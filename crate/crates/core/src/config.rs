//! Pipeline configuration: one typed section per stage.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ash::AshConfig;
use crate::assoc::AssocConfig;
use crate::backends::{DetectionNoise, MaskGeneratorParams, PropagationDegradation, SyntheticWorldConfig};
use crate::chunker::ChunkerConfig;
use crate::error::{Error, Result};
use crate::pipeline::DeploymentConfig;
use crate::smart_od::SmartOdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Full,
    Chunk,
    #[default]
    Auto,
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RunMode::Full),
            "chunk" => Ok(RunMode::Chunk),
            "auto" => Ok(RunMode::Auto),
            _ => Err(Error::config("run.mode", format!("unknown mode `{s}` (expected full, chunk or auto)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    /// Sequences processed concurrently; 0 means one per available core.
    pub workers: usize,
    /// IoU for evaluation matching.
    pub eval_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { mode: RunMode::Auto, workers: 0, eval_iou: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub smart_od: SmartOdConfig,
    pub assoc: AssocConfig,
    pub ash: AshConfig,
    pub chunker: ChunkerConfig,
    pub mask_generator: MaskGeneratorParams,
    pub world: SyntheticWorldConfig,
    pub noise: DetectionNoise,
    pub propagation: PropagationDegradation,
    pub deployment: DeploymentConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.smart_od.validate()?;
        self.assoc.validate()?;
        self.ash.validate()?;
        self.chunker.validate()?;
        self.world.validate()?;
        self.noise.validate()?;
        self.propagation.validate()?;
        self.deployment.validate()?;
        if !(self.run.eval_iou > 0.0 && self.run.eval_iou <= 1.0) {
            return Err(Error::config("run.eval_iou", "must be in (0, 1]"));
        }
        Ok(())
    }

    /// Sets every seed (world, detector noise, propagation) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.rng_seed = seed;
        self.noise.rng_seed = seed;
        self.propagation.rng_seed = seed;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| {
            let field = e.span().map(|r| format!("byte {}..{}", r.start, r.end)).unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Digest of every section that influences annotation output; stored in
    /// checkpoints so a resume with different settings is refused.
    pub fn digest(&self) -> String {
        let relevant = (
            &self.smart_od,
            &self.assoc,
            &self.ash,
            &self.chunker,
            &self.world,
            &self.noise,
            &self.propagation,
        );
        let bytes = serde_json::to_vec(&relevant).expect("config serializes");
        let h = Sha256::digest(&bytes);
        h.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(c.smart_od.theta_v, 0.03);
        assert_eq!(c.ash.tau_merge, 0.3);
        assert_eq!((c.chunker.chi, c.chunker.omega), (50, 10));
        assert_eq!(c.ash.beta, 5);
        assert_eq!(c.ash.alpha, 0.2);
        assert_eq!(c.ash.epsilon_mask, 3);
        assert_eq!(c.assoc.lambda_min, 10.0);
        assert_eq!(c.deployment.gamma, 0.9);
        let s = &c.smart_od;
        assert_eq!((s.theta_c, s.theta_i, s.theta_n), (0.001, 0.1, 0.1));
        assert_eq!((s.theta_min_area, s.theta_max_area), (0.0008, 0.20));
        assert_eq!((s.epsilon_dbscan, s.mu_dbscan), (100.0, 1));
        assert_eq!(s.threshold_method, crate::smart_od::ThresholdMethod::KmeansMeanStd);
        let a = &c.assoc;
        assert_eq!((a.lambda_max, a.margin, a.aspect_range), (1000.0, 0.5, [0.2, 5.0]));
        assert_eq!((a.tau_track_det, a.track_thresh, a.match_thresh, a.track_buffer), (0.5, 0.6, 0.7, 20));
        assert_eq!(c.chunker.tau_overlap, 0.7);
    }

    #[test]
    fn invariant_violation_names_field() {
        let err = PipelineConfig::from_toml_str("[chunker]\nomega = 60\nchi = 50\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "chunker.omega"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(PipelineConfig::from_toml_str("[ash]\nbogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = PipelineConfig::default();
        c.smart_od.theta_min = 0.25;
        c.run.mode = RunMode::Chunk;
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial = PipelineConfig::from_toml_str("[smart_od]\ntheta_min = 0.25\n").unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&partial.to_toml_string()).unwrap(), partial);
    }

    #[test]
    fn digest_tracks_relevant_fields() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.run.workers = 7;
        assert_eq!(a.digest(), b.digest());
        b.ash.alpha = 0.5;
        assert_ne!(a.digest(), b.digest());
    }
}
