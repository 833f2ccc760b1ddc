//! Pipeline settings. A TOML file supplies defaults for every stage and
//! command-line flags override it.

use std::path::Path;

use motionrag_core::contrastive::TrainConfig;
use motionrag_core::diffusion::{DiffusionConfig, RefineConfig};
use motionrag_core::graph::GraphBuildConfig;
use motionrag_core::metrics::MetricsConfig;
use motionrag_core::synthesis::SynthesisConfig;
use motionrag_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub clips: usize,
    pub clip_seconds: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            seed: 0,
            clips: 16,
            clip_seconds: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub frames: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { frames: 600 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides the seed of every stage when set.
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub graph: GraphBuildConfig,
    pub contrastive: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub generate: GenerateSection,
    pub diffusion: DiffusionConfig,
    pub refine: RefineConfig,
    pub metrics: MetricsConfig,
}

impl PipelineConfig {
    /// Reads `path` if given, then applies `seed` on top.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                toml::from_str::<PipelineConfig>(&text).map_err(|e| Error::Format {
                    record: p.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => PipelineConfig::default(),
        };
        if let Some(s) = seed.or(cfg.seed) {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, s: u64) {
        self.seed = Some(s);
        self.synth.seed = s;
        self.contrastive.seed = s;
        self.diffusion.seed = s;
        self.refine.seed = s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use motionrag_core::graph::JointThreshold;
    use motionrag_core::synthesis::Strategy;

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: PipelineConfig = toml::from_str(
            "[graph]\njoint_threshold = { count = 3 }\n[synthesis]\nstrategy = { kind = \"beam\", width = 4 }\n[diffusion]\nepochs = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.graph.joint_threshold, JointThreshold::Count(3));
        assert_eq!(cfg.graph.n_mean_frames, 4);
        assert_eq!(cfg.synthesis.strategy, Strategy::Beam { width: 4 });
        assert_eq!(cfg.synthesis.blend_frames, 8);
        assert_eq!(cfg.diffusion.epochs, 7);
        assert_eq!(cfg.diffusion.steps, 50);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[generate]\nframe = 3\n").is_err());
    }

    #[test]
    fn flag_seed_beats_file_seed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[contrastive]\nseed = 9\n").unwrap();
        let from_file = PipelineConfig::load(Some(&p), None).unwrap();
        assert_eq!(from_file.contrastive.seed, 5);
        let flagged = PipelineConfig::load(Some(&p), Some(2)).unwrap();
        assert_eq!((flagged.synth.seed, flagged.contrastive.seed, flagged.diffusion.seed, flagged.refine.seed), (2, 2, 2, 2));
    }
}
