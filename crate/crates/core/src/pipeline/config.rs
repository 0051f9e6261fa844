use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::DEFAULT_FOV_Y;
use crate::extend::ExtensionConfig;
use crate::guidance::GuidanceSettings;
use crate::optim::OptimizerConfig;
use crate::planner::Plan;
use crate::segmentation::{KernelSelector, SegmentationConfig};
use crate::wire::RetryPolicy;

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub plan: PlanConfig,
    pub init: InitConfig,
    pub steps: StepConfig,
    pub segmentation: SegmentationConfig,
    pub extension: ExtensionConfig,
    pub optimizer: OptimizerConfig,
    pub guidance: GuidanceSettings,
    pub providers: ProviderConfig,
    pub render: RenderConfig,
    pub turntable: TurntableConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plan: PlanConfig::default(),
            init: InitConfig::RandomBall(RandomBall::default()),
            steps: StepConfig::default(),
            segmentation: SegmentationConfig::default(),
            extension: ExtensionConfig::default(),
            optimizer: OptimizerConfig::default(),
            guidance: GuidanceSettings::default(),
            providers: ProviderConfig::default(),
            render: RenderConfig::default(),
            turntable: TurntableConfig::default(),
        }
    }
}

/// Exactly one of `file`, `inline` or `llm_endpoint` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub file: Option<PathBuf>,
    pub inline: Option<Plan>,
    pub llm_endpoint: Option<String>,
    pub llm_model: Option<String>,
    /// Prompt sent to the LLM.
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    RandomBall(RandomBall),
    Ply(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomBall {
    pub count: usize,
    pub radius: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Kernel scale; defaults to `0.5 · radius · count^(-1/3)`.
    pub scale: Option<f64>,
}

impl Default for RandomBall {
    fn default() -> Self {
        Self {
            count: 4096,
            radius: 1.0,
            color: [0.5; 3],
            opacity: 0.1,
            scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub coarse: usize,
    pub fine: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            coarse: 1200,
            fine: 600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    /// Photometric score oracle and synthetic masks.
    Oracle,
    /// HTTP score and mask services.
    #[default]
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub score_endpoint: Option<String>,
    /// Defaults to `score_endpoint`.
    pub mask_endpoint: Option<String>,
    pub retry: RetryPolicy,
    /// Photometric targets per block, as PLY paths; the last one is reused
    /// for later blocks.
    pub oracle_targets: Vec<PathBuf>,
    pub oracle_k: f64,
    /// Ground-truth kernel sets for the synthetic mask oracle, by part name.
    pub oracle_parts: BTreeMap<String, KernelSelector>,
    /// Shape-conditioned guidance during the coarse stage of later blocks.
    pub coarse_shape_conditioning: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Remote,
            score_endpoint: None,
            mask_endpoint: None,
            retry: RetryPolicy::default(),
            oracle_targets: Vec::new(),
            oracle_k: 1.0,
            oracle_parts: BTreeMap::new(),
            coarse_shape_conditioning: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    /// Camera distance; defaults to the initial scene's bounding radius
    /// times `radius_factor`.
    pub radius: Option<f64>,
    pub radius_factor: f64,
    pub elevation_range: [f64; 2],
    pub look_at: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_y: DEFAULT_FOV_Y,
            radius: None,
            radius_factor: crate::camera::DEFAULT_RADIUS_FACTOR,
            elevation_range: [-45.0, 45.0],
            look_at: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurntableConfig {
    pub enabled: bool,
    pub views: usize,
    pub elevation: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for TurntableConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            views: 8,
            elevation: 15.0,
            width: 128,
            height: 128,
        }
    }
}

impl RunConfig {
    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        let p = &self.plan;
        let sources = [p.file.is_some(), p.inline.is_some(), p.llm_endpoint.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if sources != 1 {
            return err(format!(
                "plan: exactly one of `file`, `inline`, `llm_endpoint` must be set, found {sources}"
            ));
        }
        if p.llm_endpoint.is_some() && p.prompt.is_none() {
            return err("plan.prompt is required with plan.llm_endpoint".into());
        }
        if let InitConfig::RandomBall(b) = &self.init {
            if b.count == 0 || !(b.radius > 0.0) || !(b.opacity > 0.0 && b.opacity < 1.0) {
                return err("init.random_ball: need count ≥ 1, radius > 0, 0 < opacity < 1".into());
            }
        }
        self.segmentation
            .validate()
            .map_err(|e| PipelineError::Config(format!("segmentation: {e}")))?;
        if self.extension.count == Some(0) {
            return err("extension.count must be at least 1".into());
        }
        if !(self.extension.perturb_sigma >= 0.0) {
            return err("extension.perturb_sigma must be ≥ 0".into());
        }
        let r = &self.render;
        if r.width == 0 || r.height == 0 || !(r.fov_y > 0.0 && r.fov_y < 180.0) {
            return err("render: need width, height ≥ 1 and 0 < fov_y < 180".into());
        }
        if r.radius.is_some_and(|v| !(v > 0.0)) || !(r.radius_factor > 0.0) {
            return err("render: radius and radius_factor must be > 0".into());
        }
        if !(r.elevation_range[0] <= r.elevation_range[1]) {
            return err("render.elevation_range must be ordered".into());
        }
        match self.providers.mode {
            ProviderMode::Remote => {
                if self.providers.score_endpoint.is_none() {
                    return err("providers.score_endpoint is required in remote mode".into());
                }
            }
            ProviderMode::Oracle => {
                if self.providers.oracle_targets.is_empty() {
                    return err("providers.oracle_targets must list at least one PLY in oracle mode".into());
                }
            }
        }
        Ok(())
    }
}
