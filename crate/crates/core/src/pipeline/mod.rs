//! Block-by-block orchestration: coarse generation, per-part segmentation and
//! refinement, extension and label elimination, with checkpoints after every
//! stage.

mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, UnitBall};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    InitConfig, PlanConfig, ProviderConfig, ProviderMode, RandomBall, RenderConfig, RunConfig, StepConfig,
    TurntableConfig,
};

use crate::camera::{sample_view, CameraView, ViewSampler};
use crate::extend::{extend, label_eliminate, ExtendError, ExtensionConfig};
use crate::guidance::{Guidance, GuidanceError, PhotometricOracle, PhotometricTarget, ScoreClient, ScoreProvider};
use crate::image::ImageError;
use crate::optim::Optimizer;
use crate::planner::{self, LlmClient, Plan, PlanError, PlanSource};
use crate::raster::{render, render_silhouette, Channels, RenderOptions};
use crate::rng::{tag, SeedStream};
use crate::scene::{GaussianKernel, Mark, Scene, TrainMask};
use crate::segmentation::{segment_part, MaskClient, MaskOracle, SegmentationError, SyntheticMaskOracle};
use crate::ply::{self, PlyError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Extend(#[from] ExtendError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("checkpoint config hash {found} does not match current config {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("stage {stage}: {message}")]
    Invariant { stage: usize, message: String },
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

impl PipelineError {
    /// Errors caused by user input rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::HashMismatch { .. }
                | PipelineError::Plan(PlanError::Invalid(_))
                | PipelineError::Plan(PlanError::Parse { .. })
                | PipelineError::Plan(PlanError::Io { .. })
                | PipelineError::Plan(PlanError::Cycle(_))
                | PipelineError::Plan(PlanError::UnknownPart(_))
                | PipelineError::Plan(PlanError::DuplicatePart(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    /// Whole-block generation from the block's initial text.
    Coarse { block: usize },
    /// Gaussian extension into a new block.
    Extend { block: usize },
    /// Label elimination after the coarse stage of a new block.
    Eliminate { block: usize },
    /// Segmentation of one part followed by its fine-grained optimization.
    Refine { block: usize, part: usize },
}

impl Stage {
    pub fn block(&self) -> usize {
        match *self {
            Stage::Coarse { block }
            | Stage::Extend { block }
            | Stage::Eliminate { block }
            | Stage::Refine { block, .. } => block,
        }
    }
}

/// Stage sequence of a plan: block 0 runs coarse then per-part refinement;
/// later blocks run extend, coarse, eliminate, then per-part refinement.
pub fn stage_list(plan: &Plan) -> Vec<Stage> {
    let mut out = Vec::new();
    for (b, block) in plan.blocks.iter().enumerate() {
        if b > 0 {
            out.push(Stage::Extend { block: b });
        }
        out.push(Stage::Coarse { block: b });
        if b > 0 {
            out.push(Stage::Eliminate { block: b });
        }
        for p in 0..block.parts.len() {
            out.push(Stage::Refine { block: b, part: p });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    #[serde(flatten)]
    pub stage: Stage,
    pub label: String,
    pub started_at: String,
    pub finished_at: String,
    pub kernels_after: usize,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub camera_radius: f64,
    pub scene_radius: f64,
    pub plan: Plan,
    pub total_stages: usize,
    /// Stages completed; the next stage draws from stream `[STAGE, completed]`.
    pub completed: usize,
    pub finished: bool,
    pub stages: Vec<StageRecord>,
}

/// Checkpoint directory layout.
pub struct CheckpointPaths {
    pub dir: PathBuf,
}

impl CheckpointPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            dir: out_dir.join("checkpoint"),
        }
    }

    pub fn scene(&self) -> PathBuf {
        self.dir.join("scene.ply")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(manifest).expect("serializable");
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn save_scene_atomic(scene: &Scene, path: &Path) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    ply::write_ply(scene, &mut buf)?;
    write_atomic(path, &buf)
}

/// Score and mask providers used by a run.
#[derive(Clone)]
pub struct Providers {
    /// Multiview providers per block; the last one serves later blocks.
    pub multiview: Vec<Arc<dyn ScoreProvider>>,
    pub shape_conditioned: Vec<Arc<dyn ScoreProvider>>,
    pub masks: Arc<dyn MaskOracle>,
}

impl Providers {
    pub fn from_config(config: &RunConfig) -> Result<Self, PipelineError> {
        let p = &config.providers;
        match p.mode {
            ProviderMode::Remote => {
                let score = p
                    .score_endpoint
                    .clone()
                    .ok_or_else(|| PipelineError::Config("providers.score_endpoint is required".into()))?;
                let mask = p.mask_endpoint.clone().unwrap_or_else(|| score.clone());
                let client: Arc<dyn ScoreProvider> = Arc::new(ScoreClient::new(score, p.retry));
                Ok(Self {
                    multiview: vec![client.clone()],
                    shape_conditioned: vec![client],
                    masks: Arc::new(MaskClient::new(mask, p.retry)),
                })
            }
            ProviderMode::Oracle => {
                let mut providers: Vec<Arc<dyn ScoreProvider>> = Vec::new();
                for path in &p.oracle_targets {
                    let target = ply::load_ply(path)?;
                    providers.push(Arc::new(PhotometricOracle {
                        target: PhotometricTarget::Scene(Arc::new(target)),
                        k: p.oracle_k,
                    }));
                }
                if providers.is_empty() {
                    return Err(PipelineError::Config("providers.oracle_targets is empty".into()));
                }
                let mut masks = SyntheticMaskOracle::new();
                for (name, sel) in &p.oracle_parts {
                    masks.insert(name.clone(), sel.clone());
                }
                Ok(Self {
                    multiview: providers.clone(),
                    shape_conditioned: providers,
                    masks: Arc::new(masks),
                })
            }
        }
    }

    fn guidance(&self, block: usize, config: &RunConfig) -> Guidance {
        let pick = |v: &[Arc<dyn ScoreProvider>]| v[block.min(v.len() - 1)].clone();
        let mut g = Guidance::new(pick(&self.multiview), pick(&self.shape_conditioned));
        g.settings = config.guidance;
        g
    }
}

/// Resolves the configured plan source into a validated plan.
pub fn load_plan(config: &PlanConfig, retry: crate::wire::RetryPolicy) -> Result<Plan, PipelineError> {
    if let Some(plan) = &config.inline {
        planner::validate(plan).map_err(PlanError::Invalid)?;
        return Ok(plan.clone());
    }
    if let Some(path) = &config.file {
        return Ok(planner::load_plan_file(path)?);
    }
    if let Some(endpoint) = &config.llm_endpoint {
        let client = LlmClient::new(endpoint.clone(), config.llm_model.clone(), retry);
        let prompt = config
            .prompt
            .as_deref()
            .ok_or_else(|| PipelineError::Config("plan.prompt is required".into()))?;
        return Ok(planner::synthesize_plan(prompt, PlanSource::Llm(&client))?);
    }
    Err(PipelineError::Config("no plan source".into()))
}

/// Initial block-0 scene.
pub fn init_scene(config: &InitConfig, seeds: &SeedStream) -> Result<Scene, PipelineError> {
    match config {
        InitConfig::Ply(path) => {
            let mut s = ply::load_ply(path)?;
            for k in s.kernels_mut() {
                k.block_id = 0;
                k.mark = Mark::Original;
            }
            Ok(s)
        }
        InitConfig::RandomBall(b) => {
            let mut rng = seeds.rng(&[tag::INIT]);
            let scale = b.scale.unwrap_or(0.5 * b.radius * (b.count as f64).powf(-1.0 / 3.0));
            let kernels = (0..b.count)
                .map(|_| {
                    let p: [f64; 3] = UnitBall.sample(&mut rng);
                    GaussianKernel::default()
                        .with_position(p.map(|v| v * b.radius))
                        .with_scale([scale; 3])
                        .with_color(b.color)
                        .with_opacity(b.opacity)
                })
                .collect();
            Ok(Scene::from_kernels(kernels, seeds.seed()))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many stages in total (counting previously completed
    /// ones); the checkpoint then holds a resumable state.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub scene: Scene,
    pub manifest: Manifest,
    /// `true` when `stop_after` ended the run early.
    pub interrupted: bool,
}

/// Runs a fresh pipeline into `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path, options: &RunOptions) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let plan = load_plan(&config.plan, config.providers.retry)?;
    let providers = Providers::from_config(config)?;
    let seeds = SeedStream::new(config.seed);
    let scene = init_scene(&config.init, &seeds)?;
    run_with(config, &plan, scene, &providers, out_dir, options)
}

/// Runs a fresh pipeline with explicit plan, initial scene and providers.
pub fn run_with(
    config: &RunConfig,
    plan: &Plan,
    scene: Scene,
    providers: &Providers,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    planner::validate(plan).map_err(PlanError::Invalid)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let look_at = config.render.look_at;
    let scene_radius = scene.bounding_radius(look_at).max(1e-3);
    let camera_radius = config
        .render
        .radius
        .unwrap_or(scene_radius * config.render.radius_factor);
    let manifest = Manifest {
        config_hash: config.hash(),
        seed: config.seed,
        camera_radius,
        scene_radius,
        plan: plan.clone(),
        total_stages: stage_list(plan).len(),
        completed: 0,
        finished: false,
        stages: Vec::new(),
    };
    Runner::new(config, providers, out_dir, manifest, scene)?.run(options)
}

/// Continues the run checkpointed in `out_dir`.
pub fn resume(config: &RunConfig, out_dir: &Path, options: &RunOptions) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let providers = Providers::from_config(config)?;
    resume_with(config, &providers, out_dir, options)
}

pub fn resume_with(
    config: &RunConfig,
    providers: &Providers,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let paths = CheckpointPaths::new(out_dir);
    let manifest = read_manifest(&paths.manifest())?;
    let expected = config.hash();
    if manifest.config_hash != expected {
        return Err(PipelineError::HashMismatch {
            expected,
            found: manifest.config_hash,
        });
    }
    let scene = ply::load_ply(paths.scene())?;
    if manifest.finished {
        return Ok(RunOutcome {
            scene,
            manifest,
            interrupted: false,
        });
    }
    Runner::new(config, providers, out_dir, manifest, scene)?.run(options)
}

struct Runner<'a> {
    config: &'a RunConfig,
    providers: &'a Providers,
    out_dir: &'a Path,
    paths: CheckpointPaths,
    manifest: Manifest,
    scene: Scene,
    seeds: SeedStream,
    sampler: ViewSampler,
}

impl<'a> Runner<'a> {
    fn new(
        config: &'a RunConfig,
        providers: &'a Providers,
        out_dir: &'a Path,
        manifest: Manifest,
        scene: Scene,
    ) -> Result<Self, PipelineError> {
        let paths = CheckpointPaths::new(out_dir);
        std::fs::create_dir_all(&paths.dir).map_err(io_err(&paths.dir))?;
        let r = &config.render;
        let sampler = ViewSampler {
            radius: manifest.camera_radius,
            fov_y: r.fov_y,
            width: r.width,
            height: r.height,
            elevation_range: r.elevation_range,
            look_at: r.look_at,
        };
        Ok(Self {
            config,
            providers,
            out_dir,
            paths,
            seeds: SeedStream::new(manifest.seed),
            manifest,
            scene,
            sampler,
        })
    }

    fn run(mut self, options: &RunOptions) -> Result<RunOutcome, PipelineError> {
        let stages = stage_list(&self.manifest.plan);
        if self.manifest.completed == 0 && self.manifest.stages.is_empty() {
            self.checkpoint()?;
        }
        while self.manifest.completed < stages.len() {
            if options.stop_after.is_some_and(|n| self.manifest.completed >= n) {
                return Ok(RunOutcome {
                    scene: self.scene,
                    manifest: self.manifest,
                    interrupted: true,
                });
            }
            let index = self.manifest.completed;
            let stage = stages[index].clone();
            let frozen_prefix = self.completed_block_snapshot(stage.block());
            let started_at = chrono::Utc::now().to_rfc3339();
            log::info!("stage {index}: {}", self.label(&stage));
            let detail = self.run_stage(index, &stage)?;
            self.check_completed_blocks(index, stage.block(), &frozen_prefix)?;
            self.manifest.stages.push(StageRecord {
                index,
                label: self.label(&stage),
                stage: stage.clone(),
                started_at,
                finished_at: chrono::Utc::now().to_rfc3339(),
                kernels_after: self.scene.len(),
                detail,
            });
            self.manifest.completed += 1;
            let block_done = stages
                .get(index + 1)
                .is_none_or(|next| next.block() != stage.block());
            if block_done && self.config.turntable.enabled {
                self.turntable(stage.block())?;
            }
            self.checkpoint()?;
        }
        self.manifest.finished = true;
        self.checkpoint()?;
        save_scene_atomic(&self.scene, &self.out_dir.join("final.ply"))?;
        Ok(RunOutcome {
            scene: self.scene,
            manifest: self.manifest,
            interrupted: false,
        })
    }

    fn label(&self, stage: &Stage) -> String {
        let plan = &self.manifest.plan;
        match stage {
            Stage::Coarse { block } => format!("coarse block {block}: {}", plan.blocks[*block].initial_text),
            Stage::Extend { block } => format!("extend into block {block}"),
            Stage::Eliminate { block } => format!("eliminate block {block}"),
            Stage::Refine { block, part } => {
                format!("refine block {block}: {}", plan.blocks[*block].parts[*part].attribute_text)
            }
        }
    }

    fn checkpoint(&self) -> Result<(), PipelineError> {
        save_scene_atomic(&self.scene, &self.paths.scene())?;
        write_manifest(&self.paths.manifest(), &self.manifest)
    }

    /// Kernels of blocks before `block`; they must survive unchanged.
    fn completed_block_snapshot(&self, block: usize) -> Vec<(usize, GaussianKernel)> {
        self.scene
            .kernels()
            .iter()
            .enumerate()
            .filter(|(_, k)| (k.block_id as i64) < block as i64)
            .map(|(i, k)| (i, k.clone()))
            .collect()
    }

    fn check_completed_blocks(
        &self,
        index: usize,
        block: usize,
        before: &[(usize, GaussianKernel)],
    ) -> Result<(), PipelineError> {
        let after = self.completed_block_snapshot(block);
        let same = after.len() == before.len()
            && after
                .iter()
                .zip(before)
                .all(|((i, a), (j, b))| i == j && a.bit_eq(b));
        if same {
            Ok(())
        } else {
            Err(PipelineError::Invariant {
                stage: index,
                message: format!("kernels of blocks before {block} changed"),
            })
        }
    }

    fn stage_rng(&self, index: usize) -> crate::rng::StreamRng {
        self.seeds.rng(&[tag::STAGE, index as u64])
    }

    fn run_stage(&mut self, index: usize, stage: &Stage) -> Result<serde_json::Value, PipelineError> {
        let mut rng = self.stage_rng(index);
        let plan = self.manifest.plan.clone();
        match *stage {
            Stage::Coarse { block } => {
                let train = |k: &GaussianKernel| if block == 0 { true } else { k.mark == Mark::Extended };
                let members = self.set_trainable(|_, k| train(k), TrainMask::APPEARANCE);
                let text = plan.blocks[block].initial_text.clone();
                let shape = block > 0 && self.config.providers.coarse_shape_conditioning;
                let stats = self.optimize(block, &text, &members, shape, self.config.steps.coarse, &mut rng)?;
                Ok(serde_json::json!({ "trainable": stats.0, "first_residual": stats.1, "last_residual": stats.2 }))
            }
            Stage::Extend { block } => {
                let cfg = ExtensionConfig {
                    block_id: Some(block as i32),
                    ..self.config.extension
                };
                let added = extend(&mut self.scene, &cfg, &mut rng)?;
                Ok(serde_json::json!({ "added": added.len() }))
            }
            Stage::Eliminate { block } => {
                let names: Vec<String> = plan.blocks[block].parts.iter().map(|p| p.name.clone()).collect();
                self.scene.freeze_all();
                let report = label_eliminate(
                    &mut self.scene,
                    &names,
                    self.providers.masks.as_ref(),
                    &self.config.segmentation,
                    &self.sampler,
                    &mut rng,
                )?;
                let warnings: Vec<&str> = report.warnings.iter().map(|w| w.part.as_str()).collect();
                Ok(serde_json::json!({ "removed": report.removed, "kept": report.kept, "empty_parts": warnings }))
            }
            Stage::Refine { block, part } => {
                let spec = plan.blocks[block].parts[part].clone();
                let candidates: Vec<bool> = self
                    .scene
                    .kernels()
                    .iter()
                    .map(|k| k.block_id == block as i32)
                    .collect();
                self.scene.freeze_all();
                let seg = segment_part(
                    &mut self.scene,
                    &spec.name,
                    self.providers.masks.as_ref(),
                    &self.config.segmentation,
                    &self.sampler,
                    Some(&candidates),
                    &mut rng,
                )?;
                let mut selected = vec![false; self.scene.len()];
                for &i in &seg.selected {
                    selected[i] = true;
                }
                let members = self.set_trainable(|i, _| selected[i], TrainMask::APPEARANCE);
                let stats = self.optimize(block, &spec.attribute_text, &members, true, self.config.steps.fine, &mut rng)?;
                self.scene.freeze_all();
                Ok(serde_json::json!({
                    "part": spec.name,
                    "selected": seg.selected.len(),
                    "empty_selection": seg.warning.is_some(),
                    "segment_loss": seg.final_loss,
                    "first_residual": stats.1,
                    "last_residual": stats.2,
                }))
            }
        }
    }

    /// Freezes everything, then applies `mask` to kernels where `pred` holds.
    fn set_trainable<F>(&mut self, mut pred: F, mask: TrainMask) -> Vec<bool>
    where
        F: FnMut(usize, &GaussianKernel) -> bool,
    {
        let members: Vec<bool> = self
            .scene
            .kernels()
            .iter()
            .enumerate()
            .map(|(i, k)| pred(i, k))
            .collect();
        self.scene.freeze_all();
        for (i, &m) in members.iter().enumerate() {
            if m {
                self.scene.set_mask(i, mask);
            }
        }
        members
    }

    /// SDS steps on the trainable kernels. With `shape`, each step adds the
    /// shape-conditioned term with the members' silhouette. Returns
    /// `(members, first residual, last residual)`.
    fn optimize<R: Rng + ?Sized>(
        &mut self,
        block: usize,
        prompt: &str,
        members: &[bool],
        shape: bool,
        steps: usize,
        rng: &mut R,
    ) -> Result<(usize, f64, f64), PipelineError> {
        let count = members.iter().filter(|&&m| m).count();
        if count == 0 || steps == 0 {
            return Ok((count, 0.0, 0.0));
        }
        let guidance = self.providers.guidance(block, self.config);
        let mut opt = Optimizer::new(self.config.optimizer, self.scene.len(), self.manifest.scene_radius);
        let (mut first, mut last) = (0.0, 0.0);
        for step in 0..steps {
            let view = sample_view(rng, &self.sampler);
            let result = if shape {
                let sil = render_silhouette(&self.scene, |i, _| members[i], &view);
                guidance.combined_loss_gradient(&self.scene, &view, prompt, &sil, rng)?
            } else {
                guidance.multiview_gradient(&self.scene, &view, prompt, rng)?
            };
            let residual: f64 = result.queries.iter().map(|q| q.2).sum();
            if step == 0 {
                first = residual;
            }
            last = residual;
            opt.step(&mut self.scene, &result.grads);
        }
        Ok((count, first, last))
    }

    fn turntable(&self, block: usize) -> Result<(), PipelineError> {
        let dir = self.out_dir.join("turntable");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let t = &self.config.turntable;
        for i in 0..t.views {
            let az = 360.0 * i as f64 / t.views as f64;
            let view = turntable_view(&self.sampler, az, t.elevation, t.width, t.height);
            let out = render(&self.scene, &view, &RenderOptions::default().with_channels(Channels::COLOR));
            out.color.save_png(dir.join(format!("block{block}_az{}.png", az.round() as i64)))?;
        }
        Ok(())
    }
}

pub fn turntable_view(sampler: &ViewSampler, azimuth: f64, elevation: f64, width: usize, height: usize) -> CameraView {
    let mut v = sampler.view(azimuth, elevation);
    v.width = width;
    v.height = height;
    v
}
