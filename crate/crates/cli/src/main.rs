#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod layered;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use hcog::camera::{ViewSampler, DEFAULT_RADIUS_FACTOR};
use hcog::pipeline::{self, CheckpointPaths, PipelineError, RunConfig, RunOptions};
use hcog::planner::{self, LlmClient, PlanError, PlanSource};
use hcog::ply::load_ply;
use hcog::raster::{render, Channels, RenderOptions};
use hcog::scene::{Mark, Scene};
use hcog::wire::RetryPolicy;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "hcog", version, about = "Part-aware compositional 3D Gaussian generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a generation plan from a prompt or a plan file.
    Plan {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, conflicts_with = "plan_file")]
        llm_endpoint: Option<String>,
        #[arg(long)]
        llm_model: Option<String>,
        #[arg(long)]
        plan_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the generation pipeline.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint directory (or the run directory holding it) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        plan_file: Option<PathBuf>,
        #[arg(long)]
        score_endpoint: Option<String>,
        #[arg(long)]
        mask_endpoint: Option<String>,
        #[arg(long)]
        coarse_steps: Option<usize>,
        #[arg(long)]
        fine_steps: Option<usize>,
        /// Stop after this many stages, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Render turntable PNGs of a PLY scene.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,45,90,135,180,225,270,315")]
        azimuths: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        elevation: f64,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        /// Camera distance; defaults to 1.8 times the scene's bounding radius.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Summarize a PLY scene as JSON.
    Inspect {
        #[arg(long)]
        ply: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn plan_failure(e: PlanError) -> Failure {
    match e {
        PlanError::Wire(w) => Failure::Runtime(w.to_string()),
        other => Failure::Config(other.to_string()),
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Plan {
            prompt,
            llm_endpoint,
            llm_model,
            plan_file,
            out,
        } => cmd_plan(prompt, llm_endpoint, llm_model, plan_file, &out),
        Command::Generate {
            config,
            out_dir,
            resume,
            seed,
            plan_file,
            score_endpoint,
            mask_endpoint,
            coarse_steps,
            fine_steps,
            stop_after,
        } => {
            let mut flags = Vec::new();
            if let Some(s) = seed {
                flags.push(json!({ "seed": s }));
            }
            if let Some(p) = plan_file {
                flags.push(json!({ "plan": { "file": p } }));
            }
            if let Some(e) = score_endpoint {
                flags.push(json!({ "providers": { "score_endpoint": e } }));
            }
            if let Some(e) = mask_endpoint {
                flags.push(json!({ "providers": { "mask_endpoint": e } }));
            }
            if let Some(n) = coarse_steps {
                flags.push(json!({ "steps": { "coarse": n } }));
            }
            if let Some(n) = fine_steps {
                flags.push(json!({ "steps": { "fine": n } }));
            }
            let cfg = load_run_config(config.as_deref(), flags)?;
            cmd_generate(&cfg, &out_dir, resume.as_deref(), stop_after)
        }
        Command::Render {
            ply,
            azimuths,
            out_dir,
            elevation,
            width,
            height,
            radius,
        } => cmd_render(&ply, &azimuths, &out_dir, elevation, width, height, radius),
        Command::Inspect { ply } => {
            let scene = load_ply(&ply).map_err(|e| Failure::Config(e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&inspect(&scene)).expect("serializable"));
            Ok(())
        }
    }
}

fn load_run_config(path: Option<&Path>, flags: Vec<Value>) -> Result<RunConfig, Failure> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: invalid JSON: {e}", p.display())))?;
            Some(v)
        }
        None => None,
    };
    let env = layered::env_patches(std::env::vars());
    let mut cfg: RunConfig = layered::layered(file, flags, env).map_err(|e| Failure::Config(e.0))?;
    // Relative paths in a config file resolve against the file's directory.
    if let Some(base) = path.and_then(Path::parent) {
        resolve_paths(&mut cfg, base);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_paths(cfg: &mut RunConfig, base: &Path) {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(p) = cfg.plan.file.as_mut() {
        fix(p);
    }
    if let pipeline::InitConfig::Ply(p) = &mut cfg.init {
        fix(p);
    }
    cfg.providers.oracle_targets.iter_mut().for_each(fix);
}

fn cmd_plan(
    prompt: Option<String>,
    llm_endpoint: Option<String>,
    llm_model: Option<String>,
    plan_file: Option<PathBuf>,
    out: &Path,
) -> Result<(), Failure> {
    let bytes = match (plan_file, llm_endpoint) {
        (Some(path), None) => {
            let plan = planner::load_plan_file(&path).map_err(plan_failure)?;
            log::info!("plan file {} is valid ({} blocks)", path.display(), plan.blocks.len());
            std::fs::read(&path).map_err(|e| io_failure(&path, e))?
        }
        (None, Some(endpoint)) => {
            let prompt = prompt.ok_or_else(|| Failure::Config("--prompt is required with --llm-endpoint".into()))?;
            let client = LlmClient::new(endpoint, llm_model, RetryPolicy::default());
            let plan = planner::synthesize_plan(&prompt, PlanSource::Llm(&client)).map_err(plan_failure)?;
            let mut text = plan.to_json_pretty();
            text.push('\n');
            text.into_bytes()
        }
        _ => return Err(Failure::Config("give exactly one of --llm-endpoint or --plan-file".into())),
    };
    std::fs::write(out, &bytes).map_err(|e| io_failure(out, e))?;
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{}", serde_json::to_string(&v).expect("serializable"));
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<(), Failure> {
    let options = RunOptions { stop_after };
    let outcome = match resume {
        Some(src) => {
            let src_ckpt = locate_checkpoint(src)?;
            let dst = CheckpointPaths::new(out_dir);
            if src_ckpt.dir != dst.dir {
                std::fs::create_dir_all(&dst.dir).map_err(|e| io_failure(&dst.dir, e))?;
                for (from, to) in [(src_ckpt.scene(), dst.scene()), (src_ckpt.manifest(), dst.manifest())] {
                    std::fs::copy(&from, &to).map_err(|e| io_failure(&from, e))?;
                }
            }
            pipeline::resume(cfg, out_dir, &options)?
        }
        None => pipeline::run(cfg, out_dir, &options)?,
    };
    let summary = json!({
        "finished": outcome.manifest.finished,
        "completed_stages": outcome.manifest.completed,
        "total_stages": outcome.manifest.total_stages,
        "kernels": outcome.scene.len(),
        "final_ply": outcome.manifest.finished.then(|| out_dir.join("final.ply")),
        "checkpoint": CheckpointPaths::new(out_dir).dir,
    });
    println!("{summary}");
    Ok(())
}

fn locate_checkpoint(path: &Path) -> Result<CheckpointPaths, Failure> {
    let candidates = [
        CheckpointPaths { dir: path.to_path_buf() },
        CheckpointPaths::new(path),
        CheckpointPaths {
            dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        },
    ];
    candidates
        .into_iter()
        .find(|c| c.manifest().is_file() && c.scene().is_file())
        .ok_or_else(|| Failure::Config(format!("no checkpoint found at {}", path.display())))
}

fn cmd_render(
    ply: &Path,
    azimuths: &[f64],
    out_dir: &Path,
    elevation: f64,
    width: usize,
    height: usize,
    radius: Option<f64>,
) -> Result<(), Failure> {
    if width == 0 || height == 0 || !(-90.0..=90.0).contains(&elevation) {
        return Err(Failure::Config("need width, height ≥ 1 and elevation in [-90, 90]".into()));
    }
    if radius.is_some_and(|r| !(r > 0.0)) {
        return Err(Failure::Config("--radius must be > 0".into()));
    }
    let scene = load_ply(ply).map_err(|e| Failure::Config(e.to_string()))?;
    let radius = radius.unwrap_or_else(|| scene.bounding_radius([0.0; 3]).max(1e-3) * DEFAULT_RADIUS_FACTOR);
    let sampler = ViewSampler::new(radius, width, height);
    std::fs::create_dir_all(out_dir).map_err(|e| io_failure(out_dir, e))?;
    let mut written = Vec::new();
    for &az in azimuths {
        let view = sampler.view(az.rem_euclid(360.0), elevation);
        let out = render(&scene, &view, &RenderOptions::default().with_channels(Channels::COLOR));
        let path = out_dir.join(format!("az{}.png", fmt_deg(az)));
        out.color.save_png(&path).map_err(|e| io_failure(&path, e))?;
        written.push(path);
    }
    println!("{}", json!({ "images": written }));
    Ok(())
}

fn fmt_deg(az: f64) -> String {
    if az.fract() == 0.0 {
        format!("{}", az as i64)
    } else {
        format!("{az}")
    }
}

fn inspect(scene: &Scene) -> Value {
    let mut marks = BTreeMap::from([("original", 0usize), ("extended", 0), ("new_part", 0)]);
    let mut blocks: BTreeMap<i32, usize> = BTreeMap::new();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for k in scene.kernels() {
        let key = match k.mark {
            Mark::Original => "original",
            Mark::Extended => "extended",
            Mark::NewPart => "new_part",
        };
        *marks.get_mut(key).expect("known mark") += 1;
        *blocks.entry(k.block_id).or_default() += 1;
        for a in 0..3 {
            lo[a] = lo[a].min(k.position[a] as f64);
            hi[a] = hi[a].max(k.position[a] as f64);
        }
    }
    let bounds = if scene.is_empty() {
        Value::Null
    } else {
        json!({ "min": lo, "max": hi })
    };
    let blocks: BTreeMap<String, usize> = blocks.into_iter().map(|(b, n)| (b.to_string(), n)).collect();
    json!({
        "count": scene.len(),
        "marks": marks,
        "blocks": blocks,
        "bounds": bounds,
    })
}
