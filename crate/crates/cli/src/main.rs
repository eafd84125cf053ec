//! Command-line front end: scene generation, training, reconstruction and evaluation.

mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use splatrecon::meshing::{evaluate, EvalReport};
use splatrecon::pipeline::{reconstruct, Models, PreparedScene, Stage1Trainer, Stage2Trainer, StepLog, TraceOp};
use splatrecon::scene_io::{
    generate_synthetic_room, load_depth_mm, load_scene, read_ply, save_depth_mm, save_mesh, save_scene, RoomSpec,
};
use splatrecon::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "splatrecon", version, about = "Surface reconstruction with learned Gaussian-splat priors")]
#[command(after_help = RunConfig::key_help())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML file of config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set timesteps=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic room from a TOML or JSON room description.
    GenScene {
        spec: PathBuf,
        out: PathBuf,
    },
    /// Train stage 1 (initializer, decoder) or stage 2 (densifier, optimizer).
    #[command(after_help = RunConfig::key_help())]
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Scene directory or directory of scenes (default: scenes_dir).
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Checkpoint directory (default: checkpoints_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the last checkpoint of this stage.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the loop, refinement, fusion, meshing and evaluation on one scene.
    #[command(after_help = RunConfig::key_help())]
    Reconstruct {
        #[arg(long)]
        scene: PathBuf,
        /// Checkpoint directory (default: checkpoints_dir).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Output directory (default: out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Refinement steps; 0 skips refinement (default: refine_steps).
        #[arg(long)]
        refine: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a mesh and held-out depth maps against a scene's ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Directory of millimeter depth PNGs named after the held-out views.
        #[arg(long)]
        depth: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 invalid input, 3 missing artifact, 4 numerical failure, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Validation(_) | Error::Parse { .. } | Error::ConfigMismatch { .. } | Error::Shape(_) | Error::EmptyInput(_) => 2,
        Error::MissingAsset(_) | Error::MissingGroundTruth(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenScene { spec, out } => gen_scene(&spec, &out),
        Cmd::Train { stage, scenes, out, resume, cfg } => {
            let c = setup(&cfg)?;
            let scenes = scenes.unwrap_or_else(|| c.scenes_dir.clone());
            let out = out.unwrap_or_else(|| c.checkpoints_dir.clone());
            train(&c, stage, &scenes, &out, resume)
        }
        Cmd::Reconstruct { scene, checkpoints, out, refine, cfg } => {
            let mut c = setup(&cfg)?;
            if let Some(r) = refine {
                c.refine_steps = r;
            }
            let ckpt = checkpoints.unwrap_or_else(|| c.checkpoints_dir.clone());
            let out = out.unwrap_or_else(|| c.out_dir.clone());
            reconstruct_cmd(&c, &scene, &ckpt, &out)
        }
        Cmd::Eval { scene, mesh, depth, out } => eval_cmd(&scene, &mesh, &depth, out.as_deref()),
    }
}

fn setup(args: &ConfigArgs) -> Result<RunConfig> {
    let c = RunConfig::resolve(args.config.as_deref(), &args.set)?;
    if c.threads > 0 {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global();
    }
    Ok(c)
}

fn gen_scene(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|_| Error::MissingAsset(spec_path.to_path_buf()))?;
    let what = spec_path.display().to_string();
    let spec: RoomSpec = if spec_path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Parse { what, msg: e.to_string() })?
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse { what, msg: e.to_string() })?
    };
    let scene = generate_synthetic_room(&spec)?;
    save_scene(&scene, out)?;
    log::info!("wrote {} views and {} SfM points to {}", scene.views.len(), scene.points.len(), out.display());
    Ok(())
}

fn scene_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

/// A single scene directory, or every scene directory directly inside `dir`.
fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("cameras.json").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if !dir.is_dir() {
        return Err(Error::MissingAsset(dir.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("cameras.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingAsset(dir.join("cameras.json")));
    }
    Ok(dirs)
}

fn prepare(dir: &Path, c: &RunConfig) -> Result<PreparedScene> {
    PreparedScene::new(scene_name(dir), load_scene(dir)?, c.voxel_edge)
}

enum Trainer {
    One(Stage1Trainer),
    Two(Stage2Trainer),
}

impl Trainer {
    fn step_count(&self) -> u64 {
        match self {
            Trainer::One(t) => t.step_count(),
            Trainer::Two(t) => t.step_count(),
        }
    }

    fn step(&mut self, m: &mut Models, scenes: &[PreparedScene], c: &RunConfig) -> Result<StepLog> {
        match self {
            Trainer::One(t) => t.step(m, scenes, &c.render()),
            Trainer::Two(t) => t.step(m, scenes, &c.render()),
        }
    }

    fn save(&self, m: &Models, dir: &Path) -> Result<()> {
        match self {
            Trainer::One(t) => t.save(m, dir),
            Trainer::Two(t) => t.save(m, dir),
        }
    }
}

/// Keeps the first `n` lines of `path`, creating it if missing.
fn truncate_lines(path: &Path, n: u64) -> Result<()> {
    let kept: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f).lines().take(n as usize).collect::<std::io::Result<_>>().map_err(io_err(path))?,
        Err(_) => Vec::new(),
    };
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn train(c: &RunConfig, stage: u8, scenes_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    let (net, dec) = (c.net(), c.decoder());
    fs::create_dir_all(out).map_err(io_err(out))?;
    let stage_dir = if stage == 1 { Models::stage1_dir(out) } else { Models::stage2_dir(out) };
    fs::create_dir_all(&stage_dir).map_err(io_err(&stage_dir))?;
    let (mut models, mut trainer) = match (stage, resume) {
        (1, false) => {
            let m = Models::new(net, dec)?;
            let t = Stage1Trainer::new(c.stage1(), &m);
            (m, Trainer::One(t))
        }
        (1, true) => {
            let (m, t) = Stage1Trainer::resume(c.stage1(), net, dec, out)?;
            (m, Trainer::One(t))
        }
        (_, false) => {
            let m = Models::load_stage1(out, net, dec)?;
            let t = Stage2Trainer::new(c.stage2(), &m);
            (m, Trainer::Two(t))
        }
        (_, true) => {
            let (m, t) = Stage2Trainer::resume(c.stage2(), net, dec, out)?;
            (m, Trainer::Two(t))
        }
    };
    let scenes = scene_dirs(scenes_dir)?
        .iter()
        .map(|d| prepare(d, c))
        .collect::<Result<Vec<_>>>()?;
    let steps = if stage == 1 { c.stage1_steps } else { c.stage2_steps };
    let log_path = out.join(format!("stage{stage}.log.jsonl"));
    let timing_path = out.join(format!("stage{stage}.timing.jsonl"));
    let done = trainer.step_count();
    truncate_lines(&log_path, done)?;
    truncate_lines(&timing_path, done)?;
    let cfg_path = out.join(format!("stage{stage}.config.toml"));
    fs::write(&cfg_path, c.to_toml()).map_err(io_err(&cfg_path))?;
    log::info!("stage {stage}: steps {done}..{steps} on {} scene(s)", scenes.len());
    for step in done..steps {
        let start = Instant::now();
        let rec = trainer.step(&mut models, &scenes, c)?;
        append_line(&log_path, &to_json(&rec))?;
        let secs = start.elapsed().as_secs_f64();
        append_line(&timing_path, &to_json(&serde_json::json!({ "step": step, "seconds": secs })))?;
        log::info!("stage {stage} step {step} scene {} loss {:.5} ({secs:.2} s)", rec.scene, rec.total);
        if (step + 1) % c.checkpoint_every == 0 || step + 1 == steps {
            trainer.save(&models, out)?;
        }
    }
    if done >= steps {
        trainer.save(&models, out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunLog<'a> {
    scene: String,
    voxels_initial: usize,
    voxels_final: usize,
    gaussians: usize,
    refine_steps: usize,
    mesh_vertices: usize,
    mesh_faces: usize,
    history: &'a [splatrecon::pipeline::LoopRecord],
    trace: &'a [TraceOp],
}

fn depth_file(view_name: &str) -> String {
    let stem = Path::new(view_name).file_stem().map(|s| s.to_string_lossy().into_owned());
    format!("{}.png", stem.unwrap_or_else(|| view_name.to_string()))
}

fn reconstruct_cmd(c: &RunConfig, scene_dir: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let models = Models::load(ckpt, c.net(), c.decoder())?;
    let prep = prepare(scene_dir, c)?;
    let start = Instant::now();
    let r = reconstruct(&prep, &models, &c.reconstruct())?;
    let runtime = start.elapsed().as_secs_f64();
    let depth_dir = out.join("depth");
    fs::create_dir_all(&depth_dir).map_err(io_err(&depth_dir))?;
    save_mesh(&r.mesh, &out.join("mesh.ply"))?;
    for (i, d) in &r.heldout_depths {
        let v = &prep.scene.views[*i];
        save_depth_mm(v.width(), v.height(), d, &depth_dir.join(depth_file(&v.name)))?;
    }
    let eval_path = out.join("eval.json");
    fs::write(&eval_path, serde_json::to_string_pretty(&r.report).expect("serializable")).map_err(io_err(&eval_path))?;
    let run = RunLog {
        scene: prep.name.clone(),
        voxels_initial: r.state.history.first().map_or(0, |h| h.voxels),
        voxels_final: r.state.grid.len(),
        gaussians: r.gaussians.len(),
        refine_steps: c.refine_steps,
        mesh_vertices: r.mesh.vertices.len(),
        mesh_faces: r.mesh.faces.len(),
        history: &r.state.history,
        trace: &r.state.trace,
    };
    let run_path = out.join("run.json");
    fs::write(&run_path, serde_json::to_string_pretty(&run).expect("serializable")).map_err(io_err(&run_path))?;
    let timing_path = out.join("timing.json");
    fs::write(&timing_path, to_json(&serde_json::json!({ "runtime_s": runtime }))).map_err(io_err(&timing_path))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, c.to_toml()).map_err(io_err(&cfg_path))?;
    match &r.report {
        Some(rep) => println!("{}", rep.table()),
        None => log::info!("scene has no ground truth; skipped evaluation"),
    }
    Ok(())
}

fn eval_cmd(scene_dir: &Path, mesh: &Path, depth_dir: &Path, out: Option<&Path>) -> Result<()> {
    let scene = load_scene(scene_dir)?;
    let mesh = read_ply(mesh)?;
    let mut depths = Vec::new();
    for (i, v) in scene.views.iter().enumerate().filter(|(_, v)| v.is_heldout()) {
        let p = depth_dir.join(depth_file(&v.name));
        if !p.exists() {
            return Err(Error::MissingAsset(p));
        }
        let (w, h, d) = load_depth_mm(&p)?;
        if (w, h) != (v.width(), v.height()) {
            return Err(Error::Validation(format!("{} has the wrong size", p.display())));
        }
        depths.push((i, d));
    }
    let report: EvalReport = evaluate(&mesh, &depths, &scene)?;
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    match out {
        Some(p) => fs::write(p, json).map_err(io_err(p))?,
        None => println!("{json}"),
    }
    Ok(())
}
