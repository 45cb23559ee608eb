//! `splatalign` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splatalign::evalsynth::{generate, run_protocol, write_bundle, SynthSpec};
use splatalign::geom::CameraIntrinsics;
use splatalign::io::{self, load_manifest, load_pose, load_poses, load_scene, load_scene_data, save_poses, save_scene, SceneData};
use splatalign::pipeline::{
    format_estimates, load_confidence, parse_estimates, run_persisted, save_confidence, stage_coarse, stage_confidence,
    stage_scene, PipelineConfig,
};
use splatalign::raster::render;
use splatalign::refine::fine_align;
use splatalign::sync::{synchronize, PoseGraph};

#[derive(Parser)]
#[command(name = "splatalign", about = "Pose-free pixel-aligned Gaussian reconstruction", disable_version_flag = true)]
struct Cli {
    /// Print the crate version and the file-format versions this build reads.
    #[arg(long, global = true)]
    version: bool,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

/// Config file plus the flags every stage accepts.
#[derive(Args, Clone, Default)]
struct Common {
    /// Pipeline config (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Robust pairwise relative poses.
    Coarse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Absolute poses from pairwise estimates.
    Sync {
        /// Directory written by `coarse` (or its pairs.txt).
        #[arg(long)]
        pairwise: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of views; defaults to the largest index seen plus one.
        #[arg(long)]
        views: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-view geometry confidence maps.
    Confidence {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Pixel-aligned Gaussians from images, depths, poses and confidence.
    BuildScene {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Directory of confidence maps; full confidence when omitted.
        #[arg(long)]
        confidence: Option<PathBuf>,
        /// Directory of refined depth maps (`depth_NNN.pfm`); manifest depths when omitted.
        #[arg(long)]
        depths: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render a scene from one camera.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// World-to-camera pose file (one pose).
        #[arg(long)]
        pose: PathBuf,
        /// `fx,fy,cx,cy,width,height`
        #[arg(long)]
        intrinsics: String,
        /// Color output; `.png` or `.pfm`. Depth and alpha are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine alignment of poses and depths.
    Refine {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        lambda3d3d: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the pipeline on context views and score targets and poses.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "pipeline-config")]
        pipeline_config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// All stages, persisted under the output directory.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse stages already completed in `out`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Coarse { .. } => "coarse",
            Command::Sync { .. } => "sync",
            Command::Confidence { .. } => "confidence",
            Command::BuildScene { .. } => "build-scene",
            Command::Render { .. } => "render",
            Command::Refine { .. } => "refine",
            Command::Eval { .. } => "eval",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

fn load_data(manifest: &Path) -> Result<SceneData> {
    let m = load_manifest(manifest)?;
    Ok(load_scene_data(&m)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// The effective config goes next to every output.
fn dump_config(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let path = if out.extension().is_some() {
        out.with_extension("config.toml")
    } else {
        out.join("config.toml")
    };
    write(&path, &cfg.to_toml())
}

fn parse_intrinsics(s: &str) -> Result<CameraIntrinsics> {
    let f: Vec<&str> = s.split(',').map(str::trim).collect();
    if f.len() != 6 {
        bail!("intrinsics need 6 comma-separated values fx,fy,cx,cy,width,height, got {s:?}");
    }
    let x = |k: usize| f[k].parse::<f64>().with_context(|| format!("bad intrinsics value {:?}", f[k]));
    let u = |k: usize| f[k].parse::<usize>().with_context(|| format!("bad image size {:?}", f[k]));
    Ok(CameraIntrinsics::new(x(0)?, x(1)?, x(2)?, x(3)?, u(4)?, u(5)?)?)
}

fn check_pose_count(n: usize, data: &SceneData) -> Result<()> {
    if n != data.views.len() {
        bail!("{n} poses for {} views", data.views.len());
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, seed, out } => {
            let spec = match spec {
                Some(p) => SynthSpec::load(&p)?,
                None => SynthSpec::default(),
            };
            let bundle = generate(&spec, seed)?;
            let manifest = write_bundle(&bundle, &out)?;
            println!("{}", manifest.display());
        }
        Command::Coarse { manifest, out, common } => {
            let cfg = common.load()?;
            let data = load_data(&manifest)?;
            let result = stage_coarse(&data, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write(&out.join("pairs.txt"), &format_estimates(&result))?;
            let mut report = String::from("# i j inliers matches support_weight\n");
            for e in &result.estimates {
                report.push_str(&format!("{} {} {} {} {}\n", e.i, e.j, e.inlier_count, e.match_count, e.support_weight));
            }
            for (i, j, why) in &result.failures {
                report.push_str(&format!("# failed {i} {j} {why}\n"));
            }
            write(&out.join("report.txt"), &report)?;
            dump_config(&cfg, &out)?;
        }
        Command::Sync { pairwise, out, views, common } => {
            let cfg = common.load()?;
            let path = if pairwise.is_dir() { pairwise.join("pairs.txt") } else { pairwise };
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let coarse = parse_estimates(&text, &path)?;
            let seen = coarse.estimates.iter().map(|e| e.j.max(e.i) + 1).max().unwrap_or(0);
            let n = views.unwrap_or(seen);
            let graph = PoseGraph::from_estimates(n, &coarse.estimates)?;
            let synced = synchronize(&graph, &cfg.sync_params())?;
            save_poses(&synced.poses, &out)?;
            dump_config(&cfg, &out)?;
        }
        Command::Confidence { manifest, poses, out, k, tau, common } => {
            let mut cfg = common.load()?;
            if let Some(k) = k {
                cfg.confidence.k = k;
            }
            if let Some(t) = tau {
                cfg.confidence.tau = t;
            }
            cfg.validate()?;
            let data = load_data(&manifest)?;
            let poses = load_poses(&poses)?;
            check_pose_count(poses.len(), &data)?;
            let depths: Vec<_> = data.views.iter().map(|v| v.depth.clone()).collect();
            let maps = stage_confidence(&data, &poses, &depths, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, m) in maps.iter().enumerate() {
                save_confidence(m, &out.join(format!("conf_{i:03}.pfm")))?;
            }
            dump_config(&cfg, &out)?;
        }
        Command::BuildScene { manifest, poses, confidence, depths, out, common } => {
            let cfg = common.load()?;
            let data = load_data(&manifest)?;
            let poses = load_poses(&poses)?;
            check_pose_count(poses.len(), &data)?;
            let n = data.views.len();
            let depth_maps = match depths {
                Some(dir) => (0..n)
                    .map(|i| io::load_depth(&dir.join(format!("depth_{i:03}.pfm"))))
                    .collect::<splatalign::Result<Vec<_>>>()?,
                None => data.views.iter().map(|v| v.depth.clone()).collect(),
            };
            let conf = match confidence {
                Some(dir) => (0..n)
                    .map(|i| load_confidence(&dir.join(format!("conf_{i:03}.pfm"))))
                    .collect::<splatalign::Result<Vec<_>>>()?,
                None => data
                    .views
                    .iter()
                    .map(|v| splatalign::confvol::ConfidenceMap::uniform(v.intr.height, v.intr.width, 1.0))
                    .collect(),
            };
            let scene = stage_scene(&data, &poses, &depth_maps, &conf, &cfg)?;
            save_scene(&scene, &out)?;
            log::info!("{} gaussians written to {}", scene.gaussians.len(), out.display());
            dump_config(&cfg, &out)?;
        }
        Command::Render { scene, pose, intrinsics, out, common } => {
            let cfg = common.load()?;
            let scene = load_scene(&scene)?;
            let pose = load_pose(&pose)?;
            let intr = parse_intrinsics(&intrinsics)?;
            let r = render(&scene, &pose, &intr, &cfg.render)?;
            if let Some(p) = out.parent() {
                fs::create_dir_all(p).ok();
            }
            r.save(&out)?;
            dump_config(&cfg, &out)?;
        }
        Command::Refine { manifest, poses, out, rounds, lambda3d3d, common } => {
            let mut cfg = common.load()?;
            if let Some(r) = rounds {
                cfg.refine.rounds = r;
            }
            if let Some(l) = lambda3d3d {
                cfg.refine.weights.lambda_3d3d = l;
            }
            cfg.validate()?;
            let data = load_data(&manifest)?;
            let init = load_poses(&poses)?;
            check_pose_count(init.len(), &data)?;
            let result = fine_align(&data, &init, &cfg.refine_params(&data))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_poses(&result.poses, &out.join("poses.txt"))?;
            for (i, d) in result.depths.iter().enumerate() {
                io::save_depth(d, &out.join(format!("depth_{i:03}.pfm")))?;
            }
            write(&out.join("report.txt"), &result.report.to_text())?;
            dump_config(&cfg, &out)?;
        }
        Command::Eval { manifest, pipeline_config, report, seed } => {
            let cfg = Common { config: pipeline_config, seed }.load()?;
            let data = load_data(&manifest)?;
            let out = run_protocol(&data, &cfg)?;
            write(&report, &out.report.to_text())?;
            dump_config(&cfg, &report)?;
        }
        Command::Pipeline { manifest, out, resume, common } => {
            let mut cfg = common.load()?;
            cfg.output_dir = Some(out.clone());
            let data = load_data(&manifest).map_err(|e| anyhow!("stage load failed: {e:#}"))?;
            // run_persisted writes the effective config itself
            run_persisted(&data, &cfg, &out, resume)?;
            println!("{}", out.join("report.txt").display());
        }
    }
    Ok(())
}

fn print_version() {
    println!("splatalign {}", env!("CARGO_PKG_VERSION"));
    for (name, v) in io::supported_versions() {
        println!("{name}: version {v}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.version {
        print_version();
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: no subcommand given (see --help)");
        return ExitCode::from(2);
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let name = cmd.name();
    match run(cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if name == "pipeline" {
                eprintln!("error: {e:#}");
            } else {
                eprintln!("error: stage {name} failed: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
