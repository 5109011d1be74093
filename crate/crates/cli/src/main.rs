//! `splatraj` — simulate projectile scenes, recover their trajectories and
//! score the result.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splatraj_core::recovery::{self, layout as result_layout, prepare_cloud};
use splatraj_core::simulator::{layout as scene_layout, read_points_csv};
use splatraj_core::{
    evaluate, simulate, Ablation, CentroidTracks, ControlInput, Mask, MetricsReport, PruneConfig, RecoveryConfig,
    RecoveryInput, RegistrationTransform, SceneConfig, SimulatedScene, TrajectoryResult,
};

#[derive(Debug, Parser)]
#[command(name = "splatraj", version, about = "Projectile trajectory recovery over a Gaussian splat renderer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic projectile scene with ground truth.
    Simulate {
        /// Scene description; the built-in desk scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the trajectory of a simulated scene directory.
    Recover {
        /// Scene directory written by `simulate`.
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        opts: RecoverOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a recovery result against the scene's ground truth.
    Evaluate {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run the full pipeline and the given ablations on one scene.
    Ablate {
        /// Ablation to compare against the full pipeline; repeatable. All
        /// four when omitted.
        #[arg(long = "mode")]
        modes: Vec<Ablation>,
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        opts: RecoverOpts,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Recovery configuration: a JSON file plus command-line overrides.
#[derive(Debug, Clone, Default, Args)]
struct RecoverOpts {
    /// Recovery configuration JSON; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate at the slowest frame.
    #[arg(long)]
    lr_base: Option<f64>,
    /// Iteration budget at the slowest frame.
    #[arg(long)]
    iter_base: Option<usize>,
    /// Final over initial learning rate within a frame.
    #[arg(long)]
    decay_floor: Option<f64>,
    /// Largest iteration budget as a multiple of --iter-base.
    #[arg(long)]
    iter_cap: Option<f64>,
    /// Kalman process noise variance of the displacement.
    #[arg(long)]
    q_ds: Option<f64>,
    /// Kalman process noise variance of the velocity.
    #[arg(long)]
    q_v: Option<f64>,
    /// Flow observation variance (world units squared); replaces the
    /// variance derived from the scene's pixel noise.
    #[arg(long)]
    r_flow: Option<f64>,
    /// Learned-displacement observation variance.
    #[arg(long)]
    r_learn: Option<f64>,
    /// Registration iterations.
    #[arg(long)]
    registration_iters: Option<usize>,
    /// Registration learning rate.
    #[arg(long)]
    registration_lr: Option<f64>,
    /// Source of the Kalman control input.
    #[arg(long, value_parser = parse_control)]
    control_input: Option<ControlInput>,
    /// Prune anisotropic input kernels whose largest covariance eigenvalue
    /// exceeds this value (requires --prune-distance-factor).
    #[arg(long, requires = "prune_distance_factor")]
    prune_max_axis: Option<f64>,
    /// Prune kernels whose nearest neighbour is farther than this multiple
    /// of the mean pairwise distance (requires --prune-max-axis).
    #[arg(long, requires = "prune_max_axis")]
    prune_distance_factor: Option<f64>,
    /// Disable the flow-consistency term.
    #[arg(long)]
    no_smooth: bool,
    /// Use the literal acceleration-consistency form.
    #[arg(long)]
    literal_lacc: bool,
}

fn parse_control(s: &str) -> Result<ControlInput, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown control input '{s}' (latest, gravity-mean, configured)"))
}

impl RecoverOpts {
    /// Builds the configuration; `scene_noise_px` fills the flow noise when
    /// neither the file nor the flags fix the flow variance.
    fn build(&self, scene_noise_px: f64) -> Result<RecoveryConfig> {
        let (mut cfg, from_file) = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let value: serde_json::Value = serde_json::from_str(&text)?;
                let explicit_flow = value.get("flow_noise_px").is_some()
                    || value.pointer("/noise/sigma_flow_sq").is_some();
                (RecoveryConfig::from_json(&text)?, explicit_flow)
            }
            None => (RecoveryConfig::default(), false),
        };
        if let Some(v) = self.lr_base {
            cfg.dsa.lr_base = v;
        }
        if let Some(v) = self.iter_base {
            cfg.dsa.iter_base = v;
        }
        if let Some(v) = self.decay_floor {
            cfg.dsa.decay_floor_ratio = v;
        }
        if let Some(v) = self.iter_cap {
            cfg.dsa.iter_cap_multiplier = v;
        }
        if let Some(v) = self.q_ds {
            cfg.noise.sigma_ds_sq = v;
        }
        if let Some(v) = self.q_v {
            cfg.noise.sigma_v_sq = v;
        }
        if let Some(v) = self.r_learn {
            cfg.noise.sigma_learn_sq = v;
        }
        if let Some(v) = self.registration_iters {
            cfg.registration_iters = v;
        }
        if let Some(v) = self.registration_lr {
            cfg.registration_lr = v;
        }
        if let Some(v) = self.control_input {
            cfg.control_input = v;
        }
        if let (Some(max_axis), Some(factor)) = (self.prune_max_axis, self.prune_distance_factor) {
            cfg.prune = Some(PruneConfig::new(max_axis, factor)?);
        }
        if self.no_smooth {
            cfg = cfg.with_ablation(Ablation::NoSmooth);
        }
        if self.literal_lacc {
            cfg.literal_lacc = true;
        }
        match self.r_flow {
            Some(v) => {
                cfg.noise.sigma_flow_sq = v;
                cfg.flow_noise_px = None;
            }
            None if !from_file => cfg.flow_noise_px = Some(scene_noise_px),
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { scene, out } => cmd_simulate(scene.as_deref(), &out),
        Command::Recover { scene, opts, out } => {
            let scene = load_scene(&scene)?;
            let cfg = opts.build(scene.config.flow_noise_std)?;
            recover_to(&scene, &cfg, None, &out)?;
            Ok(())
        }
        Command::Evaluate { result, gt } => {
            let report = cmd_evaluate(&result, &gt)?;
            print_summary("result", &report);
            Ok(())
        }
        Command::Ablate { modes, scene, opts, out } => cmd_ablate(&modes, &scene, &opts, &out),
    }
}

fn cmd_simulate(scene: Option<&Path>, out: &Path) -> Result<()> {
    let (cfg, base) = match scene {
        Some(path) => (
            SceneConfig::load(path).with_context(|| format!("loading scene {}", path.display()))?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (SceneConfig::desk(), PathBuf::from(".")),
    };
    let sim = simulate(&cfg, &base)?;
    sim.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} frames to {}", sim.sequence.len(), out.display());
    Ok(())
}

fn load_scene(dir: &Path) -> Result<SimulatedScene> {
    SimulatedScene::load(dir).with_context(|| format!("loading scene directory {}", dir.display()))
}

/// Recovers the scene, reusing `registration` when given, and saves the
/// result under `out`.
fn recover_to(
    scene: &SimulatedScene,
    cfg: &RecoveryConfig,
    registration: Option<&RegistrationTransform>,
    out: &Path,
) -> Result<TrajectoryResult> {
    let cloud = prepare_cloud(&scene.object, cfg)?;
    let input = RecoveryInput {
        frames: &scene.sequence.images,
        flow: &scene.sequence.flow,
        camera: &scene.config.camera,
        physics: &scene.config.physics,
    };
    let start = Instant::now();
    let result = match registration {
        Some(r) => recovery::track_sequence(&input, &cloud, cfg, *r)?,
        None => recovery::recover_sequence(&input, &cloud, cfg)?,
    };
    eprintln!("recovered {} frames in {:.1}s", result.poses.len(), start.elapsed().as_secs_f64());
    result.save(out, &cloud, &scene.config.camera)?;
    fs::write(out.join("recovery.json"), cfg.to_json()?)?;
    Ok(result)
}

fn load_masks(dir: &Path) -> Result<Vec<Mask>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "png"));
    paths.sort();
    paths.iter().map(|p| Ok(Mask::load_png(p)?)).collect()
}

fn cmd_evaluate(result: &Path, gt: &Path) -> Result<MetricsReport> {
    let recovered = load_masks(&result.join(result_layout::MASKS))?;
    let truth = load_masks(&gt.join(scene_layout::MASKS))?;
    if recovered.len() != truth.len() {
        bail!("{} recovered masks but {} ground-truth masks", recovered.len(), truth.len());
    }
    let rec_centroids = read_points_csv(fs::File::open(result.join(result_layout::CENTROIDS))?)?;
    let gt_centroids = read_points_csv(fs::File::open(gt.join(scene_layout::GT_CENTROIDS))?)?;
    let scene = SceneConfig::load(gt.join(scene_layout::SCENE))?;
    let diameter = scene.load_object(gt)?.into_isotropic()?.diameter();
    let report = evaluate(
        &recovered,
        &truth,
        Some(CentroidTracks {
            recovered: &rec_centroids,
            truth: &gt_centroids,
            diameter,
        }),
    )?;
    fs::write(result.join(result_layout::METRICS), report.to_json()?)?;
    report.write_plot_csv(fs::File::create(result.join(result_layout::PLOT))?)?;
    Ok(report)
}

fn print_summary(name: &str, r: &MetricsReport) {
    println!(
        "{name:<10} mean_iou {:.4}  ate {:.5}  rmse {:.5}  centroid_ate {:.5}",
        r.mean_iou,
        r.ate,
        r.rmse,
        r.centroid_ate.unwrap_or(f64::NAN)
    );
}

fn cmd_ablate(modes: &[Ablation], scene_dir: &Path, opts: &RecoverOpts, out: &Path) -> Result<()> {
    let scene = load_scene(scene_dir)?;
    let base = opts.build(scene.config.flow_noise_std)?;
    let modes = if modes.is_empty() {
        vec![Ablation::NoLacc, Ablation::NoDsa, Ablation::NoKalman, Ablation::NoSmooth]
    } else {
        modes.to_vec()
    };
    let runs = std::iter::once(("full".to_owned(), base.clone()))
        .chain(modes.iter().map(|m| (m.to_string(), base.clone().with_ablation(*m))));
    let mut table = csv::Writer::from_path({
        fs::create_dir_all(out)?;
        out.join("ablation.csv")
    })?;
    table.write_record(["mode", "mean_iou", "ate", "rmse", "centroid_ate"])?;
    // the ablations leave registration untouched, so it is fitted once
    let cloud = prepare_cloud(&scene.object, &base)?;
    let registration = recovery::register(&cloud, &scene.sequence.images[0], &scene.config.camera, &base)?;
    for (name, cfg) in runs {
        let dir = out.join(&name);
        recover_to(&scene, &cfg, Some(&registration), &dir)?;
        let report = cmd_evaluate(&dir, scene_dir)?;
        print_summary(&name, &report);
        table.write_record([
            name,
            report.mean_iou.to_string(),
            report.ate.to_string(),
            report.rmse.to_string(),
            report.centroid_ate.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    table.flush()?;
    Ok(())
}
