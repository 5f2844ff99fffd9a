use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heightbev::bevgrid::{fuse_heightmaps, heightmap_from_boxes, heightmap_from_lidar, GridSpec, HeightMap};
use heightbev::exec::Execution;
use heightbev::geometry::{sweep_camera, BoundRow, CameraCalib, CameraModel, MIN_ORACLE_STEPS};
use heightbev::metrics::{evaluate, Detection, Frame};
use heightbev::pipeline::{
    desk_fit_config, evaluate_scenes, final_queries, prepare_all, train, HeightMode, PipelineConfig, PreparedScene,
};
use heightbev::predictor::{EpochLog, PredictorParams};
use heightbev::synthscene::{generate_dataset, lidar_like, load_dataset, save_dataset, Scene, CH_HEIGHT, CH_OBJECTNESS};
use heightbev::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Height-driven BEV construction: bounds, height maps, training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "heightbev", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Depth and height error bounds for one camera, as CSV on stdout.
    Bounds(BoundsArgs),
    /// Box, LiDAR and fused height maps of one scene, as CSV and PGM.
    Gtmap(GtmapArgs),
    /// Writes a seeded synthetic dataset.
    Generate(GenerateArgs),
    /// Trains the height predictor; writes a checkpoint and a CSV log.
    Train(TrainArgs),
    /// Detection metrics over a dataset, as JSON on stdout.
    Eval(EvalArgs),
    /// Dumps BEV query channels of one scene as PGM.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Cells per side of the ego-centered grid.
    #[arg(long, default_value_t = 96)]
    cells: usize,
    /// Anchor heights per cell.
    #[arg(long, default_value_t = 8)]
    anchors: usize,
}

impl GridArgs {
    fn config(&self) -> Result<PipelineConfig, String> {
        if self.anchors == 0 {
            return Err("--anchors must be at least 1".into());
        }
        let grid = GridSpec::ego_square(self.cells);
        grid.validate().map_err(|e| e.to_string())?;
        Ok(PipelineConfig { grid, n_anchors: self.anchors, ..PipelineConfig::default() })
    }
}

#[derive(Debug, Args)]
struct BoundsArgs {
    /// Camera calibration JSON.
    #[arg(long)]
    calib: PathBuf,
    /// Neighbourhood radius (m).
    #[arg(long)]
    eps: f64,
    /// Rows: the principal point, then seeded pixels.
    #[arg(long, default_value_t = 16)]
    sweep: usize,
    /// Ground-truth depth of every row (m).
    #[arg(long, default_value_t = 20.0)]
    depth: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bisection steps of the brute-force search.
    #[arg(long, default_value_t = MIN_ORACLE_STEPS)]
    steps: usize,
}

#[derive(Debug, Args)]
struct GtmapArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Also build the LiDAR-like and fused maps.
    #[arg(long)]
    lidar: bool,
    /// Azimuth rays of the simulated sweep.
    #[arg(long, default_value_t = 720)]
    rays: usize,
    /// Height intervals of the LiDAR histogram.
    #[arg(long, default_value_t = 16)]
    intervals: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the default step size.
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint path.
    #[arg(long, default_value = "predictor.ckpt")]
    out: PathBuf,
    /// Training log path (CSV).
    #[arg(long, default_value = "train_log.csv")]
    log: PathBuf,
    /// Runs on one thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Predictor checkpoint; required unless another height source is chosen.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Anchor at ground-truth heights instead of predicted ones.
    #[arg(long, conflicts_with_all = ["baseline", "gt_boxes"])]
    gt_heights: bool,
    /// Fixed anchors over the full height range.
    #[arg(long, conflicts_with = "gt_boxes")]
    baseline: bool,
    /// Scores the ground-truth boxes themselves as detections.
    #[arg(long)]
    gt_boxes: bool,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    mask: Switch,
    /// Segmentation threshold of the query mask.
    #[arg(long, default_value_t = 0.25)]
    tau: f64,
    /// Background noise amplitude of the rendered views.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    noise_seed: u64,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    gt_heights: bool,
    /// Query channels to dump.
    #[arg(long, value_delimiter = ',', default_values_t = [CH_OBJECTNESS, CH_HEIGHT])]
    channels: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    mask: Switch,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERIC } else { EXIT_DATA };
        Self { code, message: e.to_string() }
    }
}

fn data_err<E: Into<Error>>(e: E) -> Failure {
    e.into().into()
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure { code: EXIT_DATA, message: format!("{}: {e}", path.display()) }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("heightbev: {}", first.trim_start_matches("error: "));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Bounds(a) => bounds(a),
        Command::Gtmap(a) => gtmap(a),
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("heightbev: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn bounds(a: BoundsArgs) -> Result<(), Failure> {
    if !(a.eps.is_finite() && a.eps > 0.0) {
        return Err(Failure::usage("--eps must be positive"));
    }
    if a.steps < MIN_ORACLE_STEPS {
        return Err(Failure::usage(format!("--steps must be at least {MIN_ORACLE_STEPS}")));
    }
    let text = fs::read_to_string(&a.calib).map_err(io_at(&a.calib))?;
    let calib: CameraCalib = serde_json::from_str(&text)
        .map_err(|e| Failure { code: EXIT_DATA, message: format!("{}: {e}", a.calib.display()) })?;
    let camera = CameraModel::try_from(calib).map_err(data_err)?;
    let rows = sweep_camera(&camera, a.eps, a.depth, a.sweep, a.steps, a.seed, Execution::default()).map_err(data_err)?;
    println!("{},height_over_depth", BoundRow::CSV_HEADER);
    for r in rows {
        println!("{},{}", r.to_csv(), r.height_bound_m / r.depth_bound_m);
    }
    Ok(())
}

fn write_map(dir: &Path, stem: &str, map: &HeightMap) -> Result<(), Failure> {
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, map.to_csv()).map_err(io_at(&csv))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, map.to_pgm().encode()).map_err(io_at(&pgm))
}

fn gtmap(a: GtmapArgs) -> Result<(), Failure> {
    let cfg = a.grid.config().map_err(Failure::usage)?;
    let scene = Scene::load(&a.scene).map_err(data_err)?;
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    let boxes = heightmap_from_boxes(&cfg.grid, &scene.boxes);
    write_map(&a.out, "boxes", &boxes)?;
    if a.lidar {
        let cloud = lidar_like(&scene, a.rays, a.seed);
        let lidar = heightmap_from_lidar(&cfg.grid, &cloud, a.intervals);
        let fused = fuse_heightmaps(&boxes, &lidar).map_err(data_err)?;
        write_map(&a.out, "lidar", &lidar)?;
        write_map(&a.out, "fused", &fused)?;
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let cfg = a.grid.config().map_err(Failure::usage)?;
    let scenes = generate_dataset(a.seed, a.count, &cfg.grid).map_err(data_err)?;
    save_dataset(&a.out, &scenes).map_err(data_err)
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>, Failure> {
    let scenes = load_dataset(dir).map_err(data_err)?;
    if scenes.is_empty() {
        return Err(Failure { code: EXIT_DATA, message: format!("{}: no scene files", dir.display()) });
    }
    Ok(scenes)
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let cfg = a.grid.config().map_err(Failure::usage)?;
    let mut fit = desk_fit_config(a.epochs, a.seed);
    if let Some(lr) = a.lr {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Failure::usage("--lr must be a non-negative number"));
        }
        fit.lr = lr;
    }
    let scenes = load_scenes(&a.scenes)?;
    let (params, log) = train(&scenes, &cfg, &fit, exec(a.sequential)).map_err(data_err)?;
    let file = fs::File::create(&a.out).map_err(io_at(&a.out))?;
    params.write_checkpoint(std::io::BufWriter::new(file), a.seed, a.epochs).map_err(data_err)?;
    let mut csv = String::from(EpochLog::CSV_HEADER);
    csv.push('\n');
    for row in &log {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    fs::write(&a.log, csv).map_err(io_at(&a.log))?;
    if let Some(last) = log.last() {
        eprintln!("epoch {} loss {:.6} occupied y-MAE {:.4} m", last.epoch, last.total_loss, last.y_mae_occupied_m);
    }
    Ok(())
}

fn load_params(path: Option<&PathBuf>, what: &str) -> Result<PredictorParams, Failure> {
    let path = path.ok_or_else(|| Failure::usage(format!("{what} needs --checkpoint, --gt-heights or --baseline")))?;
    let file = fs::File::open(path).map_err(io_at(path))?;
    let (params, _) = PredictorParams::read_checkpoint(std::io::BufReader::new(file)).map_err(data_err)?;
    Ok(params)
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = a.grid.config().map_err(Failure::usage)?;
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(Failure::usage("--tau must lie in [0, 1]"));
    }
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(Failure::usage("--noise must be non-negative"));
    }
    cfg.tau = a.tau;
    cfg.render.noise_amplitude = a.noise;
    cfg.render.noise_seed = a.noise_seed;
    let scenes = load_scenes(&a.scenes)?;
    let result = if a.gt_boxes {
        let frames: Vec<Frame> = scenes
            .iter()
            .map(|s| Frame {
                detections: s.boxes.iter().map(|b| Detection { bbox: *b, score: 1.0 }).collect(),
                ground_truth: s.boxes.clone(),
            })
            .collect();
        evaluate(&frames)
    } else {
        let exec = exec(a.sequential);
        let prepared = prepare_all(&scenes, &cfg, exec);
        let params;
        let mode = if a.gt_heights {
            HeightMode::GroundTruth
        } else if a.baseline {
            HeightMode::Baseline
        } else {
            params = load_params(a.checkpoint.as_ref(), "eval")?;
            check_params(&params)?;
            HeightMode::Predicted(&params)
        };
        evaluate_scenes(&prepared, mode, a.mask == Switch::On, &cfg, exec).0
    };
    println!("{}", serde_json::to_string_pretty(&result).expect("metrics serialize"));
    Ok(())
}

fn check_params(params: &PredictorParams) -> Result<(), Failure> {
    if params.query_channels() != heightbev::synthscene::SIGNATURE_CHANNELS {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("checkpoint expects {} query channels", params.query_channels()),
        });
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<(), Failure> {
    let cfg = a.grid.config().map_err(Failure::usage)?;
    if let Some(&c) = a.channels.iter().find(|&&c| c >= heightbev::synthscene::SIGNATURE_CHANNELS) {
        return Err(Failure::usage(format!("channel {c} out of range")));
    }
    let scene = Scene::load(&a.scene).map_err(data_err)?;
    let p = PreparedScene::new(scene, &cfg.grid, &cfg.render);
    let params;
    let mode = if a.gt_heights {
        HeightMode::GroundTruth
    } else if a.checkpoint.is_some() {
        params = load_params(a.checkpoint.as_ref(), "sample")?;
        check_params(&params)?;
        HeightMode::Predicted(&params)
    } else {
        HeightMode::Baseline
    };
    let (q, _) = final_queries(&p, mode, a.mask == Switch::On, &cfg, Execution::default());
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    for c in a.channels {
        let path = a.out.join(format!("query_ch{c:02}.pgm"));
        fs::write(&path, q.channel_pgm(&cfg.grid, c).encode()).map_err(io_at(&path))?;
    }
    Ok(())
}
