//! Command-line surface: dataset generation, training, evaluation, and
//! single-sample completion/rendering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use xmfnet::autodiff::{load_checkpoint, save_checkpoint, AdamConfig};
use xmfnet::data::{generate_dataset, Dataset, GenConfig, Split, ViewConfig};
use xmfnet::error::Error;
use xmfnet::geometry::{read_pcf, write_pcf};
use xmfnet::losses::{eval_metrics, LossConfig};
use xmfnet::model::{ModelConfig, XmfNet};
use xmfnet::render::{read_pgm, render_silhouette, write_pgm, Camera, GrayImage, RenderConfig, RgbImage};
use xmfnet::train::{preload_eval, preload_supervised, train_supervised, SupervisedConfig};
use xmfnet::weaksup::{preload_weak, train_weak, WeakConfig};

/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
pub fn exit_code_of(err: &Error) -> i32 {
    match err {
        Error::Ingestion { .. } | Error::Schema { .. } | Error::Io(_) => 3,
        Error::Divergence(_) => 4,
        _ => 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Weak,
    Unimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Toy,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            batch_size: 16,
            steps: 300,
            eval_every: 50,
            lr_drop_epochs: vec![25, 125],
            lr_drop_factor: 0.1,
        }
    }
}

/// Weak-supervision protocol settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakSettings {
    pub removal_min: f64,
    pub removal_max: f64,
    pub mixup_a: f64,
    pub mixup_b: f64,
    pub use_rendering: bool,
    pub use_dcd: bool,
}

impl Default for WeakSettings {
    fn default() -> Self {
        WeakSettings {
            removal_min: 0.1,
            removal_max: 0.4,
            mixup_a: 1.0,
            mixup_b: 1.0,
            use_rendering: true,
            use_dcd: true,
        }
    }
}

/// Fully resolved run configuration; echoed as JSON next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub scale: Scale,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub render: RenderConfig,
    pub gen: GenConfig,
    pub optim: OptimConfig,
    pub weak: WeakSettings,
}

impl RunConfig {
    /// Defaults for a scale preset.
    pub fn preset(scale: Scale) -> RunConfig {
        let (model, gen, render) = match scale {
            Scale::Paper => (
                ModelConfig::paper(),
                GenConfig {
                    n_shapes: 16,
                    n_views: 24,
                    n_points: 2048,
                    surface_budget: 8192,
                    keep_jitter: 0.1,
                    view: ViewConfig::default(),
                },
                RenderConfig::default(),
            ),
            Scale::Toy => (
                ModelConfig::toy(),
                GenConfig {
                    n_shapes: 16,
                    n_views: 8,
                    n_points: 512,
                    surface_budget: 4096,
                    keep_jitter: 0.1,
                    view: ViewConfig {
                        image_height: 64,
                        image_width: 64,
                        focal_scale: 0.5,
                        rho_gen: 0.05,
                        ..ViewConfig::default()
                    },
                },
                RenderConfig {
                    rho: 0.12,
                    ..RenderConfig::default()
                },
            ),
        };
        RunConfig {
            mode: Mode::Supervised,
            scale,
            seed: 0,
            model,
            loss: LossConfig::default(),
            render,
            gen,
            optim: OptimConfig::default(),
            weak: WeakSettings::default(),
        }
    }

    pub fn validate(&self) -> xmfnet::Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.gen.n_points != self.model.n_points {
            return Err(Error::Config(format!(
                "dataset n_points {} != model n_points {}",
                self.gen.n_points, self.model.n_points
            )));
        }
        if self.gen.view.image_height != self.model.image_height
            || self.gen.view.image_width != self.model.image_width
        {
            return Err(Error::Config("dataset image size != model image size".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optim.lr,
            lr_drop_epochs: self.optim.lr_drop_epochs.clone(),
            lr_drop_factor: self.optim.lr_drop_factor,
            ..AdamConfig::default()
        }
    }

    fn weak_config(&self) -> WeakConfig {
        WeakConfig {
            steps: self.optim.steps,
            batch_size: self.optim.batch_size,
            eval_every: self.optim.eval_every,
            removal_range: (self.weak.removal_min, self.weak.removal_max),
            mixup_beta: (self.weak.mixup_a, self.weak.mixup_b),
            use_rendering: self.weak.use_rendering,
            use_dcd: self.weak.use_dcd,
            adam: self.adam(),
            loss: self.loss.clone(),
            render: self.render.clone(),
            fps_seed: 0,
        }
    }

    fn supervised_config(&self) -> SupervisedConfig {
        SupervisedConfig {
            steps: self.optim.steps,
            batch_size: self.optim.batch_size,
            eval_every: self.optim.eval_every,
            adam: self.adam(),
            loss: self.loss.clone(),
            fps_seed: 0,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "xmfnet", about = "Image-guided point cloud completion", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON file with a full RunConfig; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scale preset.
    #[arg(long, value_enum, default_value = "toy")]
    pub scale: Scale,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weighted-Chamfer direction weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Density-aware Chamfer temperature.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Rendering-loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Edge-mask discount factor.
    #[arg(long = "epsilon-mask")]
    pub epsilon_mask: Option<f64>,
}

impl CommonArgs {
    pub fn resolve(&self) -> xmfnet::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let raw = fs::read_to_string(path).map_err(|e| Error::Ingestion {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
                serde_json::from_str::<RunConfig>(&raw).map_err(|e| {
                    Error::Config(format!("{}:{}: {e}", path.display(), e.line()))
                })?
            }
            None => RunConfig::preset(self.scale),
        };
        cfg.seed = self.seed;
        if let Some(b) = self.beta {
            cfg.loss.beta = b;
        }
        if let Some(a) = self.alpha {
            cfg.loss.alpha = a;
        }
        if let Some(l) = self.lambda {
            cfg.loss.lambda = l;
        }
        if let Some(e) = self.epsilon_mask {
            cfg.render.epsilon_mask = e;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Number of objects.
        #[arg(long)]
        shapes: Option<usize>,
        /// Views per object.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "supervised")]
        mode: Mode,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, log, and config echo.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long = "eval-every")]
        eval_every: Option<usize>,
        /// Disable the rendering loss (weak mode ablation).
        #[arg(long = "no-rendering")]
        no_rendering: bool,
        /// Replace the density-aware Chamfer with the weighted Chamfer in
        /// image steps (weak mode ablation).
        #[arg(long = "no-dcd")]
        no_dcd: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained mode of the checkpoint (affects parameter layout).
        #[arg(long, value_enum, default_value = "supervised")]
        mode: Mode,
        /// Also write a per-view breakdown sorted worst to best.
        #[arg(long = "per-view")]
        per_view: bool,
    },
    /// Complete one sample.
    Complete {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "supervised")]
        mode: Mode,
        /// Input partial cloud (PCF).
        #[arg(long)]
        input: PathBuf,
        /// Input view image (PGM), required unless unimodal.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Completed cloud output path (PCF).
        #[arg(long)]
        out: PathBuf,
        /// Optionally render the completion from this camera (JSON).
        #[arg(long = "render-camera")]
        render_camera: Option<PathBuf>,
        /// Output path of the optional rendering (PGM).
        #[arg(long = "render-out")]
        render_out: Option<PathBuf>,
    },
    /// Render a point cloud from a camera.
    Render {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the splat radius.
        #[arg(long)]
        rho: Option<f64>,
    },
}

fn write_config_echo(cfg: &RunConfig, dir: &Path) -> xmfnet::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(dir.join("run_config.json"), json)?;
    Ok(())
}

fn model_for_mode(cfg: &RunConfig, mode: Mode) -> xmfnet::Result<XmfNet> {
    let mut mc = cfg.model.clone();
    if mode == Mode::Unimodal {
        mc.unimodal = true;
    }
    XmfNet::init(mc, cfg.seed)
}

pub fn cmd_gen_data(
    common: &CommonArgs,
    out: &Path,
    shapes: Option<usize>,
    views: Option<usize>,
) -> xmfnet::Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(s) = shapes {
        cfg.gen.n_shapes = s;
    }
    if let Some(v) = views {
        cfg.gen.n_views = v;
    }
    cfg.validate()?;
    write_config_echo(&cfg, out)?;
    let manifest = generate_dataset(out, &cfg.gen, cfg.seed)?;
    let train = manifest
        .iter()
        .filter(|r| Dataset::split_of(&r.id) == Split::Train)
        .count();
    println!(
        "generated {} objects x {} views at {} ({} train / {} test objects)",
        manifest.len(),
        cfg.gen.n_views,
        out.display(),
        train,
        manifest.len() - train
    );
    for row in &manifest {
        println!("  {} family={} views={}", row.id, row.family, row.n_views);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    common: &CommonArgs,
    mode: Mode,
    data: &Path,
    out: &Path,
    steps: Option<usize>,
    batch: Option<usize>,
    eval_every: Option<usize>,
    no_rendering: bool,
    no_dcd: bool,
) -> xmfnet::Result<()> {
    let mut cfg = common.resolve()?;
    cfg.mode = mode;
    if let Some(s) = steps {
        cfg.optim.steps = s;
    }
    if let Some(b) = batch {
        cfg.optim.batch_size = b;
    }
    if let Some(e) = eval_every {
        cfg.optim.eval_every = e;
    }
    if no_rendering {
        cfg.weak.use_rendering = false;
    }
    if no_dcd {
        cfg.weak.use_dcd = false;
    }
    cfg.validate()?;
    write_config_echo(&cfg, out)?;

    let dataset = Dataset::open(data)?;
    if dataset.is_empty() {
        return Err(Error::Config(format!("dataset at {} is empty", data.display())));
    }
    let eval_items = preload_eval(&dataset.samples(Split::Test))?;
    let mut model = model_for_mode(&cfg, mode)?;

    let outcome = match mode {
        Mode::Supervised | Mode::Unimodal => {
            let train_items = preload_supervised(&dataset.samples(Split::Train))?;
            train_supervised(&mut model, &train_items, &eval_items, &cfg.supervised_config(), cfg.seed)?
        }
        Mode::Weak => {
            let train_items = preload_weak(&dataset.train_samples())?;
            let outcome = train_weak(&mut model, &train_items, &eval_items, &cfg.weak_config(), cfg.seed)?;
            // Audit: training must never have opened a train-split
            // complete.pcf. Evaluation reads test-split ones only.
            let violations = dataset.train_complete_reads();
            let mut audit = String::from("path\n");
            for v in &violations {
                audit.push_str(&format!("{}\n", v.display()));
            }
            fs::write(out.join("access_audit.csv"), audit)?;
            println!("train-split complete.pcf reads during weak training: {}", violations.len());
            if !violations.is_empty() {
                return Err(Error::contract(
                    "train_weak",
                    format!("{} forbidden ground-truth reads, see access_audit.csv", violations.len()),
                ));
            }
            outcome
        }
    };

    fs::write(out.join("train_log.csv"), outcome.log.to_csv())?;
    save_checkpoint(&outcome.best_params, &out.join("best.ckpt"))?;
    save_checkpoint(&model.params, &out.join("final.ckpt"))?;
    println!(
        "trained {} steps: final train loss {:.6}, best eval CD(x1e3) {}",
        cfg.optim.steps,
        outcome.final_train_loss,
        outcome
            .best_eval_cd
            .map(|c| format!("{c:.4}"))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

pub fn cmd_eval(
    common: &CommonArgs,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    mode: Mode,
    per_view: bool,
) -> xmfnet::Result<()> {
    let cfg = common.resolve()?;
    cfg.validate()?;
    write_config_echo(&cfg, out)?;

    let params = load_checkpoint(checkpoint)?;
    let mut mc = cfg.model.clone();
    if mode == Mode::Unimodal {
        mc.unimodal = true;
    }
    let model = XmfNet::with_params(mc, params, cfg.seed)?;

    let dataset = Dataset::open(data)?;
    let handles = dataset.samples(Split::Test);
    if handles.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let mut rows = Vec::new();
    let mut csv = String::from("sample_id,cd_e3,fscore\n");
    for h in &handles {
        let partial = h.partial()?;
        let complete = h.complete()?;
        let img = if model.cfg.unimodal { None } else { Some(h.image()?) };
        let completed = model.complete(&partial, img.as_ref(), 0)?;
        let m = eval_metrics(&complete, &completed, &cfg.loss)?;
        csv.push_str(&format!("{},{:.6},{:.6}\n", h.id(), m.cd_e3, m.fscore));
        rows.push((h.view, m));
    }
    let n = rows.len() as f64;
    let mean_cd: f64 = rows.iter().map(|(_, m)| m.cd_e3).sum::<f64>() / n;
    let mean_f: f64 = rows.iter().map(|(_, m)| m.fscore).sum::<f64>() / n;
    csv.push_str(&format!("mean,{mean_cd:.6},{mean_f:.6}\n"));
    fs::write(out.join("metrics.csv"), csv)?;
    println!("evaluated {} samples: mean CD(x1e3) {mean_cd:.4}, mean F {mean_f:.4}", rows.len());

    if per_view {
        let mut by_view: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut f_by_view: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (v, m) in &rows {
            by_view.entry(*v).or_default().push(m.cd_e3);
            f_by_view.entry(*v).or_default().push(m.fscore);
        }
        let mut view_rows: Vec<(usize, f64, f64)> = by_view
            .iter()
            .map(|(v, cds)| {
                let cd = cds.iter().sum::<f64>() / cds.len() as f64;
                let f = f_by_view[v].iter().sum::<f64>() / f_by_view[v].len() as f64;
                (*v, cd, f)
            })
            .collect();
        // Worst view first, mirroring the per-view breakdown convention.
        view_rows.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite"));
        let mut vcsv = String::from("view,mean_cd_e3,mean_fscore\n");
        for (v, cd, f) in &view_rows {
            vcsv.push_str(&format!("{v},{cd:.6},{f:.6}\n"));
        }
        fs::write(out.join("per_view.csv"), vcsv)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_complete(
    common: &CommonArgs,
    checkpoint: &Path,
    mode: Mode,
    input: &Path,
    image: Option<&Path>,
    out: &Path,
    render_camera: Option<&Path>,
    render_out: Option<&Path>,
) -> xmfnet::Result<()> {
    let cfg = common.resolve()?;
    cfg.validate()?;
    let params = load_checkpoint(checkpoint)?;
    let mut mc = cfg.model.clone();
    if mode == Mode::Unimodal {
        mc.unimodal = true;
    }
    let model = XmfNet::with_params(mc, params, cfg.seed)?;

    let partial = read_pcf(input)?;
    let img = match image {
        Some(p) => Some(RgbImage::from_gray(&read_pgm(p)?)),
        None => None,
    };
    let completed = model.complete(&partial, img.as_ref(), 0)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_pcf(&completed.quantize_f32(), out)?;
    println!("wrote {} points to {}", completed.len(), out.display());

    if let (Some(cam_path), Some(render_path)) = (render_camera, render_out) {
        let cam = Camera::from_json(&fs::read_to_string(cam_path).map_err(|e| Error::Ingestion {
            path: cam_path.to_path_buf(),
            detail: e.to_string(),
        })?)?;
        render_cloud_to_pgm(&completed, &cam, &cfg.render, render_path)?;
        println!("rendered completion to {}", render_path.display());
    }
    Ok(())
}

fn render_cloud_to_pgm(
    cloud: &xmfnet::geometry::PointCloud,
    cam: &Camera,
    rc: &RenderConfig,
    out: &Path,
) -> xmfnet::Result<()> {
    let tape = xmfnet::autodiff::Tape::new();
    let points = tape.constant(vec![cloud.len(), 3], cloud.to_flat())?;
    let (soft, _) = render_silhouette(&points, cam, rc)?;
    let img = GrayImage::new(cam.height, cam.width, soft.values())?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_pgm(&img, out)
}

pub fn cmd_render(
    common: &CommonArgs,
    input: &Path,
    camera: &Path,
    out: &Path,
    rho: Option<f64>,
) -> xmfnet::Result<()> {
    let cfg = common.resolve()?;
    let cloud = read_pcf(input)?;
    let cam = Camera::from_json(&fs::read_to_string(camera).map_err(|e| Error::Ingestion {
        path: camera.to_path_buf(),
        detail: e.to_string(),
    })?)?;
    let mut rc = cfg.render.clone();
    if let Some(r) = rho {
        rc.rho = r;
    }
    render_cloud_to_pgm(&cloud, &cam, &rc, out)?;
    println!("rendered {} points to {}", cloud.len(), out.display());
    Ok(())
}

/// Parse and run; returns a process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version through this path as well.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenData {
            common,
            out,
            shapes,
            views,
        } => cmd_gen_data(common, out, *shapes, *views),
        Command::Train {
            common,
            mode,
            data,
            out,
            steps,
            batch,
            eval_every,
            no_rendering,
            no_dcd,
        } => cmd_train(
            common,
            *mode,
            data,
            out,
            *steps,
            *batch,
            *eval_every,
            *no_rendering,
            *no_dcd,
        ),
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
            mode,
            per_view,
        } => cmd_eval(common, data, checkpoint, out, *mode, *per_view),
        Command::Complete {
            common,
            checkpoint,
            mode,
            input,
            image,
            out,
            render_camera,
            render_out,
        } => cmd_complete(
            common,
            checkpoint,
            *mode,
            input,
            image.as_deref(),
            out,
            render_camera.as_deref(),
            render_out.as_deref(),
        ),
        Command::Render {
            common,
            input,
            camera,
            out,
            rho,
        } => cmd_render(common, input, camera, out, *rho),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_of(&e)
        }
    }
}
