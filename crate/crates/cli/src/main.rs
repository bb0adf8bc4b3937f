//! `mvstr`: synthetic data, training, inference, fusion, evaluation and
//! gradient checks from one binary.
//!
//! Exit codes: 0 on success, 1 for usage and I/O errors, 2 for numerical
//! failures (divergence, failed gradient checks).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mvstr_core::camera::Camera;
use mvstr_core::config::RunConfig;
use mvstr_core::fusion::{fuse, DepthView};
use mvstr_core::io::{
    camera_path, confidence_path, depth_path, export_dataset, image_path, index_path, nearest_pairs, write_camera, write_index, write_pfm, write_ppm,
    Dataset, PointCloud,
};
use mvstr_core::metrics::{accuracy_completeness, default_outlier_dist};
use mvstr_core::pipeline::Model;
use mvstr_core::synth::{render_scene, toy_specs, SceneSpec};
use mvstr_core::train::{samples_from_dataset, train};
use mvstr_core::verify::{run_suite, SuiteOptions};
use mvstr_tensor::{checkpoint, Precision, Scalar};

#[derive(Parser, Debug)]
#[command(name = "mvstr", version, about = "Multi-view stereo with cross-view transformers")]
struct Cli {
    /// Run configuration (TOML with dotted keys); merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting configuration before the file and overrides apply.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// `key = value` override, e.g. `--set model.heads=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `standard` runs in 32-bit floats, `verify` in 64-bit.
    #[arg(long, global = true, default_value = "standard")]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    /// The small model used for synthetic overfitting.
    Toy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic scenes and export them as datasets.
    Synth {
        /// Scene spec files. One spec writes into OUT, several into OUT/scene_NN.
        specs: Vec<PathBuf>,
        /// Render the two built-in toy scenes instead.
        #[arg(long)]
        toy: bool,
        /// Image size of the toy scenes.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train on every scene under DATA and write a checkpoint.
    Train {
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Per-step log; defaults to the checkpoint path with `.log` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict depth and confidence maps for every view under DATA.
    Infer {
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Filter and fuse predicted depth maps into a point cloud.
    Fuse {
        depths: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Accuracy, completeness and overall score of a reconstruction.
    Eval {
        recon: PathBuf,
        gt: PathBuf,
        /// Distance above which nearest neighbours are ignored.
        #[arg(long)]
        outlier_dist: Option<f64>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        /// Replaces the per-check tolerances.
        #[arg(long)]
        tol: Option<f64>,
        /// Only run checks whose name contains this.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// A failure of the numerics rather than of the inputs.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<Numerical>().is_some() || e.downcast_ref::<mvstr_core::Error>().is_some_and(|e| e.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match cli.preset {
        Preset::Default => RunConfig::default(),
        Preset::Toy => RunConfig::toy(),
    };
    let mut layers = Vec::new();
    if let Some(path) = &cli.config {
        layers.push(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?);
    }
    layers.extend(cli.overrides.iter().cloned());
    let mut cfg = RunConfig::from_toml_with_overrides(&base.to_toml(), &layers)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { specs, toy, size, out } => synth(specs, *toy, *size, out, cli.seed, &cfg),
        Command::Train { data, out, log } => {
            let log = log.clone().unwrap_or_else(|| PathBuf::from(format!("{}.log", out.display())));
            match cli.precision {
                Precision::Standard => train_cmd::<f32>(data, out, &log, &cfg),
                Precision::Verification => train_cmd::<f64>(data, out, &log, &cfg),
            }
        }
        Command::Infer { data, checkpoint, out } => match cli.precision {
            Precision::Standard => infer::<f32>(data, checkpoint, out, &cfg),
            Precision::Verification => infer::<f64>(data, checkpoint, out, &cfg),
        },
        Command::Fuse { depths, out } => fuse_cmd(depths, out, &cfg),
        Command::Eval { recon, gt, outlier_dist } => eval(recon, gt, outlier_dist.or(cfg.fusion.outlier_dist)),
        Command::Gradcheck { tol, filter } => gradcheck(*tol, filter.clone()),
    }
}

fn synth(specs: &[PathBuf], toy: bool, size: usize, out: &Path, seed: Option<u64>, cfg: &RunConfig) -> Result<()> {
    let mut scenes = match (toy, specs.is_empty()) {
        (true, true) => toy_specs(size),
        (false, false) => specs
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                SceneSpec::from_toml(&text).with_context(|| p.display().to_string())
            })
            .collect::<Result<Vec<_>>>()?,
        (true, false) => bail!("give either scene spec files or --toy, not both"),
        (false, true) => bail!("no scene spec files given (or use --toy)"),
    };
    if let Some(seed) = seed {
        for (i, spec) in scenes.iter_mut().enumerate() {
            spec.seed = seed + i as u64;
        }
    }
    let single = scenes.len() == 1;
    for (i, spec) in scenes.iter().enumerate() {
        let dir = if single { out.to_path_buf() } else { out.join(format!("scene_{i:02}")) };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let views = render_scene(spec)?;
        export_dataset(&views, &dir, cfg.infer.num_sources)?;
        fs::write(dir.join("scene.toml"), spec.to_toml()).with_context(|| format!("writing into {}", dir.display()))?;
        println!("{}: {} views", dir.display(), views.len());
    }
    Ok(())
}

fn train_cmd<T: Scalar>(data: &Path, out: &Path, log_path: &Path, cfg: &RunConfig) -> Result<()> {
    let mut samples = Vec::new();
    for dir in Dataset::scene_dirs(data)? {
        samples.extend(samples_from_dataset::<T>(&Dataset::load(&dir)?, cfg.train.num_sources)?);
    }
    let model = Model::new(cfg);
    let mut store = model.init::<T>(cfg.seed);
    let mut log = std::io::BufWriter::new(fs::File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let steps = train(cfg, &mut store, &samples, |entry| {
        if let Err(e) = writeln!(log, "{entry}") {
            write_err.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let steps = steps?;
    checkpoint::save(&store, out).with_context(|| format!("writing {}", out.display()))?;
    if let (Some(first), Some(last)) = (steps.first(), steps.last()) {
        println!("{} samples, {} steps, loss {} -> {}", samples.len(), steps.len(), first.loss, last.loss);
    }
    Ok(())
}

fn infer<T: Scalar>(data: &Path, ckpt: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let model = Model::new(cfg);
    let store = checkpoint::load::<T>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    model.check_params(&store)?;
    let dirs = Dataset::scene_dirs(data)?;
    let single = dirs.len() == 1 && dirs[0] == data;
    for dir in dirs {
        let data = Dataset::load(&dir)?;
        let target = if single { out.to_path_buf() } else { out.join(dir.file_name().context("scene directory has no name")?) };
        fs::create_dir_all(&target).with_context(|| format!("creating {}", target.display()))?;
        let cams: Vec<(usize, &Camera)> = data.views.iter().map(|v| (v.view_id, &v.camera)).collect();
        let pairs = nearest_pairs(&cams, cfg.infer.num_sources);
        for pair in &pairs {
            let mut views = vec![data.view(pair.reference)?.view::<T>()];
            for &id in &pair.sources {
                views.push(data.view(id)?.view());
            }
            let pred = model.predict(&store, &views)?;
            let id = pair.reference;
            write_pfm(&depth_path(&target, id), pred.depth())?;
            write_pfm(&confidence_path(&target, id), &pred.confidence)?;
            write_camera(&camera_path(&target, id), &data.view(id)?.camera)?;
            write_ppm(&image_path(&target, id), &data.view(id)?.image)?;
        }
        write_index(&index_path(&target), &pairs)?;
        println!("{}: {} depth maps", target.display(), pairs.len());
    }
    Ok(())
}

fn fuse_cmd(depths: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut cloud = PointCloud::default();
    for dir in Dataset::scene_dirs(depths)? {
        let data = Dataset::load(&dir)?;
        let views = data.views.iter().map(DepthView::from_stored).collect::<mvstr_core::Result<Vec<_>>>()?;
        let (part, stats) = fuse(&views, &data.pairs, &cfg.fusion)?;
        for s in &stats {
            println!(
                "{} view {}: {} estimated, {} photometric, {} geometric, {} fused",
                dir.display(),
                s.view_id,
                s.estimated,
                s.photometric,
                s.geometric,
                s.fused
            );
        }
        let colors = match (cloud.colors.take(), part.colors) {
            (Some(mut a), Some(b)) if cloud.points.len() == a.len() => {
                a.extend(b);
                Some(a)
            }
            (None, Some(b)) if cloud.points.is_empty() => Some(b),
            _ => None,
        };
        cloud.points.extend(part.points);
        cloud.colors = colors;
    }
    cloud.save(out)?;
    println!("{} points -> {}", cloud.len(), out.display());
    Ok(())
}

fn eval(recon: &Path, gt: &Path, outlier_dist: Option<f64>) -> Result<()> {
    let recon = PointCloud::load(recon)?;
    let gt = PointCloud::load(gt)?;
    let dist = match outlier_dist {
        Some(d) => d,
        None if gt.is_empty() => bail!("ground-truth cloud is empty"),
        None => default_outlier_dist(&gt),
    };
    let s = accuracy_completeness(&recon, &gt, dist)?;
    println!("accuracy {}", s.accuracy);
    println!("completeness {}", s.completeness);
    println!("overall {}", s.overall);
    Ok(())
}

fn gradcheck(tol: Option<f64>, filter: Option<String>) -> Result<()> {
    let reports = run_suite(&SuiteOptions { tol, filter })?;
    if reports.is_empty() {
        bail!("no gradient check matches the filter");
    }
    for r in &reports {
        println!("{}", r.summary());
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Numerical(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}
