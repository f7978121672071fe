//! The `aggnet` binary: dataset synthesis, training, evaluation, inference,
//! gradient checking, and scheme ablations.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data or I/O, 3 numerical
//! failure. Every command prints its fully resolved configuration first, so a
//! run can be reproduced from its own output.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::{load_checkpoint_file, AggNet, Batch, DepthImage, Scheme};
use crate::nn::Session;
use crate::synth::{dataset, netpbm};
use crate::tensor::{precision_name, Mode, Shape, Tensor};
use crate::train::{carve_validation, evaluate_model, run_ablation, train, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "aggnet",
    about = "Depth image completion with attention-guided gated convolutions",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic RGB-D split (PPM color, 16-bit PGM depth).
    Synth {
        /// key=value configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root; samples go to {out}/{split}/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value = "train")]
        split: String,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a synthesized dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (containing train/ and optionally val/) or a split dir.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for best.ckpt and train.log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: prints one metric line.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Split directory (or a root containing test/).
        #[arg(long)]
        data: PathBuf,
    },
    /// Complete one raw depth image; writes a 16-bit PGM.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every layer block; nonzero exit on failure.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum allowed relative error (default depends on build precision).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train several schemes under identical budgets; prints the median table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated scheme letters, e.g. "A,B,C,G".
        #[arg(long, default_value = "A,B,C,D,E,G")]
        schemes: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Dataset root containing train/ and test/ splits.
        #[arg(long)]
        data: PathBuf,
        /// Optional directory for ablation.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Parse { .. } | Error::Shape(_) | Error::NoValidPixels => EXIT_DATA,
        Error::Numeric(_) | Error::Graph(_) => EXIT_NUMERIC,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn echo_config(cfg: &RunConfig) {
    println!("# resolved configuration ({} build)", precision_name());
    print!("{}", cfg.echo());
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            config,
            out,
            count,
            split,
            seed,
        } => cmd_synth(&config, &out, count, &split, seed),
        Cmd::Train {
            config,
            data,
            out,
            epochs,
            seed,
        } => cmd_train(&config, &data, &out, epochs, seed),
        Cmd::Eval { ckpt, data } => cmd_eval(&ckpt, &data),
        Cmd::Infer { ckpt, rgb, raw, out } => cmd_infer(&ckpt, &rgb, &raw, &out),
        Cmd::Gradcheck { config, tol, seed } => cmd_gradcheck(&config, tol, seed),
        Cmd::Ablate {
            config,
            schemes,
            seeds,
            data,
            out,
            epochs,
        } => cmd_ablate(&config, &schemes, &seeds, &data, &out, epochs),
    }
}

fn cmd_synth(config: &Option<PathBuf>, out: &Path, count: usize, split: &str, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    echo_config(&cfg);
    let spec = cfg.scene_spec();
    let stats = dataset::synth_split(out, split, &spec, count)?;
    println!(
        "synth: wrote {} samples to {} mean_hole_fraction={:.4} target={:.4}",
        stats.count,
        out.join(split).display(),
        stats.mean_hole_fraction,
        spec.hole_area
    );
    Ok(())
}

/// Resolve a dataset argument into (train split dir, optional val split dir).
fn resolve_train_dirs(data: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    let train_dir = if data.join("train").is_dir() {
        data.join("train")
    } else {
        data.to_path_buf()
    };
    let val_dir = data.join("val").is_dir().then(|| data.join("val"));
    Ok((train_dir, val_dir))
}

fn check_dims(cfg: &RunConfig, samples: &[crate::synth::RgbdSample]) -> Result<()> {
    if let Some(s) = samples.first() {
        let (h, w) = s.dims();
        if (h, w) != (cfg.height, cfg.width) {
            return Err(Error::config(format!(
                "dataset samples are {h}x{w} but the configuration says {}x{}; set height/width",
                cfg.height, cfg.width
            )));
        }
    }
    Ok(())
}

fn cmd_train(config: &Option<PathBuf>, data: &Path, out: &Path, epochs: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    echo_config(&cfg);

    let (train_dir, val_dir) = resolve_train_dirs(data)?;
    let train_samples = dataset::load_split(&train_dir)?;
    check_dims(&cfg, &train_samples)?;
    let val_samples = match &val_dir {
        Some(d) => Some(dataset::load_split(d)?),
        None => None,
    };

    let net = AggNet::new(cfg.model_config())?;
    let params = net.init_params(cfg.seed)?;
    let opts = TrainOptions {
        epochs,
        batch: cfg.batch,
        augment: cfg.augment,
        min_crop_scale: cfg.min_crop_scale,
        out_dir: Some(out.to_path_buf()),
        verbose: true,
        eval_every: cfg.eval_every,
    };

    let outcome = match &val_samples {
        Some(vs) => {
            let tr: Vec<_> = train_samples.iter().collect();
            let va: Vec<_> = vs.iter().collect();
            train(&net, params, &tr, &va, cfg.seed, cfg.sgd_config(), &opts)?
        }
        None => {
            let (tr, va) = carve_validation(&train_samples);
            train(&net, params, &tr, &va, cfg.seed, cfg.sgd_config(), &opts)?
        }
    };

    if let Some(m) = &outcome.val_metrics {
        println!("final validation: {}", m.line());
    }
    println!("best checkpoint: {}", out.join("best.ckpt").display());
    Ok(())
}

/// A split directory: either the given path or its test/ subdirectory.
fn resolve_eval_dir(data: &Path) -> PathBuf {
    if data.join("test").is_dir() {
        data.join("test")
    } else {
        data.to_path_buf()
    }
}

fn cmd_eval(ckpt: &Path, data: &Path) -> Result<()> {
    let (net, mut params) = load_checkpoint_file(ckpt)?;
    println!(
        "# checkpoint config: {}",
        serde_json::to_string(net.config()).unwrap_or_default()
    );
    let dir = resolve_eval_dir(data);
    let samples = dataset::load_split(&dir)?;
    let (h, w) = samples[0].dims();
    if (h, w) != (net.config().height, net.config().width) {
        return Err(Error::shape(format!(
            "checkpoint expects {}x{} inputs but dataset is {h}x{w}",
            net.config().height,
            net.config().width
        )));
    }
    let refs: Vec<_> = samples.iter().collect();
    let (_, report) = evaluate_model(&net, &mut params, &refs, 8)?;
    println!("{}", report.line());
    Ok(())
}

fn cmd_infer(ckpt: &Path, rgb_path: &Path, raw_path: &Path, out: &Path) -> Result<()> {
    let (net, mut params) = load_checkpoint_file(ckpt)?;
    println!(
        "# checkpoint config: {}",
        serde_json::to_string(net.config()).unwrap_or_default()
    );
    let rgb = netpbm::read_ppm8_file(rgb_path)?;
    let raw = netpbm::read_pgm16_file(raw_path)?;
    if rgb.width != raw.width || rgb.height != raw.height {
        return Err(Error::shape(format!(
            "rgb is {}x{} but raw depth is {}x{}",
            rgb.width, rgb.height, raw.width, raw.height
        )));
    }
    let (cfg_h, cfg_w) = (net.config().height, net.config().width);
    if (raw.height, raw.width) != (cfg_h, cfg_w) {
        return Err(Error::shape(format!(
            "checkpoint expects {cfg_h}x{cfg_w} inputs but images are {}x{}",
            raw.height, raw.width
        )));
    }

    let depth = DepthImage::from_values(raw.height, raw.width, raw.meters.clone())?;
    let rgb_t = Tensor::new(Shape::new(1, 3, raw.height, raw.width), rgb.rgb)?;
    let batch = Batch::single(&depth, &rgb_t)?;
    let mut s = Session::new(Mode::Eval);
    let pred = net.forward(&mut s, &mut params, &batch)?;
    let pv = s.graph.value(pred);

    // Completion keeps measured pixels: prediction only fills the holes.
    let completed: Vec<_> = depth
        .values()
        .iter()
        .zip(pv.data())
        .map(|(&r, &p)| if r > 0.0 { r } else { p.max(0.0) })
        .collect();

    let mut buf = Vec::new();
    netpbm::write_pgm16(&mut buf, raw.width, raw.height, &completed, &[])?;
    std::fs::write(out, buf).map_err(|e| Error::io(out.display().to_string(), e))?;
    println!("infer: wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(config: &Option<PathBuf>, tol: Option<f64>, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    echo_config(&cfg);
    let tol = tol.unwrap_or_else(gradcheck::block_tol);
    println!("# gradcheck tolerance {tol:.1e} (precision {})", precision_name());
    if !cfg!(feature = "f64") {
        println!("# single precision resolves only gross gradient errors; build with --features f64 for the 1e-4 verification level");
    }
    let checks = gradcheck::standard_checks(seed)?;
    let mut failed = Vec::new();
    for (name, report) in &checks {
        let err = report.max_rel_err();
        let coords: usize = report.params.iter().map(|p| p.coords).sum();
        println!("block={name} max_rel_err={err:.3e} coords={coords}");
        if err >= tol {
            failed.push(format!("{name} ({err:.3e})"));
        }
    }
    if !failed.is_empty() {
        return Err(Error::numeric(format!(
            "gradient checks exceeded tolerance {tol:.1e}: {}",
            failed.join(", ")
        )));
    }
    println!("gradcheck: all {} blocks within {tol:.1e}", checks.len());
    Ok(())
}

fn cmd_ablate(
    config: &Option<PathBuf>,
    schemes: &str,
    seeds: &str,
    data: &Path,
    out: &Option<PathBuf>,
    epochs: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    echo_config(&cfg);

    let schemes: Vec<Scheme> = schemes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("bad seed '{s}'")))
        })
        .collect::<Result<_>>()?;

    let train_dir = data.join("train");
    let test_dir = data.join("test");
    if !train_dir.is_dir() || !test_dir.is_dir() {
        return Err(Error::config(format!(
            "ablation needs {}/train and {}/test",
            data.display(),
            data.display()
        )));
    }
    let train_samples = dataset::load_split(&train_dir)?;
    check_dims(&cfg, &train_samples)?;
    let test_samples = dataset::load_split(&test_dir)?;

    let opts = TrainOptions {
        epochs,
        batch: cfg.batch,
        augment: cfg.augment,
        min_crop_scale: cfg.min_crop_scale,
        out_dir: None,
        verbose: false,
        eval_every: cfg.eval_every,
    };
    let table = run_ablation(
        &cfg.model_config(),
        &schemes,
        &train_samples,
        &test_samples,
        &seeds,
        cfg.sgd_config(),
        &opts,
        true,
    )?;
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("ablation.txt");
        std::fs::write(&path, table.to_string())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        println!("ablate: wrote {}", path.display());
    }
    Ok(())
}
