//! `densim` command-line tool.
//!
//! Settings come from, in increasing precedence: built-in defaults, the TOML
//! file given by `--config`, then command-line flags (`--seed`, `--out`,
//! `--data`).
//!
//! On failure a single JSON line `{"error": <kind>, "message": <text>}` is
//! written to stderr. Exit code 2 means a configuration or usage error, 3 any
//! other runtime error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use densim_core::checkpoint;
use densim_core::config::Config;
use densim_core::density::{density_count, load_annotations, points_to_density, DatasetRecord, Point, PointAnnotation, Split};
use densim_core::error::{Error, Result};
use densim_core::evaluation::{evaluate, infer, run_generalization_experiment, Variant};
use densim_core::network::Model;
use densim_core::raster::Raster;
use densim_core::seed::derive_seed;
use densim_core::simulation::{generate_gt, shift_overlay_points, simulate_high_density, SimConfig};
use densim_core::synth::{synthesize_split, write_dataset, Sample};
use densim_core::training::train_full;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "densim", version, about = "Low-to-high density crowd counting toolkit")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overrides `seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overrides `paths.out_dir` (for `synth`, the dataset directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train (low density) and test (high density) dataset.
    Synth,
    /// Apply density simulation to one annotated image.
    Simulate(SimulateArgs),
    /// Train the low-density branch, then the high-density branch.
    Train(DataArgs),
    /// Evaluate a checkpoint on the test split, or run the seed-averaged experiment.
    Eval(EvalArgs),
    /// Predict the density map and count of one image.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    image: PathBuf,
    /// Either a dataset `annotations.json` or `{"points": [[x, y], ...]}`.
    #[arg(long)]
    annotation: PathBuf,
    /// Shift in pixels, overrides `sim.shift`.
    #[arg(long, allow_hyphen_values = true)]
    shift: Option<i64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory, overrides `paths.data_dir`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Train and evaluate every variant on freshly synthesized data instead.
    #[arg(long)]
    experiment: bool,
    /// Seeds averaged by `--experiment`.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", &e.to_string(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if matches!(e, Error::Config(_) | Error::UnknownStrategy(_)) { 2 } else { 3 };
            fail(e.kind(), &e.to_string(), code)
        }
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let message = message.trim().replace('\n', " ");
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    match cli.command {
        Command::Synth => {
            let dir = cli.out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            cmd_synth(&cfg, &dir)
        }
        Command::Simulate(a) => cmd_simulate(&cfg, &a),
        Command::Train(a) => {
            apply_data(&mut cfg, &a);
            cmd_train(&cfg)
        }
        Command::Eval(a) => {
            apply_data(&mut cfg, &a.data);
            if a.experiment {
                cmd_experiment(&cfg, a.seeds)
            } else {
                cmd_eval(&cfg, &a.checkpoint.unwrap_or_else(|| cfg.checkpoint_path()))
            }
        }
        Command::Infer(a) => cmd_infer(&cfg, &a.image, &a.checkpoint.unwrap_or_else(|| cfg.checkpoint_path())),
    }
}

fn apply_data(cfg: &mut Config, a: &DataArgs) {
    if let Some(d) = &a.data {
        cfg.paths.data_dir = d.clone();
    }
}

fn mean_count(samples: &[Sample]) -> f64 {
    samples.iter().map(|s| s.annotation.len() as f64).sum::<f64>() / samples.len().max(1) as f64
}

fn cmd_synth(cfg: &Config, dir: &Path) -> Result<()> {
    let train = synthesize_split(&cfg.synth.train, cfg.synth.n_train, derive_seed(cfg.seed, "data", 0), "train")?;
    let test = synthesize_split(&cfg.synth.test, cfg.synth.n_test, derive_seed(cfg.seed, "data", 1), "test")?;
    write_dataset(dir, &train, &test)?;
    println!(
        "wrote {} train (mean count {:.2}) and {} test (mean count {:.2}) images to {}",
        train.len(),
        mean_count(&train),
        test.len(),
        mean_count(&test),
        dir.display()
    );
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Points for `image` from either annotation layout.
fn read_points(annotation: &Path, image: &Path) -> Result<PointAnnotation> {
    if !annotation.exists() {
        return Err(Error::MissingFile(annotation.to_path_buf()));
    }
    let root: Value = serde_json::from_str(&fs::read_to_string(annotation)?)?;
    if root.get("images").is_some() {
        let records = load_annotations(annotation)?;
        let name = image.file_name();
        return records
            .into_iter()
            .find(|r| r.image_path.file_name() == name)
            .map(|r| r.annotation)
            .ok_or_else(|| Error::Config(format!("{} has no entry for {}", annotation.display(), image.display())));
    }
    let raw = root
        .get("points")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema { field: "points".into(), message: "expected an array".into() })?;
    raw.iter()
        .enumerate()
        .map(|(j, p)| match p.as_array().map(|a| a.as_slice()) {
            Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok(Point::new(x, y)),
                _ => Err(Error::Schema { field: format!("points[{j}]"), message: "expected numbers".into() }),
            },
            _ => Err(Error::Schema { field: format!("points[{j}]"), message: "expected [x, y]".into() }),
        })
        .collect::<Result<Vec<_>>>()
        .map(PointAnnotation::new)
}

fn points_json(ann: &PointAnnotation, height: usize, width: usize) -> Value {
    let points: Vec<[f64; 2]> = ann.points.iter().map(|p| [p.x, p.y]).collect();
    json!({ "height": height, "width": width, "points": points })
}

fn cmd_simulate(cfg: &Config, a: &SimulateArgs) -> Result<()> {
    let sim = SimConfig::new(a.shift.unwrap_or(cfg.sim.shift), cfg.sim.lambda)?;
    if !a.image.exists() {
        return Err(Error::MissingFile(a.image.clone()));
    }
    let img = Raster::read_png(&a.image)?;
    let ann = read_points(&a.annotation, &a.image)?;
    ann.check_bounds(&a.image.display().to_string(), img.height(), img.width())?;
    let gt = points_to_density(&ann, img.height(), img.width(), cfg.sim.sigma)?;
    let i_sim = simulate_high_density(&img, &sim)?;
    let gt_sim = generate_gt(&gt, sim.shift)?;
    let pts = shift_overlay_points(&ann, sim.shift)?;

    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    let stem = file_stem(&a.image);
    i_sim.write_png(&out.join(format!("{stem}_sim.png")))?;
    gt_sim.write_density(&out.join(format!("{stem}_gt_sim.l2hd")))?;
    let body = serde_json::to_string_pretty(&points_json(&pts, i_sim.height(), i_sim.width()))?;
    fs::write(out.join(format!("{stem}_points_sim.json")), body + "\n")?;
    println!(
        "count_before={} count_after={} points_before={} points_after={} width={}",
        density_count(&gt),
        density_count(&gt_sim),
        ann.len(),
        pts.len(),
        i_sim.width()
    );
    Ok(())
}

fn load_split(cfg: &Config, split: Split) -> Result<Vec<Sample>> {
    let records: Vec<DatasetRecord> = load_annotations(&cfg.paths.data_dir.join("annotations.json"))?;
    records
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| Ok(Sample { image: r.load_image()?, annotation: r.annotation }))
        .collect()
}

fn cmd_train(cfg: &Config) -> Result<()> {
    let samples = load_split(cfg, Split::Train)?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let model: Model<f32> = train_full(&samples, &cfg.train_settings(), &mut log)?;
    log.flush()?;
    let path = cfg.checkpoint_path();
    checkpoint::save(&model, cfg.seed, &path)?;
    println!("trained on {} images, checkpoint {}", samples.len(), path.display());
    Ok(())
}

fn cmd_eval(cfg: &Config, ckpt: &Path) -> Result<()> {
    let (model, _) = checkpoint::load::<f32>(ckpt)?;
    let samples = load_split(cfg, Split::Test)?;
    let result = evaluate(&model, &samples)?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    println!("mae={} mse={} N={}", result.mae, result.mse, result.n);
    Ok(())
}

fn cmd_experiment(cfg: &Config, seeds: Vec<u64>) -> Result<()> {
    let variants = Variant::ablation_grid();
    let exp = cfg.experiment(seeds, variants.clone());
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(fs::File::create(out.join("experiment_log.jsonl"))?);
    let report = run_generalization_experiment(&exp, &mut log)?;
    log.flush()?;
    fs::write(out.join("report.json"), report.to_json()? + "\n")?;
    let table = report.table(&variants);
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_infer(cfg: &Config, image: &Path, ckpt: &Path) -> Result<()> {
    let (model, _) = checkpoint::load::<f32>(ckpt)?;
    if !image.exists() {
        return Err(Error::MissingFile(image.to_path_buf()));
    }
    let img = Raster::read_png(image)?;
    let (map, count) = infer(&img, &model)?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    let stem = file_stem(image);
    map.write_density(&out.join(format!("{stem}_density.l2hd")))?;
    map.heat_render().write_png(&out.join(format!("{stem}_heat.png")))?;
    println!("count={count}");
    Ok(())
}
