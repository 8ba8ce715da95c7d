//! `s2r`: generate datasets, train, evaluate and sweep deployment noise.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error. Failures print one
//! line `error: <kind>: <message>` to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2r_core::dataset::{generate_dataset, Dataset, GenConfig, Split};
use s2r_core::evalkit::{evaluate, sweep, sweep_table, NoiseGrid};
use s2r_core::geometry::NoiseSpec;
use s2r_core::scenario::{DomainProfile, SceneConfig};
use s2r_core::trainer::{fit, log_tsv};
use s2r_core::{Error, Model32, Result, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "s2r", version, about = "Cooperative V2V LiDAR detection with sim-to-real adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a TSV log.
    Train(TrainArgs),
    /// Evaluate AP@0.5 and AP@0.7 under optional deployment noise.
    Eval(EvalArgs),
    /// Evaluate every point of a noise grid and write a TSV table.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Sim,
    Real,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    SourceLabeled,
    TargetUnlabeled,
    Test,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene configuration (TOML).
    #[arg(long, env = "S2R_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the profile in the scene configuration.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Defaults to target-unlabeled for the real profile, source-labeled otherwise.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Ground-truth half extents `x,y` in meters.
    #[arg(long, value_parser = parse_range, default_value = "40,20")]
    range: [f64; 2],
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training configuration (flat TOML).
    #[arg(long, env = "S2R_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Final checkpoint; the log goes to `<out>.log.tsv`.
    #[arg(long)]
    out: PathBuf,
    /// Train on detection loss only.
    #[arg(long)]
    no_afa: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `sigma_pos,sigma_head,latency` in meters, degrees, seconds.
    #[arg(long, value_parser = parse_noise)]
    noise: Option<NoiseSpec>,
    /// Evaluation half extents `x,y`; defaults to the dataset's range.
    #[arg(long, value_parser = parse_range)]
    range: Option<[f64; 2]>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Results row file; defaults to `<ckpt>.eval.tsv`.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Axes such as `pos=0,0.2,0.4;head=0,0.2;lat=0,0.1`.
    #[arg(long, value_parser = parse_grid)]
    grid: NoiseGrid,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_range)]
    range: Option<[f64; 2]>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_noise(s: &str) -> std::result::Result<NoiseSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<NoiseGrid, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_range(s: &str) -> std::result::Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad range value `{p}`")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y] if x > 0.0 && y > 0.0 => Ok([x, y]),
        _ => Err(format!("range must be two positive numbers `x,y`, got `{s}`")),
    }
}

fn read_scene(path: &Path) -> Result<SceneConfig> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut scene = match &a.config {
        Some(p) => read_scene(p)?,
        None => SceneConfig::default(),
    };
    if let Some(p) = a.profile {
        scene.profile = match p {
            Profile::Sim => DomainProfile::sim(),
            Profile::Real => DomainProfile::real(),
        };
    }
    let split = match a.split {
        Some(SplitArg::SourceLabeled) => Split::SourceLabeled,
        Some(SplitArg::TargetUnlabeled) => Split::TargetUnlabeled,
        Some(SplitArg::Test) => Split::Test,
        None if scene.profile.name == "real" => Split::TargetUnlabeled,
        None => Split::SourceLabeled,
    };
    let cfg = GenConfig { scene, seed: a.seed, frames: a.frames, split, range: a.range };
    let m = generate_dataset(&a.out, &cfg)?;
    println!("wrote {} frames from {} scenarios to {}", m.frames.len(), m.scenario_seeds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if a.no_afa {
        cfg.w1 = 1.0;
        cfg.w2 = 0.0;
    }
    if cfg.afa_enabled() && a.target.is_none() {
        return Err(Error::Config("adaptation is enabled; pass --target DIR or --no-afa".into()));
    }
    let source = Dataset::open(&a.source)?;
    let target = match &a.target {
        Some(p) if cfg.afa_enabled() => Some(Dataset::open(p)?),
        _ => None,
    };
    let ckpt_dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(ckpt_dir)?;
    let out = fit(&cfg, &source, target.as_ref(), Some(ckpt_dir))?;
    out.model.save(&a.out)?;
    write_file(&with_suffix(&a.out, ".log.tsv"), &log_tsv(&out.log))?;
    if let Some(last) = out.log.last() {
        println!("trained {} steps, final l_det {:.6}", out.log.len(), last.metrics.l_det);
    }
    println!("checkpoint {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = Model32::load(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let noise = a.noise.unwrap_or(NoiseSpec::PERFECT);
    let r = evaluate(&model, &data, &noise, a.seed, a.range)?;
    println!("AP@0.5 {:.6}", r.ap50);
    println!("AP@0.7 {:.6}", r.ap70);
    let row = s2r_core::evalkit::SweepRow {
        sigma_pos: noise.sigma_pos,
        sigma_head: noise.sigma_head,
        latency: noise.latency,
        ap50: r.ap50,
        ap70: r.ap70,
    };
    let path = a.results.unwrap_or_else(|| with_suffix(&a.ckpt, ".eval.tsv"));
    write_file(&path, &sweep_table(&[row]))
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let model = Model32::load(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let rows = sweep(&model, &data, &a.grid, a.seed, a.range)?;
    write_file(&a.out, &sweep_table(&rows))?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
