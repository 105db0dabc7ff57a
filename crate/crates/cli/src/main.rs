use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use grformer::attention::PositionBiasParams;
use grformer::complexity::{count_macs_with, named_variant, reduction_summary, MacConvention};
use grformer::config::ModelConfig;
use grformer::imaging::{psnr, read_png, rgb_to_y, ssim, write_png, ImageU8};
use grformer::network::{init_parameters, super_resolve};
use grformer::training::{compare_with_bicubic, loss_csv, synthetic_image, train_toy, TrainConfig};
use grformer::verification::{curve_csv, rpb_curve_export, run_suite, table_curve, Mutation, OracleReport, Suite};
use grformer::{weights, Precision, Rng, Scalar};

#[derive(Parser)]
#[command(name = "grformer", version, about = "Grouped residual self-attention super-resolution toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Numeric precision.
    #[arg(long, global = true, env = "GRF_PRECISION", default_value = "f32")]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and MAC accounting.
    Count(CountArgs),
    /// Run the verification oracles.
    Verify(VerifyArgs),
    /// Super-resolve a PNG with stored weights.
    Sr(SrArgs),
    /// Overfit a small model to one image.
    TrainToy(TrainArgs),
    /// Y-channel PSNR and SSIM between two PNGs.
    Eval(EvalArgs),
    /// Export position-bias curves as CSV.
    RpbCurve(CurveArgs),
}

#[derive(Args)]
struct CountArgs {
    /// Model configuration file (`name = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    /// Upscaled output resolution, `WIDTHxHEIGHT`.
    #[arg(long, default_value = "1280x720", value_parser = parse_resolution)]
    resolution: (usize, usize),
    /// grsa, grsa-rpb, sa-ungrouped, sa-ungrouped-residual, sa-grouped-no-residual, sa-with-rpb.
    #[arg(long)]
    variant: Option<String>,
    /// layers (default) or full.
    #[arg(long, default_value = "layers")]
    convention: String,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    QkEquivalence,
    Gradcheck,
    RpbProperties,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    GrlResidual,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, required = true, num_args = 1..)]
    suite: Vec<SuiteArg>,
    /// Inject a known defect; the oracles are expected to fail.
    #[arg(long, value_enum)]
    mutate: Option<MutationArg>,
    /// Write reports as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SrArgs {
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Must equal the configuration stored with the weights.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Must equal the scale stored with the weights.
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// HR image; a synthetic texture is used when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Side of the top-left HR crop trained on.
    #[arg(long, default_value_t = 48)]
    crop: usize,
    /// Model configuration; the tiny configuration when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    iters: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    /// Output directory for weights, loss curve and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    a: PathBuf,
    b: PathBuf,
    /// Border removed on every side before measuring.
    #[arg(long, default_value_t = 0)]
    crop: usize,
}

#[derive(Args)]
struct CurveArgs {
    /// Weights to read the bias from; fresh parameters when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Configuration for fresh parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    group: usize,
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Offset-table row; the `ΔY = 0` row when absent.
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    seed: u64,
    precision: String,
    outputs: Vec<String>,
    version: String,
}

/// Failures that map to exit status 1 without being errors.
struct Failed;

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("`{s}` is not WIDTHxHEIGHT");
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    match (w.trim().parse(), h.trim().parse()) {
        (Ok(w), Ok(h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(bad()),
    }
}

fn load_config(path: Option<&Path>, fallback: ModelConfig) -> anyhow::Result<ModelConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ModelConfig::parse(&text)?)
        }
        None => Ok(fallback),
    }
}

fn write_manifest(command: &str, common: &Common, config: Option<&Path>, outputs: &[&Path], at: &Path) -> anyhow::Result<()> {
    let m = RunManifest {
        command: command.into(),
        config_path: config.map(|p| p.display().to_string()),
        seed: common.seed,
        precision: common.precision.to_string(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    std::fs::write(at, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", at.display()))?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    path.with_file_name(name)
}

fn cmd_count(args: &CountArgs, common: &Common) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref(), ModelConfig::default())?;
    if let Some(s) = args.scale {
        cfg.scale = s;
    }
    if let Some(v) = &args.variant {
        cfg.attention = named_variant(v)?;
    }
    cfg.validate()?;
    let convention: MacConvention = args.convention.parse()?;
    let report = count_macs_with(&cfg, args.resolution, cfg.attention, convention);
    print!("{}", report.to_table());
    let red = reduction_summary(&cfg);
    println!(
        "reduction vs ungrouped attention with table bias: params {:.1}%, MACs {:.1}%",
        100.0 * red.param_reduction,
        100.0 * red.mac_reduction
    );
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        write_manifest("count", common, args.config.as_deref(), &[path], &sidecar(path))?;
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs, common: &Common) -> anyhow::Result<Result<(), Failed>> {
    let mutation = args.mutate.map(|MutationArg::GrlResidual| Mutation::GrlResidual);
    let mut reports: Vec<OracleReport> = Vec::new();
    let mut suites: Vec<Suite> = args
        .suite
        .iter()
        .map(|s| match s {
            SuiteArg::QkEquivalence => Suite::QkEquivalence,
            SuiteArg::Gradcheck => Suite::Gradcheck,
            SuiteArg::RpbProperties => Suite::RpbProperties,
            SuiteArg::All => Suite::All,
        })
        .collect();
    if suites.contains(&Suite::All) {
        suites = vec![Suite::All];
    }
    suites.dedup();
    for s in suites {
        reports.extend(run_suite(s, common.seed, mutation)?);
    }
    for r in &reports {
        println!("{r}");
    }
    if let Some(path) = &args.report {
        let mut csv = String::from(OracleReport::csv_header());
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        write_manifest("verify", common, None, &[path], &sidecar(path))?;
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} of {} oracles passed", reports.len() - failed, reports.len());
    Ok(if failed == 0 { Ok(()) } else { Err(Failed) })
}

fn cmd_sr<T: Scalar>(args: &SrArgs, common: &Common) -> anyhow::Result<()> {
    let (stored, params) = weights::load::<T>(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    if let Some(path) = &args.config {
        let requested = load_config(Some(path), stored.clone())?;
        weights::ensure_config(&requested, &stored)?;
    }
    if let Some(s) = args.scale {
        if s != stored.scale {
            bail!(grformer::Error::Contract(format!("requested scale {s}, weights are trained for x{}", stored.scale)));
        }
    }
    if stored.c_in != 3 || stored.c_out != 3 {
        bail!(grformer::Error::Contract("sr needs a model with 3 input and 3 output channels".into()));
    }
    let img = read_png(&args.input)?;
    let out = super_resolve(&params, &stored, &img.to_tensor::<T>())?;
    write_png(&args.output, &ImageU8::from_tensor(&out)?)?;
    write_manifest("sr", common, args.config.as_deref(), &[&args.output], &sidecar(&args.output))?;
    println!("wrote {} ({}x{})", args.output.display(), out.shape()[2], out.shape()[1]);
    Ok(())
}

fn crop_image(img: &ImageU8, side: usize) -> ImageU8 {
    let (w, h) = (img.width.min(side), img.height.min(side));
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = y * img.width * 3;
        data.extend_from_slice(&img.data[row..row + w * 3]);
    }
    ImageU8 { width: w, height: h, data }
}

fn cmd_train<T: Scalar>(args: &TrainArgs, common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), ModelConfig::tiny())?;
    let hr = match &args.input {
        Some(p) => crop_image(&read_png(p)?, args.crop),
        None => synthetic_image(args.crop, args.crop, common.seed),
    };
    let mut tcfg = TrainConfig::toy(args.iters);
    tcfg.seed = common.seed;
    tcfg.augment = !args.no_augment;
    if let Some(lr) = args.lr {
        tcfg.lr = lr;
    }
    let start = std::time::Instant::now();
    let outcome = train_toy::<T>(&cfg, &tcfg, &hr)?;
    let elapsed = start.elapsed();

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let w_path = args.out.join("weights.grfw");
    let l_path = args.out.join("loss.csv");
    let hr_path = args.out.join("hr.png");
    weights::save(&w_path, &cfg, &outcome.params)?;
    std::fs::write(&l_path, loss_csv(&outcome.losses))?;
    write_png(&hr_path, &hr)?;
    write_manifest(
        "train-toy",
        common,
        args.config.as_deref(),
        &[&w_path, &l_path, &hr_path],
        &args.out.join("run.json"),
    )?;

    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("loss {first:.5} -> {last:.5} (ratio {:.3}) over {} iterations in {elapsed:.1?}", last / first, outcome.losses.len());
    } else {
        println!("no iterations run; weights are the initial parameters");
    }
    let cmp = compare_with_bicubic(&outcome.params, &cfg, &hr)?;
    println!("Y-PSNR model {:.3} dB, bicubic {:.3} dB", cmp.model_psnr, cmp.bicubic_psnr);
    Ok(())
}

fn cmd_eval<T: Scalar>(args: &EvalArgs) -> anyhow::Result<()> {
    let a = rgb_to_y::<T>(&read_png(&args.a)?);
    let b = rgb_to_y::<T>(&read_png(&args.b)?);
    let p = psnr(&a, &b, args.crop)?;
    let s = ssim(&a, &b, args.crop)?;
    if p.is_infinite() {
        println!("PSNR inf");
    } else {
        println!("PSNR {p:.4} dB");
    }
    println!("SSIM {s:.6}");
    Ok(())
}

fn cmd_curve(args: &CurveArgs, common: &Common) -> anyhow::Result<()> {
    let (cfg, params) = match &args.weights {
        Some(p) => weights::load::<f64>(p)?,
        None => {
            let cfg = load_config(args.config.as_deref(), ModelConfig::default())?;
            let params = init_parameters::<f64>(&cfg, &mut Rng::new(common.seed).split("init"));
            (cfg, params)
        }
    };
    let block = params
        .groups
        .get(args.group)
        .and_then(|g| g.blocks.get(args.block))
        .ok_or_else(|| grformer::Error::Contract(format!("no block {}.{}", args.group, args.block)))?;
    let row = args.row.unwrap_or(cfg.window.h - 1);
    let curves = match &block.grsa.bias {
        PositionBiasParams::EsRpb(p) => rpb_curve_export(p, cfg.window, row)?,
        PositionBiasParams::Table(t) => table_curve(t, cfg.window, row)?,
    };
    let csv = curve_csv(&curves);
    match &args.output {
        Some(path) => {
            std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            write_manifest("rpb-curve", common, args.config.as_deref(), &[path], &sidecar(path))?;
            println!("wrote {} curves of length {} to {}", curves.len(), curves[0].len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<Result<(), Failed>> {
    let c = &cli.common;
    match (&cli.command, c.precision) {
        (Command::Count(a), _) => cmd_count(a, c)?,
        (Command::Verify(a), _) => return cmd_verify(a, c),
        (Command::Sr(a), Precision::F32) => cmd_sr::<f32>(a, c)?,
        (Command::Sr(a), Precision::F64) => cmd_sr::<f64>(a, c)?,
        (Command::TrainToy(a), Precision::F32) => cmd_train::<f32>(a, c)?,
        (Command::TrainToy(a), Precision::F64) => cmd_train::<f64>(a, c)?,
        (Command::Eval(a), Precision::F32) => cmd_eval::<f32>(a)?,
        (Command::Eval(a), Precision::F64) => cmd_eval::<f64>(a)?,
        (Command::RpbCurve(a), _) => cmd_curve(a, c)?,
    }
    Ok(Ok(()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<grformer::Error>() {
            return match e {
                grformer::Error::Io(_) | grformer::Error::Image(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
