use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use wavefx_core::config::RunConfig;
use wavefx_core::engine;
use wavefx_core::error::{Error, ErrorClass};
use wavefx_core::ledger::PlConvention;
use wavefx_core::market_data::{generate, load_history, SyntheticKind, SyntheticSpec};
use wavefx_core::report;
use wavefx_core::sde::{estimate_fg, stationary_density, FitConfig};
use wavefx_core::wavelet::{
    coefficients_csv, decompose, increments, CoeffSeries, FamilyName, WaveletFamily,
};

#[derive(Parser)]
#[command(
    name = "wavefx",
    version,
    about = "Stochastic-wavelet trading engine, offline"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic quote series as CSV.
    Synth(SynthArgs),
    /// Fit drift and diffusion of wavelet coefficients and write the stationary density.
    Density(DensityArgs),
    /// Run the configured backtest.
    Backtest,
    /// Summarize a statement file.
    Report(ReportArgs),
    /// Dump the wavelet coefficients of a quote file.
    Coeffs(CoeffsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: SyntheticKind,
    #[arg(long, default_value_t = 10_000)]
    length: usize,
    /// Model parameter as name=value; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
    #[arg(long, default_value = "synth")]
    symbol: String,
    #[arg(long, default_value_t = 5)]
    timeframe: u32,
    /// Output file; defaults to <out-dir>/<symbol>.csv.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    input: PathBuf,
    /// Wavelet scale; 0 fits the closes themselves.
    #[arg(long, default_value_t = 1)]
    scale: u32,
    #[arg(long, default_value = "haar", value_parser = parse_family)]
    wavelet: FamilyName,
    /// Time step between successive samples.
    #[arg(long, default_value_t = 1.0)]
    dtau: f64,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[arg(long, default_value_t = 3)]
    order_f: usize,
    #[arg(long, default_value_t = 2)]
    order_g2: usize,
    #[arg(long, default_value_t = 512)]
    grid: usize,
}

#[derive(Args)]
struct ReportArgs {
    statement: PathBuf,
    /// profit_only or profit_plus_swap; detected from the file when omitted.
    #[arg(long)]
    convention: Option<String>,
    /// Print the key/value dump instead of the text report.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CoeffsArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    levels: u32,
    #[arg(long, default_value = "haar", value_parser = parse_family)]
    wavelet: FamilyName,
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_family(s: &str) -> Result<FamilyName, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected name=value")?;
    let v: f64 = v
        .trim()
        .parse()
        .map_err(|_| format!("bad number in {s:?}"))?;
    Ok((k.trim().to_string(), v))
}

/// Failure kinds mapped to exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.class() {
                ErrorClass::Data => 1,
                ErrorClass::Validation => 2,
            };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| cfg.map(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = RunConfig::load(path).map_err(Error::from)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(1);
    let mut spec = SyntheticSpec::new(args.kind, args.length, seed);
    for (k, v) in &args.params {
        spec = spec.with(k, *v);
    }
    spec.symbol = args.symbol.clone();
    spec.timeframe = args.timeframe;
    let series = generate(&spec).map_err(Error::from)?;
    let path = args
        .output
        .clone()
        .unwrap_or_else(|| out_dir(cli, None).join(format!("{}.csv", args.symbol)));
    write(&path, &series.to_csv())?;
    info!("wrote {} bars to {}", series.len(), path.display());
    Ok(())
}

fn cmd_density(cli: &Cli, args: &DensityArgs) -> Result<()> {
    let series = load_history(&args.input, "input", 5).map_err(Error::from)?;
    let coeffs = if args.scale == 0 {
        let closes = series.closes();
        CoeffSeries {
            scale: 0,
            shifts: (0..closes.len() as i64).collect(),
            values: closes,
        }
    } else {
        let family = WaveletFamily::from_name(args.wavelet);
        let d = decompose(&series, args.scale, &family).map_err(Error::from)?;
        d.detail(args.scale)
            .cloned()
            .context("missing detail level")?
    };
    let pairs = increments(&coeffs).map_err(Error::from)?;
    let cfg = FitConfig {
        bins: args.bins,
        order_f: args.order_f,
        order_g2: args.order_g2,
        ..FitConfig::default()
    };
    let fit = estimate_fg(&pairs, args.dtau, &cfg).map_err(Error::from)?;
    let density = stationary_density(&fit, args.grid).map_err(Error::from)?;
    let dir = out_dir(cli, None);
    write(&dir.join("fit.csv"), &fit.to_csv())?;
    write(&dir.join("density.csv"), &density.to_csv())?;
    println!("drift coefficients: {:?}", fit.hermite_f);
    println!("diffusion coefficients: {:?}", fit.hermite_g2);
    println!(
        "density mean {:.6e} variance {:.6e}",
        density.mean(),
        density.variance()
    );
    Ok(())
}

fn cmd_backtest(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?.context("backtest needs --config")?;
    let output = engine::backtest(&cfg)?;
    let dir = out_dir(cli, Some(&cfg));
    output.write_to(&dir)?;
    print!("{}", output.report);
    info!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let statement = report::load_statement(&args.statement).map_err(Error::from)?;
    let convention = match &args.convention {
        Some(c) => c.parse::<PlConvention>().map_err(|e| {
            anyhow::Error::new(Error::from(wavefx_core::config::ConfigError::Invalid {
                key: "convention".into(),
                reason: e,
            }))
        })?,
        None => report::detect_convention(&statement).unwrap_or_default(),
    };
    let stats = report::summarize_statement(&statement, convention).map_err(Error::from)?;
    if args.json {
        println!("{}", report::stats_json(&stats));
    } else {
        print!("{}", report::render_report(&stats).map_err(Error::from)?);
    }
    Ok(())
}

fn cmd_coeffs(args: &CoeffsArgs) -> Result<()> {
    let series = load_history(&args.input, "input", 5).map_err(Error::from)?;
    let d = decompose(
        &series,
        args.levels,
        &WaveletFamily::from_name(args.wavelet),
    )
    .map_err(Error::from)?;
    print!("{}", coefficients_csv(&d));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Density(a) => cmd_density(cli, a),
        Command::Backtest => cmd_backtest(cli),
        Command::Report(a) => cmd_report(a),
        Command::Coeffs(a) => cmd_coeffs(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
