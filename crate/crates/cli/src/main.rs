//! `stereolab`: scene generation, matching, evaluation and diagnostics.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stereolab", version, about = "Active stereo matching lab")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a stereo pair (or the whole evaluation battery) with ground truth.
    Gen(GenArgs),
    /// Match a rendered or recorded pair.
    Match(MatchArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Dump per-pixel cost curves.
    Landscape(LandscapeArgs),
    /// Time the matcher stages.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["builtin", "spec", "battery"])))]
pub struct GenArgs {
    /// Built-in scene: wall:<m>, slant[:<deg>], box, textureless.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Scene description JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Render the full evaluation battery, one subdirectory per scene.
    #[arg(long)]
    pub battery: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write 8-bit PNG previews of both views.
    #[arg(long)]
    pub preview: bool,
}

/// Matcher settings that override the configuration file.
#[derive(Debug, Args)]
pub struct MatchOverrides {
    /// Matcher configuration JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d_min: Option<usize>,
    #[arg(long)]
    pub d_max: Option<usize>,
    /// Photometric cost without aggregation.
    #[arg(long)]
    pub photometric: bool,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Directory holding left.pfm and right.pfm.
    #[arg(long)]
    pub pair: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: MatchOverrides,
    #[arg(long)]
    pub lr_theta: Option<f64>,
    #[arg(long)]
    pub min_distinctiveness: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of `match` (or a battery of them).
    #[arg(long)]
    pub pred: PathBuf,
    /// Pair directory of `gen` (or a battery of them).
    #[arg(long)]
    pub gt: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-distance bias/jitter CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub ransac_iterations: usize,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    pub pair: PathBuf,
    #[command(flatten)]
    pub overrides: MatchOverrides,
    /// Pixel as ROW,COL; repeat for several.
    #[arg(long = "pixel", required = true, value_parser = parse_pixel)]
    pub pixels: Vec<(usize, usize)>,
    /// Skip aggregation and dump the raw per-pixel cost.
    #[arg(long)]
    pub single_pixel: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub overrides: MatchOverrides,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    /// Thread counts to compare, e.g. 1,4; checks outputs are identical.
    #[arg(long, value_delimiter = ',')]
    pub compare_threads: Vec<usize>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected ROW,COL, got '{s}'"))?;
    let r = r.trim().parse().map_err(|_| format!("bad row in '{s}'"))?;
    let c = c.trim().parse().map_err(|_| format!("bad column in '{s}'"))?;
    Ok((r, c))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a, cli.seed),
        Command::Match(a) => commands::run_match(&a, cli.seed),
        Command::Eval(a) => commands::eval(&a, cli.seed),
        Command::Landscape(a) => commands::landscape(&a),
        Command::Bench(a) => commands::bench(&a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
