use basinforge::basin::{basin_slice, write_ppm, SlicePlane};
use basinforge::pipeline::{preset, run, Pipeline, RunConfig, RunSummary};
use basinforge::sequence::MapSequence;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit code for configuration, parse and I/O errors.
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "basinforge", version, about = "Basins of non-autonomous attracting sequences in C^2")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pipeline end to end and write its artifacts.
    Run {
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// diagonal, general or autonomous; selects a preset without --config.
        #[arg(long)]
        pipeline: Option<String>,
        /// Sequence seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of germs generated.
        #[arg(long)]
        horizon: Option<usize>,
        /// Complete trains required before a coverage warning.
        #[arg(long)]
        trains: Option<usize>,
        /// Output directory (default basinforge-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Basin slice, e.g. "axis=z,fixed=0,center=0,radius=2,size=64".
        #[arg(long)]
        slice: Option<String>,
        /// Run the checkers only; skip limit-map sampling, witnesses and slices.
        #[arg(long)]
        verify_only: bool,
    },
    /// Print the check table of a summary; optionally redraw a basin slice.
    ReportRender {
        /// summary.json written by `run`.
        summary: PathBuf,
        /// Slice to draw; the sequence comes from the summary's config.
        #[arg(long)]
        slice: Option<String>,
        /// Directory for slice.ppm (default: next to the summary).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() {
    if let Some(n) = std::env::var("BASINFORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn load_config(
    config: Option<PathBuf>,
    pipeline: Option<String>,
    seed: Option<u64>,
    horizon: Option<usize>,
    trains: Option<usize>,
    slice: Option<String>,
) -> basinforge::Result<RunConfig> {
    let mut cfg = match (&config, &pipeline) {
        (Some(p), _) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        (None, Some(name)) => preset(name.parse()?),
        (None, None) => return Err(basinforge::Error::Config("give --config or --pipeline".into())),
    };
    if let (Some(_), Some(name)) = (&config, &pipeline) {
        cfg.pipeline = name.parse::<Pipeline>()?;
    }
    if seed.is_some() {
        cfg.seed = seed;
    }
    if let Some(h) = horizon {
        cfg.horizon = h;
    }
    if let Some(t) = trains {
        cfg.trains_to_cover = t;
    }
    if slice.is_some() {
        cfg.slice = slice;
    }
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

fn render(summary: PathBuf, slice: Option<String>, out: Option<PathBuf>) -> basinforge::Result<()> {
    let s = RunSummary::from_json(&std::fs::read_to_string(&summary)?)?;
    print!("{}", s.render());
    if let Some(spec) = slice {
        let cfg = s.config.as_ref().ok_or_else(|| basinforge::Error::Parse("summary has no configuration to redraw a slice".into()))?;
        let plane = SlicePlane::parse(&spec)?;
        let mut seq = MapSequence::new(cfg.sequence.clone())?;
        let germs = seq.germs(cfg.horizon);
        let verdicts = basin_slice(&germs, seq.bounds().map(|b| b.d), &plane, cfg.samples.membership_threshold, cfg.horizon);
        let dir = out.unwrap_or_else(|| summary.parent().map(PathBuf::from).unwrap_or_default());
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("slice.ppm");
        std::fs::write(&path, write_ppm(plane.size, &verdicts))?;
        println!("slice written to {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    init_threads();
    match Cli::parse().command {
        Command::Run { config, pipeline, seed, horizon, trains, out, slice, verify_only } => {
            let cfg = match load_config(config, pipeline, seed, horizon, trains, slice) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_ERROR);
                }
            };
            let dir = out.or_else(|| cfg.out.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("basinforge-out"));
            let outcome = match run(&cfg, verify_only) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_ERROR);
                }
            };
            if let Err(e) = outcome.write(&dir) {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_ERROR);
            }
            let s = &outcome.summary;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            for c in s.checks.iter().filter(|c| c.status == basinforge::report::Status::Fail) {
                eprintln!("failed: {} (min slack {:e}) {}", c.name, c.finite_slack(), c.note);
            }
            println!("{:?}: {} checks, status {:?}, artifacts in {}", s.pipeline.expect("set by run"), s.checks.len(), s.status, dir.display());
            ExitCode::from(s.exit_code as u8)
        }
        Command::ReportRender { summary, slice, out } => match render(summary, slice, out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_ERROR)
            }
        },
    }
}
