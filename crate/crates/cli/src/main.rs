//! `nodekit`: command-line driver for the lymph node segmentation toolkit.

mod config;
mod error;
mod io;
mod pipeline;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nodekit_core::filters::Connectivity;

use config::PipelineConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "nodekit", version, about = "Atlas-prior mediastinal lymph node segmentation toolkit")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the configured seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register annotated subjects to the atlas and build the priors.
    BuildAtlas(OutDir),
    /// Transfer priors to subjects, crop to the lungs and normalize the CT.
    Prepare(PrepareArgs),
    /// Apply the GIN/IPA intensity augmentation for one epoch.
    Augment(AugmentArgs),
    /// Evaluate the training losses for probability maps.
    Loss(LossArgs),
    /// Turn probability maps into a final mask.
    Postprocess(PostprocessArgs),
    /// Compare prediction masks with ground truth masks.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory (overrides paths.output_dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Atlas smoothing in voxels (overrides atlas.sigma_vox).
    #[arg(long)]
    sigma_vox: Option<f64>,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Only this subject id.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    crop_margin_mm: Option<f64>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long, default_value_t = 0)]
    epoch: u64,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// Probability map; repeat for deep-supervision levels, finest first.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    gt: PathBuf,
    /// Atlas prior on the grid of the first prediction.
    #[arg(long)]
    pa: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PostprocessArgs {
    /// Base threshold.
    #[arg(long)]
    t: Option<f64>,
    /// Minimum component diameter in mm, or "none".
    #[arg(long, value_parser = parse_min_diam)]
    min_diam: Option<MinDiam>,
    /// Component connectivity: 6, 18 or 26.
    #[arg(long, value_parser = parse_connectivity)]
    connectivity: Option<Connectivity>,
    #[arg(long)]
    pa: Option<PathBuf>,
    #[arg(long)]
    lungs: Option<PathBuf>,
    /// Crop record; the output is padded back to the original grid.
    #[arg(long)]
    crop: Option<PathBuf>,
    /// Grid search axes, e.g. `--grid t=0.5,0.3,0.2 diam=none,3,5,7`. The
    /// output then names a directory with one mask per combination.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
    /// Probability maps (averaged), then the output path.
    files: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// JSON report path; the CSV table goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// `--min-diam` value; `None` disables the diameter filter.
#[derive(Clone, Copy, Debug)]
struct MinDiam(Option<f64>);

fn parse_min_diam(s: &str) -> Result<MinDiam, String> {
    tools::parse_diameter(s).map(MinDiam).ok_or_else(|| format!("expected a number or \"none\", got {s:?}"))
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    s.parse::<u32>().map_err(|e| e.to_string()).and_then(Connectivity::try_from)
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::new("argument", "--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("argument", e.to_string()))?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::BuildAtlas(a) => {
            if let Some(s) = a.sigma_vox {
                cfg.atlas.sigma_vox = s;
            }
            cfg.validate()?;
            let out = cfg.output_dir(a.out_dir.as_ref())?;
            pipeline::build_atlas(&cfg, &out)
        }
        Command::Prepare(a) => {
            if let Some(m) = a.crop_margin_mm {
                cfg.atlas.crop_margin_mm = m;
            }
            cfg.validate()?;
            let out = cfg.output_dir(a.out_dir.as_ref())?;
            pipeline::prepare(&cfg, &out, a.case.as_deref())
        }
        Command::Augment(a) => {
            cfg.validate()?;
            tools::augment(&a.input, &a.output, a.epoch, cfg.seed, &cfg.gin, &cfg.ramp)
        }
        Command::Loss(a) => {
            cfg.validate()?;
            let report = tools::loss(&a.pred, &a.gt, a.pa.as_deref(), &cfg.loss)?;
            match &a.out {
                Some(p) => io::write_json(&report, p),
                None => {
                    println!("{}", serde_json::to_string_pretty(&report)?);
                    Ok(())
                }
            }
        }
        Command::Postprocess(mut a) => {
            // `--grid` takes several values, so positional files written
            // after it land in the grid list; axes always contain '='.
            let (axes, stray): (Vec<String>, Vec<String>) = a.grid.drain(..).partition(|g| g.contains('='));
            let mut files: Vec<PathBuf> = stray.into_iter().map(PathBuf::from).collect();
            files.append(&mut a.files);
            if files.len() < 2 {
                return Err(CliError::new("argument", "postprocess needs at least one probability map and an output path"));
            }
            let pp = &mut cfg.postprocess;
            if let Some(t) = a.t {
                pp.t = t;
            }
            if let Some(MinDiam(d)) = a.min_diam {
                pp.min_diameter_mm = d;
            }
            if let Some(c) = a.connectivity {
                pp.connectivity = c;
            }
            cfg.validate()?;
            let out = files.pop().expect("checked length");
            let grid = (!axes.is_empty()).then(|| tools::Grid::parse(&axes, &cfg.postprocess)).transpose()?;
            let runs = grid.map(|g| g.runs(&cfg.postprocess)).transpose()?;
            let inputs = tools::load_post_inputs(&files, a.pa.as_deref(), a.lungs.as_deref(), a.crop.as_deref())?;
            match runs {
                Some(runs) => tools::postprocess_grid(&inputs, &runs, &out),
                None => io::write_labels(&tools::postprocess(&inputs, &cfg.postprocess)?, &out),
            }
        }
        Command::Evaluate(a) => {
            cfg.validate()?;
            let report = tools::evaluate(&a.pred, &a.gt)?;
            let csv = a.csv.unwrap_or_else(|| a.out.with_extension("csv"));
            io::write_json(&report, &a.out)?;
            std::fs::write(&csv, tools::report_csv(&report))
                .map_err(|e| CliError::new("io", format!("{}: {e}", csv.display())))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::new("usage", e.to_string().trim_end()).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
