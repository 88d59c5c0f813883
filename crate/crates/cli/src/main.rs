use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bgwr::elpd::select_bandwidth;
use bgwr::geo::Frame;
use bgwr::mcmc::PosteriorSamples;
use bgwr::pipeline::{
    cross_validate, fit_all, ingest_csv, select_and_fit, summarize, write_elpd_outputs, write_fit_outputs,
    write_selection_outputs, RunConfig, SUMMARY_HEADER,
};
use bgwr::simgen::{generate, LatticeSpec};
use bgwr::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bayesian geographically weighted regression.
#[derive(Parser)]
#[command(name = "bgwr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lattice dataset and its true coefficient field.
    Simulate(SimulateArgs),
    /// Fit every site at one bandwidth.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Cross-validate the candidate bandwidths, pick the best, refit.
    SelectBandwidth {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated candidate bandwidths.
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<f64>>,
    },
    /// Cross-validated elpd table for the candidate bandwidths, no refit.
    Elpd {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<f64>>,
    },
    /// Summarize trace CSV files (one per chain) into posterior summary rows.
    Summarize {
        /// Trace files written by `export-traces`; the file stem labels the rows.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit at one bandwidth and write per-site, per-chain trace CSVs.
    ExportTraces {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bandwidth: Option<f64>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 40)]
    width: u32,
    #[arg(long, default_value_t = 40)]
    height: u32,
    /// Replicates per site.
    #[arg(short, long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    theta_mean: f64,
    #[arg(long, default_value_t = 0.01)]
    theta_sd: f64,
    /// Dataset CSV path.
    #[arg(long, short)]
    output: PathBuf,
    /// Truth CSV path [default: truth.csv beside the dataset]
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrameArg {
    Planar,
    Spherical,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Input CSV (site_id,u,v,y,offset,x1..xp).
    #[arg(long, short)]
    data: Option<PathBuf>,
    #[arg(long, short)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed of the samplers.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Kernel truncation threshold W*.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    frame: Option<FrameArg>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    /// Also write per-site trace CSVs.
    #[arg(long)]
    traces: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(d) = &self.data {
            cfg.dataset = Some(d.clone());
        }
        if let Some(o) = &self.out_dir {
            cfg.output_dir = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.sampler.seed = s;
        }
        if let Some(v) = self.iterations {
            cfg.sampler.iterations = v;
        }
        if let Some(v) = self.burn_in {
            cfg.sampler.burn_in = v;
        }
        if let Some(v) = self.chains {
            cfg.sampler.chains = v;
        }
        if let Some(v) = self.threshold {
            cfg.kernel.threshold = v;
        }
        if let Some(f) = self.frame {
            cfg.frame = match f {
                FrameArg::Planar => Frame::Planar,
                FrameArg::Spherical => Frame::Spherical,
            };
        }
        if let Some(v) = self.folds {
            cfg.cv.folds = v;
        }
        if let Some(v) = self.holdout_fraction {
            cfg.cv.holdout_fraction = v;
        }
        cfg.write_traces |= self.traces;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_data(cfg: &RunConfig) -> Result<bgwr::posterior::SpatialDataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given (--data or `dataset` in the config)".into()))?;
    ingest_csv(path, cfg.frame)
}

fn fixed_bandwidth(cfg: &RunConfig, flag: Option<f64>) -> Result<f64> {
    flag.or(cfg.kernel.bandwidth)
        .ok_or_else(|| Error::Config("no bandwidth given (--bandwidth or kernel.bandwidth)".into()))
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let spec = LatticeSpec {
        width: args.width,
        height: args.height,
        m: args.m,
        seed: args.seed,
        theta_mean: args.theta_mean,
        theta_sd: args.theta_sd,
        ..LatticeSpec::default()
    };
    let (data, truth) = generate(&spec)?;
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    bgwr::pipeline::export_csv(&data, fs::File::create(&args.output)?)?;
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| args.output.with_file_name("truth.csv"));
    truth.write_csv(fs::File::create(&truth_path)?)?;
    eprintln!(
        "wrote {} sites x {} replicates to {} and truth to {}",
        data.sites.len(),
        args.m,
        args.output.display(),
        truth_path.display()
    );
    Ok(())
}

fn summarize_traces(paths: &[PathBuf], output: Option<&Path>) -> Result<()> {
    let mut out: Box<dyn Write> = match output {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(SUMMARY_HEADER)?;
    for path in paths {
        let samples = read_trace(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for r in summarize(&samples)? {
            w.write_record([
                label.clone(),
                r.param,
                r.mean.to_string(),
                r.sd.to_string(),
                r.q025.to_string(),
                r.q50.to_string(),
                r.q975.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_trace(path: &Path) -> Result<PosteriorSamples> {
    let mut r = csv::Reader::from_path(path)?;
    let label = path.display().to_string();
    let header = r.headers()?.clone();
    if header.get(0) != Some("iteration") {
        return Err(Error::Ingest {
            path: label,
            line: 1,
            message: "first column must be `iteration`".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut draws = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        for cell in rec.iter().skip(1) {
            draws.push(cell.parse::<f64>().map_err(|_| Error::Ingest {
                path: label.clone(),
                line: i + 2,
                message: format!("'{cell}' is not a number"),
            })?);
        }
    }
    Ok(PosteriorSamples {
        names,
        draws,
        acceptance_rate: f64::NAN,
        chain_id: 0,
        seed: 0,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Fit { run, bandwidth } => {
            let cfg = run.config()?;
            let eta = fixed_bandwidth(&cfg, bandwidth)?;
            let data = load_data(&cfg)?;
            let fit = fit_all(&data, &cfg, eta)?;
            write_fit_outputs(&cfg.output_dir, &fit, cfg.write_traces)?;
            eprintln!(
                "fitted {} sites at bandwidth {eta} in {:.1?}; max truncation change {:e}%",
                fit.sites.len(),
                fit.elapsed,
                fit.truncation_relative_change()
            );
            Ok(())
        }
        Command::SelectBandwidth { run, candidates } => {
            let mut cfg = run.config()?;
            if let Some(c) = candidates {
                cfg.kernel.candidates = c;
            }
            cfg.validate_candidates()?;
            let data = load_data(&cfg)?;
            let outcome = select_and_fit(&data, &cfg)?;
            write_selection_outputs(&cfg.output_dir, &outcome, cfg.write_traces)?;
            for (eta, v) in &outcome.curve {
                eprintln!("bandwidth {eta}: mean elpd {v}");
            }
            println!("{}", outcome.bandwidth);
            Ok(())
        }
        Command::Elpd { run, candidates } => {
            let mut cfg = run.config()?;
            if let Some(c) = candidates {
                cfg.kernel.candidates = c;
            }
            cfg.validate_candidates()?;
            let data = load_data(&cfg)?;
            let table = cross_validate(&data, &cfg)?;
            write_elpd_outputs(&cfg.output_dir, &table)?;
            let (_, curve) = select_bandwidth(&table)?;
            for (eta, v) in curve {
                println!("{eta},{v}");
            }
            Ok(())
        }
        Command::Summarize { traces, output } => summarize_traces(&traces, output.as_deref()),
        Command::ExportTraces { run, bandwidth } => {
            let cfg = run.config()?;
            let eta = fixed_bandwidth(&cfg, bandwidth)?;
            let data = load_data(&cfg)?;
            let fit = fit_all(&data, &cfg, eta)?;
            write_fit_outputs(&cfg.output_dir, &fit, true)?;
            eprintln!("traces written to {}", cfg.output_dir.join("traces").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
