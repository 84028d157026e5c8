use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oed_core::config::{load_config, preset, ExperimentConfig, Scale, StudyKind};
use oed_core::eig::eig;
use oed_core::quadrature::self_check;
use oed_core::run::run;
use oed_core::stability::{rate_fit, DEFAULT_FLOOR};
use oed_core::Error;

#[derive(Parser)]
#[command(name = "oed", version, about = "Expected information gain and surrogate stability studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or list convergence studies.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Quadrature self-checks.
    #[command(subcommand)]
    Quad(QuadCommand),
    /// Expected information gain at a single design.
    #[command(subcommand)]
    Eig(EigCommand),
    /// Post-processing of study outputs.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Run the study described by a TOML file.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Use the paper-scale preset instead of the desk-scale one.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the preset study names.
    ListPresets,
}

#[derive(Subcommand)]
enum QuadCommand {
    /// Exactness and convergence suite.
    Check,
}

#[derive(Subcommand)]
enum EigCommand {
    Eval(EigArgs),
}

#[derive(Args)]
struct EigArgs {
    /// Design coordinates, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    design: Vec<f64>,
    /// TOML experiment file; its model, prior, noise and rules are used.
    #[arg(long, conflicts_with = "study")]
    config: Option<PathBuf>,
    /// Preset study name.
    #[arg(long, default_value = "example1_scalar")]
    study: String,
    /// Slope of the scalar linear model.
    #[arg(long, allow_negative_numbers = true)]
    a: Option<f64>,
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Fit log-log slopes to the error columns of a rates file.
    Slopes {
        rates: PathBuf,
        /// Divide errors by (log N)^q before fitting.
        #[arg(long, default_value_t = 0.0)]
        log_power: f64,
        #[arg(long, default_value_t = DEFAULT_FLOOR)]
        floor: f64,
    },
}

enum Failure {
    Usage(String),
    Compute(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Compute(other.to_string()),
        }
    }
}

fn study_config(path: Option<&PathBuf>, study: &str, paper: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::minimal(
            StudyKind::from_name(study).ok_or_else(|| Failure::Usage(format!("unknown study `{study}`")))?,
        ),
    };
    if paper {
        cfg.scale = Scale::Paper;
    }
    Ok(cfg)
}

fn run_study(config: PathBuf, output_dir: Option<PathBuf>, paper: bool, threads: Option<usize>) -> Result<(), Failure> {
    let mut cfg = study_config(Some(&config), "", paper)?;
    if threads.is_some() {
        cfg.threads = threads;
    }
    let out = run(&cfg, output_dir.as_deref())?;
    if let Some(r) = &out.report {
        for l in &r.levels {
            println!(
                "N = {:<8} E_N = {:.6e}  L2 = {:.6e}  argmax = {:?}",
                l.n, l.sup_utility_error, l.sup_l2_distance, l.argmax_design
            );
        }
        for f in &r.failures {
            println!("level {} failed: {}", f.level, f.error);
        }
        for c in &r.checks {
            let tag = if c.passed { "PASS" } else if c.advisory { "WARN" } else { "FAIL" };
            println!("[{tag}] {}: {}", c.name, c.detail);
        }
    }
    println!("outputs in {}", out.output_dir.display());
    if out.passed() {
        Ok(())
    } else {
        Err(Failure::Compute(
            out.error.unwrap_or_else(|| "one or more checks failed".into()),
        ))
    }
}

fn eig_eval(args: EigArgs) -> Result<(), Failure> {
    let mut cfg = study_config(args.config.as_ref(), &args.study, args.paper_scale)?;
    if let Some(a) = args.a {
        if cfg.study != StudyKind::Example1Scalar {
            return Err(Failure::Usage("--a applies to example1_scalar only".into()));
        }
        cfg.example1 = Some(oed_core::config::Example1Spec { a });
    }
    let resolved = cfg.resolve()?;
    let setup = resolved.setup()?;
    let est = eig(setup.model.as_ref(), &args.design, &setup.rules, &setup.noise)?;
    let json = serde_json::to_string(&est).map_err(|e| Failure::Compute(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn slopes(path: PathBuf, log_power: f64, floor: f64) -> Result<(), Failure> {
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Failure::Usage(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Usage(format!("missing column `{name}`")))
    };
    let n_col = col("N")?;
    let targets = ["sup_utility_error", "sup_l2_distance"];
    let cols: Vec<usize> = targets.iter().map(|t| col(t)).collect::<Result<_, _>>()?;
    let mut ns = Vec::new();
    let mut values = vec![Vec::new(); cols.len()];
    for rec in reader.records() {
        let rec = rec.map_err(|e| Failure::Usage(e.to_string()))?;
        let parse = |k: usize| {
            rec.get(k)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Failure::Usage(format!("bad number in column {k}: {e}")))
        };
        ns.push(parse(n_col)?);
        for (v, &k) in values.iter_mut().zip(&cols) {
            v.push(parse(k)?);
        }
    }
    let mut out = serde_json::Map::new();
    for (name, v) in targets.iter().zip(&values) {
        let fit = rate_fit(&ns, v, log_power, floor).map_err(|e| Failure::Compute(format!("{name}: {e}")))?;
        out.insert(name.to_string(), serde_json::to_value(fit).map_err(|e| Failure::Compute(e.to_string()))?);
    }
    println!("{}", serde_json::Value::Object(out));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Study(StudyCommand::Run {
            config,
            output_dir,
            paper_scale,
            threads,
        }) => run_study(config, output_dir, paper_scale, threads),
        Command::Study(StudyCommand::ListPresets) => {
            for k in StudyKind::PRESETS {
                let desk = preset(k, Scale::Desk).map(|p| p.ladder).unwrap_or_default();
                println!("{:<16} {} (desk ladder {:?})", k.name(), k.description(), desk);
            }
            Ok(())
        }
        Command::Quad(QuadCommand::Check) => {
            let rows = self_check();
            for r in &rows {
                println!("{:<4} {:<48} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if rows.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(Failure::Compute("quadrature self-check failed".into()))
            }
        }
        Command::Eig(EigCommand::Eval(args)) => eig_eval(args),
        Command::Report(ReportCommand::Slopes { rates, log_power, floor }) => slopes(rates, log_power, floor),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
