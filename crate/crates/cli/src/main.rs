use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tdet_core::cost::{table1_report, CostConfig};
use tdet_core::entropy::{ie_map_with, to_grayscale, GrayImage, IeOptions, RgbImage};
use tdet_core::io::{read_netpbm, write_tensor, Netpbm};
use tdet_core::Error;
use tdet_detect::ablation::{run_ablation, run_on, AblationTarget, ExperimentConfig};
use tdet_detect::checks::{gradient_suite, TOLERANCE};
use tdet_detect::eval::{evaluate_map, EvalReport};
use tdet_detect::model::{Model, Placement};
use tdet_detect::train::loss_curve_csv;

#[derive(Parser)]
#[command(name = "tdet", version, about = "Entropy maps, recurrent cell costs and a toy video detector")]
struct Cli {
    /// Seed for every random choice; overrides the seed in a config file.
    #[arg(long, global = true, env = "TDET_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the entropy map of a PGM/PPM image as a PGM.
    Entropy {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        window: usize,
        /// 2: pair entropy of (gray, local mean); 1: plain gray entropy.
        #[arg(long, default_value_t = 2)]
        passes: usize,
        /// Skip the morphological opening.
        #[arg(long)]
        no_open: bool,
        /// Also write the raw values next to the output as a tensor dump.
        #[arg(long)]
        raw: bool,
    },
    /// Parameter and MAC table for the recurrent cells as CSV.
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Train and evaluate one toy detector.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "toy-run")]
        output: PathBuf,
    },
    /// Evaluate a saved toy detector on the test split of a config.
    EvalToy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate one detector per placement.
    Ablate {
        /// Comma-separated placements, e.g. none,stage-4,extra-map-1.
        #[arg(long, value_delimiter = ',', required = true)]
        placements: Vec<String>,
        #[arg(long, value_enum, default_value_t = Target::Gru)]
        target: Target,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "ablation")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Gru,
    Ie,
}

const DEFAULT_SEED: u64 = 42;

/// Failure reported as one `error kind=... message=...` line.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Io(_) => ("io", 1),
            Error::Format(_) | Error::Json(_) => ("format", 1),
            Error::Diverged { .. } => ("diverged", 1),
            _ => ("invalid", 2),
        };
        Failure {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
        code: 1,
    }
}

/// Names the file an error came from.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(p) = path else { return Ok(T::default()) };
    let bytes = fs::read(p).map_err(|e| io_failure(p, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure {
        kind: "config",
        message: format!("{}: {e}", p.display()),
        code: 2,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn experiment(config: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg: ExperimentConfig = load_json(config)?;
    if config.is_none() {
        cfg.train.seed = DEFAULT_SEED;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from("class,num_gt,ap\n");
    for c in &r.per_class {
        let ap = c.ap.map(|v| format!("{v:.6}")).unwrap_or_else(|| "excluded".into());
        out.push_str(&format!("{},{},{ap}\n", c.class, c.num_gt));
    }
    out.push_str(&format!("mean,,{:.6}\n", r.map));
    out
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Entropy {
            input,
            output,
            window,
            passes,
            no_open,
            raw,
        } => {
            let gray = match read_netpbm(&input).map_err(at(&input))? {
                Netpbm::Gray { width, height, pixels } => GrayImage::new(width, height, pixels)?,
                Netpbm::Rgb { width, height, pixels } => to_grayscale(&RgbImage::new(width, height, pixels)?),
            };
            let opts = IeOptions {
                window,
                passes,
                open: !no_open,
            };
            let map = ie_map_with(&gray, &opts)?;
            write(&output, map.to_pgm(opts.max_bits()))?;
            if raw {
                let raw_path = output.with_extension("bin");
                write_tensor(&raw_path, &map.to_tensor::<f32>()).map_err(at(&raw_path))?;
            }
            println!("wrote {} ({}x{})", output.display(), map.width(), map.height());
        }
        Command::Cost { config, output } => {
            let cfg: CostConfig = load_json(config.as_deref())?;
            let rows = table1_report(&output, &cfg).map_err(at(&output))?;
            for r in rows {
                println!("{:<13} params {:>10}  macs {:>13}", r.variant, r.params, r.macs);
            }
        }
        Command::Gradcheck => {
            let checks = gradient_suite(cli.seed.unwrap_or(DEFAULT_SEED))?;
            let mut failed = Vec::new();
            for c in &checks {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<20} shapes {}  max_rel_err {:.3e}  {status}", c.op, c.shapes, c.max_rel_error);
                if !c.passed() {
                    failed.push(c.op.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Failure {
                    kind: "gradcheck",
                    message: format!("relative error >= {TOLERANCE:e} in {}", failed.join(", ")),
                    code: 1,
                });
            }
        }
        Command::TrainToy { config, output } => {
            let cfg = experiment(config.as_deref(), cli.seed)?;
            let splits = cfg.splits()?;
            let result = run_on(&splits, &cfg.train, &cfg.eval)?;
            result.model.save(&output.join("model")).map_err(at(&output))?;
            write(&output.join("config.json"), json(&cfg))?;
            write(&output.join("loss_curve.csv"), loss_curve_csv(&result.loss_curve))?;
            write(&output.join("metrics.json"), json(&result.report))?;
            write(&output.join("metrics.csv"), report_csv(&result.report))?;
            println!("mAP {:.4}  params {}  -> {}", result.report.map, result.model.num_params(), output.display());
        }
        Command::EvalToy { model, config, output } => {
            let m = Model::load(&model).map_err(at(&model))?;
            let mut cfg = experiment(config.as_deref(), cli.seed)?;
            cfg.train.model = m.config.clone();
            let splits = cfg.splits()?;
            let report = evaluate_map(&m, &splits.test, &cfg.eval)?;
            if let Some(out) = output {
                write(&out, json(&report))?;
            }
            print!("{}", report_csv(&report));
        }
        Command::Ablate {
            placements,
            target,
            config,
            output,
        } => {
            let placements = placements
                .iter()
                .map(|p| p.parse::<Placement>())
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = experiment(config.as_deref(), cli.seed)?;
            let target = match target {
                Target::Gru => AblationTarget::Gru,
                Target::Ie => AblationTarget::Ie,
            };
            let table = run_ablation(&placements, target, &cfg)?;
            write(&output.join("ablation.csv"), table.to_csv())?;
            write(&output.join("ablation.json"), json(&table))?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error kind=usage message={first:?}");
            eprint!("{}", e.render());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} message={:?}", f.kind, f.message);
            ExitCode::from(f.code)
        }
    }
}
