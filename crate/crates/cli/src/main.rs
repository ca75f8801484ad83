use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pin_core::config::{NoiseModeTag, RunConfig};
use pin_core::data::ShortcutSpec;
use pin_core::train::{self, TrainState};
use pin_core::verify::{self, VerifyOptions};
use pin_core::{eval, pinf, state_file, Error};

const LOG_EVERY: u64 = 50;

#[derive(Parser)]
#[command(name = "pin", version, about = "Positive-incentive noise training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-shortcut benchmark as a PINF file.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Overrides `epochs` from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model on every domain of a feature file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every noise mode over several seeds and compare OOD metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated subset of none,random,sample,pin.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the gradient and identity verification suite.
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-emit the curve log stored in a model file.
    ExportCurves {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Config(_) | Error::Json(_) | Error::NonFiniteGradient { .. } => {
                Failure::Usage(e.to_string())
            }
            Error::Format { .. } | Error::Io(_) | Error::Dimension { .. } | Error::UndefinedMetric(_) => {
                Failure::Data(e.to_string())
            }
        }
    }
}

type CliResult = Result<(), Failure>;

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var("PIN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("PIN_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_spec(path: Option<&Path>) -> Result<ShortcutSpec, Failure> {
    let mut spec: ShortcutSpec = match path {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Failure::Usage(format!("invalid spec: {e}")))?,
        None => ShortcutSpec::default(),
    };
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn echo_config(cfg: &RunConfig) -> String {
    format!("config {} seed {}", cfg.to_json(), cfg.seed)
}

fn curves_text(state: &TrainState) -> String {
    let mut buf = Vec::new();
    train::write_curves_csv(&mut buf, &echo_config(&state.config), &state.curves).expect("write to memory");
    String::from_utf8(buf).expect("ascii")
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = load_spec(spec.as_deref())?;
            let spec_json = serde_json::to_string(&spec).expect("spec serializes");
            println!("spec {spec_json} seed {}", spec.seed);
            let set = spec.generate()?;
            pinf::write_features(&out, &set)?;
            println!("wrote {} records to {}", set.records.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            curves,
            epochs,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let set = pinf::read_features(&data)?;
            let mut state = TrainState::init(&cfg, &set)?;
            println!("{}", echo_config(&state.config));
            state.fit(&set, |r| {
                if r.step % LOG_EVERY == 0 {
                    println!(
                        "step {:>6}  loss {:.5}  base {:.5}  vpn {:.5}  acc {:.3}",
                        r.step, r.loss_total, r.loss_base, r.loss_vpn, r.batch_acc
                    );
                }
            })?;
            state_file::save_state(&out, &state)?;
            if let Some(path) = curves {
                write(&path, curves_text(&state))?;
            }
            println!("trained {} steps, model written to {}", state.step(), out.display());
        }
        Command::Eval { data, model, report } => {
            let state = state_file::load_state(&model)?;
            println!("{}", echo_config(&state.config));
            let set = pinf::read_features(&data)?;
            let rep = eval::evaluate(&state, &set)?;
            print!("{}", rep.pretty());
            if let Some(path) = report {
                write(&path, rep.to_csv(&echo_config(&state.config)))?;
            }
        }
        Command::Ablate {
            data,
            config,
            seeds,
            modes,
            report,
        } => {
            let cfg = load_config(config.as_deref())?;
            let modes = match modes {
                None => NoiseModeTag::ALL.to_vec(),
                Some(names) => names
                    .iter()
                    .map(|n| NoiseModeTag::parse(n).ok_or_else(|| Failure::Usage(format!("unknown noise mode {n:?}"))))
                    .collect::<Result<_, _>>()?,
            };
            println!("{}", echo_config(&cfg));
            let set = pinf::read_features(&data)?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let table = eval::run_ablation(&set, &cfg, &modes, &seed_list)?;
            print!("{}", table.pretty());
            if let Some(path) = report {
                write(&path, table.to_csv(&echo_config(&cfg)))?;
            }
        }
        Command::Check { config } => {
            let cfg = load_config(config.as_deref())?;
            println!("{}", echo_config(&cfg));
            let rep = verify::verify_fresh(&cfg, &VerifyOptions::default())?;
            print!("{}", rep.to_text());
            if !rep.all_passed() {
                return Err(Failure::Verification);
            }
        }
        Command::ExportCurves { model, out } => {
            let state = state_file::load_state(&model)?;
            let text = curves_text(&state);
            match out {
                Some(path) => write(&path, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verification) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
    }
}
