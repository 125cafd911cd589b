use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use tsnet::data::load_feature_csv;
use tsnet::experiments::{
    emit_outputs, run_experiment, write_prediction_table, ExperimentConfig, ExperimentKind, FailureKind, RunReport,
    PREDICTIONS_FILE,
};
use tsnet::training::Checkpoint;
use tsnet::TsnetError;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_PARTIAL: u8 = 5;

#[derive(Parser)]
#[command(name = "tsnet", version, about = "Heteroscedastic regression experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; overrides the configuration.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory (default: out/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the 1D toy and predict its 300-point grid.
    Toy1d,
    /// Train on the 2D toy and predict its 50x50 grid.
    Toy2d,
    /// Train/val/test comparison on the configured data source.
    Compare,
    /// Noise-rate sweep with the relative performance index.
    Antinoise,
    /// Active learning with a random-selection control arm.
    Active,
    /// All model variants on toy data with interpolation/extrapolation rows.
    Ablate,
    /// Predict a CSV of raw features with a saved model.
    Predict {
        /// Model checkpoint (model.json from an experiment run).
        #[arg(long)]
        model: PathBuf,
        /// CSV with a header naming every model feature.
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn experiment(&self) -> Option<ExperimentKind> {
        Some(match self {
            Command::Toy1d => ExperimentKind::Toy1d,
            Command::Toy2d => ExperimentKind::Toy2d,
            Command::Compare => ExperimentKind::Compare,
            Command::Antinoise => ExperimentKind::Antinoise,
            Command::Active => ExperimentKind::Active,
            Command::Ablate => ExperimentKind::Ablate,
            Command::Predict { .. } => return None,
        })
    }
}

fn exit_code(e: &TsnetError) -> u8 {
    match e {
        TsnetError::Config(_) => EXIT_CONFIG,
        TsnetError::Schema(_) | TsnetError::Parse { .. } | TsnetError::Csv(_) => EXIT_DATA,
        TsnetError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

fn fail(e: TsnetError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn load_config(global: &GlobalArgs, kind: ExperimentKind) -> Result<ExperimentConfig, TsnetError> {
    let (mut doc, base) = match &global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| TsnetError::Config(format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| TsnetError::Config(format!("{}: {e}", path.display())))?;
            (v, path.parent().map(Path::to_path_buf))
        }
        None => (Value::Object(Default::default()), None),
    };
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| TsnetError::Config("config must be a JSON object".into()))?;
    obj.insert("experiment".into(), serde_json::to_value(kind).expect("plain enum"));
    let mut cfg = ExperimentConfig::from_json_str(&doc.to_string(), base.as_deref())?;
    if let Some(seeds) = &global.seed {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &global.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(report: &RunReport) {
    for a in &report.aggregates {
        let k = &a.key;
        let mut label = vec![k.variant.to_string()];
        if let Some(r) = k.region {
            label.push(format!("region={r:?}").to_lowercase());
        }
        if let Some(r) = k.noise_rate {
            label.push(format!("rate={r}"));
        }
        if let Some(arm) = k.arm {
            label.push(format!("arm={arm:?}").to_lowercase());
        }
        if let Some(c) = k.cycle {
            label.push(format!("cycle={c}"));
        }
        println!(
            "{:<40} mse {:.6} ± {:.6}  mae {:.6} ± {:.6}  nll {:.6} ± {:.6}",
            label.join(" "),
            a.mse.mean,
            a.mse.std,
            a.mae.mean,
            a.mae.std,
            a.nll.mean,
            a.nll.std
        );
    }
    for s in &report.indices {
        let vals: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{}:{}", p.at, p.value.map_or("null".into(), |v| format!("{v:.4}"))))
            .collect();
        println!("{:?} {}: {}", s.index, s.variant, vals.join(" "));
    }
    for f in &report.failed_seeds {
        eprintln!("seed {} failed ({:?}): {}", f.seed, f.kind, f.error);
    }
}

fn run(global: &GlobalArgs, kind: ExperimentKind) -> ExitCode {
    let cfg = match load_config(global, kind) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let out_dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    let mut run = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Err(e) = emit_outputs(&out_dir, &mut run.report, run.showcase.as_ref()) {
        return fail(e);
    }
    print_summary(&run.report);
    println!("wrote {}", out_dir.display());
    let failed = &run.report.failed_seeds;
    match failed.first() {
        None => ExitCode::SUCCESS,
        Some(_) if failed.len() < cfg.seeds.len() => ExitCode::from(EXIT_PARTIAL),
        Some(f) => ExitCode::from(match f.kind {
            FailureKind::Config => EXIT_CONFIG,
            FailureKind::Data => EXIT_DATA,
            FailureKind::Divergence => EXIT_DIVERGENCE,
            FailureKind::Other => EXIT_OTHER,
        }),
    }
}

fn predict(global: &GlobalArgs, model: &Path, input: &Path) -> ExitCode {
    let result = (|| {
        let ck = Checkpoint::load(model)?;
        let log = &ck.model.transform_log;
        let names: Vec<String> = log.features.iter().map(|c| c.name.clone()).collect();
        let x = load_feature_csv(input, &names)?;
        let p = ck.model.predict(&x)?;
        let out_dir = global.out.clone().unwrap_or_else(|| PathBuf::from("out").join("predict"));
        std::fs::create_dir_all(&out_dir).map_err(|e| TsnetError::Config(format!("{}: {e}", out_dir.display())))?;
        let path = out_dir.join(PREDICTIONS_FILE);
        write_prediction_table(&path, log, &x, &p)?;
        Ok::<_, TsnetError>((path, x.nrows()))
    })();
    match result {
        Ok((path, n)) => {
            println!("wrote {n} predictions to {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match (&cli.command, cli.command.experiment()) {
        (Command::Predict { model, input }, _) => predict(&cli.global, model, input),
        (_, Some(kind)) => run(&cli.global, kind),
        (_, None) => unreachable!("every other command is an experiment"),
    }
}
