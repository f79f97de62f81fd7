use std::error::Error;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cpmoe::dataio::{load_csv, prepare, prepare_with_spec, CleaningRules, PreparedDataset, RawSchema, SplitPlan, TransformSpec};
use cpmoe::eval::{cluster_features, eur_frequency, CpsiConfig, MetricReport, RegimeClusters};
use cpmoe::learn::{evaluate, finetune_transfer, train_source, TrainConfig};
use cpmoe::model::{Checkpoint, ExpertKind, ModelConfig};
use cpmoe::physics::PhysicsReport;
use cpmoe::synth::{gen_plant, shift_plant, PlantConfig, ShiftSpec};
use cpmoe::twin::{Twin, TwinConfig};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "cpmoe", version, about = "Physics-informed mixture-of-experts emission modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic plant as CSV.
    Synth {
        /// Plant config JSON. Defaults to a built-in plant.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Regime count for the built-in plant.
        #[arg(long, default_value_t = 3)]
        regimes: usize,
        /// Shift spec JSON applied on top of the plant config.
        #[arg(long)]
        shift: Option<PathBuf>,
        #[arg(long, default_value_t = 26280)]
        hours: usize,
        #[arg(long, default_value_t = 123)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the effective plant config here.
        #[arg(long)]
        dump_config: Option<PathBuf>,
    },
    /// Clean, engineer, split and window a raw CSV.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 123)]
        seed: u64,
        /// Reuse a fitted transform spec instead of fitting a new one.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "plant")]
        plant_id: String,
    },
    /// Train a model on a prepared dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the small desk-scale architecture when no model is configured.
        #[arg(long)]
        desk: bool,
        /// Restrict the mixture to one expert.
        #[arg(long)]
        only: Option<String>,
    },
    /// Fine-tune a source checkpoint on a target plant.
    Transfer {
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        source_data: PathBuf,
        #[arg(long)]
        target_data: PathBuf,
        /// Transfer config JSON (a `train` section).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's validation windows.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the twin HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory served for non-API paths.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

#[derive(Serialize)]
struct EvalOutput {
    plant_id: String,
    windows: usize,
    metrics: MetricReport,
    eur: [f64; 4],
    eur_frequency: [f64; 4],
    physics: PhysicsReport,
    clusters: Option<RegimeClusters>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn schema_from(path: Option<&Path>) -> Result<RawSchema> {
    Ok(match path {
        Some(p) => RawSchema::load(p)?,
        None => RawSchema::mswi(),
    })
}

fn synth(
    config: Option<PathBuf>,
    regimes: usize,
    shift: Option<PathBuf>,
    hours: usize,
    seed: u64,
    out: &Path,
    dump: Option<PathBuf>,
) -> Result<()> {
    let mut plant = match config {
        Some(p) => PlantConfig::load(&p)?,
        None => PlantConfig::with_regimes("synthetic", regimes),
    };
    if let Some(p) = shift {
        let spec: ShiftSpec = read_json(&p)?;
        let id = format!("{}-shifted", plant.plant_id);
        plant = shift_plant(&plant, &spec, &id)?;
    }
    if let Some(p) = dump {
        plant.save(&p)?;
    }
    let generated = gen_plant(&plant, hours, seed)?;
    generated.series.write_csv(&RawSchema::mswi(), out)?;
    log::info!("wrote {} rows to {}", generated.series.len(), out.display());
    Ok(())
}

fn prep(input: &Path, schema: Option<&Path>, out: &Path, seed: u64, spec: Option<&Path>, plant_id: &str) -> Result<()> {
    let schema = schema_from(schema)?;
    let series = load_csv(input, &schema, plant_id)?;
    let plan = SplitPlan {
        seed,
        ..SplitPlan::default()
    };
    let data = match spec {
        Some(p) => prepare_with_spec(series, &schema, &CleaningRules::default(), &TransformSpec::load(p)?, &plan)?,
        None => prepare(series, &schema, &CleaningRules::default(), &plan)?,
    };
    data.save(out)?;
    log::info!(
        "prepared {} rows: {} train and {} validation windows",
        data.rows(),
        data.split.train.len(),
        data.split.val.len()
    );
    Ok(())
}

fn train(data: &Path, config: Option<PathBuf>, out: &Path, desk: bool, only: Option<String>) -> Result<()> {
    let data = PreparedDataset::load(data)?;
    let run: RunConfig = match config {
        Some(p) => read_json(&p)?,
        None => RunConfig::default(),
    };
    let mut model = run.model.unwrap_or_else(|| if desk { ModelConfig::desk() } else { ModelConfig::default() });
    if let Some(name) = only {
        let kind = ExpertKind::parse(&name).ok_or_else(|| format!("unknown expert {name}"))?;
        model = model.single_expert(kind);
    }
    let cfg = run.train.unwrap_or_else(TrainConfig::source);
    let mut ck = Checkpoint::init(
        model,
        cfg.seed,
        data.spec.clone(),
        cfg.physics.clone(),
        &PlantConfig::default_scalars(),
    )?;
    let report = train_source(&mut ck, &data, &cfg)?;
    ck.save(out)?;
    report.history.write_csv(&out.join("history.csv"))?;
    write_json(&out.join("train_report.json"), &report)?;
    println!(
        "best epoch {} of {}: validation avg R2 {:.4}",
        report.best_epoch, report.epochs_run, report.best_val_avg_r2
    );
    Ok(())
}

fn transfer(source_ckpt: &Path, source_data: &Path, target_data: &Path, config: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut ck = Checkpoint::load(source_ckpt)?;
    let source = PreparedDataset::load(source_data)?;
    let target = PreparedDataset::load(target_data)?;
    let cfg = match config {
        Some(p) => read_json::<RunConfig>(&p)?.train.unwrap_or_else(TrainConfig::transfer),
        None => TrainConfig::transfer(),
    };
    let report = finetune_transfer(&mut ck, &source, &target, &cfg)?;
    ck.save(out)?;
    report.history.write_csv(&out.join("history.csv"))?;
    write_json(&out.join("shift.json"), &report.shift)?;
    write_json(&out.join("transfer_report.json"), &report)?;
    println!(
        "zero-shot avg R2 {:.4}, after transfer {:.4}; probe MMD {:.4} -> {:.4}",
        report.zero_shot.avg_r2, report.final_metrics.avg_r2, report.probe_mmd_before, report.probe_mmd_after
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let data = PreparedDataset::load(data)?;
    let ev = evaluate(&ck, &data, &data.split.val, &CpsiConfig::default(), 256)?;
    let clusters = match cluster_features(&data.raw, &RawSchema::mswi().column_names()) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("regime clustering skipped: {e}");
            None
        }
    };
    let output = EvalOutput {
        plant_id: data.plant_id.clone(),
        windows: data.split.val.len(),
        metrics: ev.report.clone(),
        eur: ev.eur,
        eur_frequency: eur_frequency(&ev.traces)?,
        physics: ev.physics,
        clusters,
    };
    write_json(out, &output)?;
    println!(
        "avg R2 {:.4}, avg MAE {:.4}, CPSI MAE {:.4}",
        output.metrics.avg_r2, output.metrics.avg_mae, output.metrics.cpsi.mae
    );
    Ok(())
}

fn serve(ckpt: &Path, data: Option<PathBuf>, schema: Option<PathBuf>, host: &str, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let schema = schema_from(schema.as_deref())?;
    let mut twin = Twin::new(ck, schema.clone(), TwinConfig::default())?;
    if let Some(dir) = data {
        let data = PreparedDataset::load(&dir)?;
        twin = twin.with_clusters(cluster_features(&data.raw, &schema.column_names())?);
    }
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(cpmoe::server::serve(Arc::new(twin), addr, static_dir))?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            config,
            regimes,
            shift,
            hours,
            seed,
            out,
            dump_config,
        } => synth(config, regimes, shift, hours, seed, &out, dump_config),
        Command::Prep {
            input,
            schema,
            out,
            seed,
            spec,
            plant_id,
        } => prep(&input, schema.as_deref(), &out, seed, spec.as_deref(), &plant_id),
        Command::Train {
            data,
            config,
            out,
            desk,
            only,
        } => train(&data, config, &out, desk, only),
        Command::Transfer {
            source_ckpt,
            source_data,
            target_data,
            config,
            out,
        } => transfer(&source_ckpt, &source_data, &target_data, config, &out),
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, &out),
        Command::Serve {
            ckpt,
            data,
            schema,
            port,
            host,
            static_dir,
        } => serve(&ckpt, data, schema, &host, port, static_dir),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
