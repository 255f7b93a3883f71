//! The `vaem` command line: train, evaluate, saia, serve, export-pairs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use vaem::checkpoint::{AnyModel, Checkpoint};
use vaem::config::{train_model, RunConfig};
use vaem::data::{drop_half, Dataset, SchemaDoc};
use vaem::eval::{impute_hidden, imputation_rmse, pairplot_data, pairplot_export};
use vaem::model::{conditional_nll, is_nll, ModelKind, TabularModel};
use vaem::rng::derive_seed;
use vaem::saia::{self, CurveReport, SaiaConfig};

use crate::service::{self, AppState, ModelEntry, ServiceConfig};

pub const LOG_ENV: &str = "VAEM_LOG";

#[derive(Parser, Debug)]
#[command(name = "vaem", version, about = "Train, evaluate and serve mixed-type tabular generative models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model per seed and write checkpoints plus training logs.
    Train(TrainArgs),
    /// Score a checkpoint on held-out data.
    Evaluate(EvaluateArgs),
    /// Acquisition orderings and information curves.
    Saia(SaiaArgs),
    /// Host checkpoints behind the acquisition API.
    Serve(ServeArgs),
    /// Histogram and pairwise-sample tables for plotting.
    ExportPairs(ExportArgs),
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown model kind '{s}' (expected one of {})", names.join(", "))
    })
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub discriminator_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub k_prior: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub importance_samples: Option<usize>,
    /// Narrow networks for toy datasets.
    #[arg(long)]
    pub compact: bool,
    /// 3000 stage-one and 5000 stage-two epochs.
    #[arg(long)]
    pub paper_epochs: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Generate,
    Impute,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV with the checkpoint's columns.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Importance samples; the checkpoint's setting by default.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; next to the checkpoint by default.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderKind {
    Sing,
    Random,
}

#[derive(Args, Debug)]
pub struct SaiaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "sing")]
    pub order: OrderKind,
    #[arg(long, default_value_t = 10)]
    pub outer_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub inner_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub mc_samples: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// `path` or `id=path`; repeatable. The id defaults to the file stem.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long)]
    pub snapshot_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub outer_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub inner_samples: usize,
    #[arg(long, default_value_t = 100)]
    pub mc_samples: usize,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Column names; all columns by default.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<String>>,
    /// Ground-truth CSV exported alongside the model samples.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => Ok(evaluate(a)?),
        Command::Saia(a) => Ok(saia_cmd(a)?),
        Command::Serve(a) => Ok(serve(a)?),
        Command::ExportPairs(a) => Ok(export_pairs(a)?),
    }
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| path.display().to_string())
}

fn emit(path: &Path, value: &Value) -> anyhow::Result<()> {
    write_json(path, value)?;
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if a.paper_epochs {
        c.full_epochs();
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                c.$field = v;
            }
        )*};
    }
    set!(dataset, schema, model, stage1_epochs, stage2_epochs, discriminator_epochs, batch_size, learning_rate, k_prior, seeds, output_dir, importance_samples);
    c.compact |= a.compact;
    if c.dataset.as_os_str().is_empty() || c.schema.as_os_str().is_empty() {
        return Err(CliError::Usage("--dataset and --schema are required (directly or via --config)".into()));
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let config = resolve_run_config(&a)?;
    let doc = SchemaDoc::load(&config.schema)?;
    let data = Dataset::load_csv(&config.dataset, &doc)?;
    let hash = config.hash()?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let start = Instant::now();
        let model = train_model(&config, &data, seed)?;
        let stem = format!("{}-seed{seed}", config.model.name());
        let ck_path = config.output_dir.join(format!("{stem}.json"));
        let log_path = config.output_dir.join(format!("{stem}.log.json"));
        let histories = match &model {
            AnyModel::Vaem(m) => json!({
                "stage1_elbo": m.meta.stage1_history,
                "stage2_elbo": m.meta.stage2_history,
                "discriminator_loss": m.meta.discriminator_history,
                "combined_elbo_zero_init": m.meta.combined_elbo_zero_init,
                "combined_elbo_trained": m.meta.combined_elbo_trained,
            }),
            AnyModel::Flat(m) => json!({
                "elbo": m.meta.history,
                "discriminator_loss": m.meta.discriminator_history,
            }),
        };
        let ck = Checkpoint::new(model, config.clone(), seed)?;
        std::fs::create_dir_all(&config.output_dir).with_context(|| config.output_dir.display().to_string())?;
        ck.save(&ck_path)?;
        write_json(
            &log_path,
            &json!({
                "config_hash": hash,
                "model_kind": config.model.name(),
                "seed": seed,
                "wall_clock_secs": start.elapsed().as_secs_f64(),
                "history": histories,
            }),
        )?;
        log::info!("wrote {}", ck_path.display());
        written.push(json!({ "seed": seed, "checkpoint": ck_path, "log": log_path }));
    }
    println!("{}", serde_json::to_string_pretty(&json!({ "config_hash": hash, "runs": written }))?);
    Ok(())
}

fn load_for(ck: &Checkpoint, path: &Path) -> anyhow::Result<Dataset> {
    let doc = ck.model.schema().to_doc();
    Dataset::load_csv(path, &doc).with_context(|| format!("reading {} against the checkpoint schema", path.display()))
}

fn default_output(checkpoint: &Path, suffix: &str) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    checkpoint.with_file_name(format!("{stem}.{suffix}.json"))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_for(&ck, &a.data)?;
    let samples = a.samples.unwrap_or(ck.config.importance_samples);
    let start = Instant::now();
    let mut report = json!({
        "config_hash": ck.config_hash,
        "model_kind": ck.model.kind().name(),
        "dataset": a.data,
        "rows": data.rows(),
        "seed": a.seed,
        "importance_samples": samples,
    });
    match a.mode {
        EvalMode::Generate => {
            report["mode"] = json!("generate");
            report["generation_nll"] = json!(is_nll(&ck.model, &data, samples, derive_seed(a.seed, &[0x61]))?);
        }
        EvalMode::Impute => {
            let observed = drop_half(data.mask(), derive_seed(a.seed, &[0x62]));
            report["mode"] = json!("impute");
            report["missing_rate"] = json!(0.5);
            report["conditional_nll"] =
                json!(conditional_nll(&ck.model, &data, &observed, samples, derive_seed(a.seed, &[0x63]))?);
            let preds = impute_hidden(&ck.model, &data, &observed)?;
            report["imputation_rmse"] = json!(imputation_rmse(&data, &preds, &observed)?);
        }
    }
    report["wall_clock_secs"] = json!(start.elapsed().as_secs_f64());
    let suffix = match a.mode {
        EvalMode::Generate => "generate",
        EvalMode::Impute => "impute",
    };
    emit(&a.output.clone().unwrap_or_else(|| default_output(&a.checkpoint, suffix)), &report)
}

/// Pointwise mean of equally long curves.
pub fn mean_curve(curves: &[CurveReport]) -> anyhow::Result<(Vec<f64>, f64)> {
    let Some(first) = curves.first() else {
        bail!("no curves to average");
    };
    let n = first.rmse.len();
    if curves.iter().any(|c| c.rmse.len() != n) {
        bail!("curves differ in length");
    }
    let mean: Vec<f64> = (0..n)
        .map(|i| curves.iter().map(|c| c.rmse[i]).sum::<f64>() / curves.len() as f64)
        .collect();
    let area = saia::auic_values(&mean)?;
    Ok((mean, area))
}

fn saia_cmd(a: SaiaArgs) -> anyhow::Result<()> {
    if a.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_for(&ck, &a.data)?;
    let config = SaiaConfig {
        outer_samples: a.outer_samples,
        inner_samples: a.inner_samples,
        mc_samples: a.mc_samples,
    };
    let mut curves = Vec::with_capacity(a.seeds.len());
    for &seed in &a.seeds {
        let order = match a.order {
            OrderKind::Sing => saia::sing_ordering(&ck.model, &data, &config, seed)?,
            OrderKind::Random => saia::random_ordering(&ck.model, seed),
        };
        let curve = saia::information_curve(&ck.model, &data, &order, config.mc_samples, seed)?;
        log::info!("seed {seed}: order {order:?}");
        curves.push(CurveReport::new(curve)?);
    }
    let (mean, auic) = mean_curve(&curves)?;
    let names: Vec<&str> = ck.model.schema().columns.iter().map(|c| c.name.as_str()).collect();
    let report = json!({
        "config_hash": ck.config_hash,
        "model_kind": ck.model.kind().name(),
        "order_kind": match a.order { OrderKind::Sing => "sing", OrderKind::Random => "random" },
        "columns": names,
        "target": names[ck.model.schema().target()],
        "curves": curves,
        "mean": { "steps": curves[0].steps, "rmse": mean, "auic": auic },
    });
    emit(&a.output.clone().unwrap_or_else(|| default_output(&a.checkpoint, "saia")), &report)
}

pub fn parse_checkpoint_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((id, path)) if !id.is_empty() => (id.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
            (id, p)
        }
    }
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut models = Vec::with_capacity(a.checkpoints.len());
    for arg in &a.checkpoints {
        let (id, path) = parse_checkpoint_arg(arg);
        let ck = Checkpoint::load(&path)?;
        log::info!("model '{id}' from {}", path.display());
        models.push(ModelEntry::from_checkpoint(id, ck));
    }
    let config = ServiceConfig {
        saia: SaiaConfig {
            outer_samples: a.outer_samples,
            inner_samples: a.inner_samples,
            mc_samples: a.mc_samples,
        },
        snapshot_dir: a.snapshot_dir.clone(),
        seed: a.seed,
    };
    let state = AppState::new(models, config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        log::info!("listening on {}", listener.local_addr()?);
        service::serve(state, listener, shutdown_signal()).await?;
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn export_pairs(a: ExportArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let schema = ck.model.schema();
    let dims: Vec<usize> = match &a.dims {
        None => (0..schema.width()).collect(),
        Some(names) => names
            .iter()
            .map(|n| schema.index_of(n).with_context(|| format!("unknown column '{n}'")))
            .collect::<anyhow::Result<_>>()?,
    };
    let model_plot = pairplot_export(&ck.model, a.samples, &dims, a.seed)?;
    let data_plot = match &a.data {
        Some(p) => Some(pairplot_data(&load_for(&ck, p)?, &dims)?),
        None => None,
    };
    write_json(
        &a.output,
        &json!({
            "config_hash": ck.config_hash,
            "model_kind": ck.model.kind().name(),
            "samples": a.samples,
            "seed": a.seed,
            "model": model_plot,
            "data": data_plot,
        }),
    )?;
    println!("{}", a.output.display());
    Ok(())
}
