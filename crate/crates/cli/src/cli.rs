//! `ppn` subcommands.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ppn_core::archive::ModelArchive;
use ppn_core::data::{default_subtypes, generate_synthetic, load_dataset, save_dataset, split, DataFormat, Dataset, SynthConfig};
use ppn_core::interpretation::{build_cohorts, prototype_cards_with, write_cohort_csv, write_membership_csv};
use ppn_core::training::{evaluate, run_missingness_experiment, train, write_experiment_csv, write_metrics_csv, MaskAxis, TrainConfig};

use crate::api::{parse_record, PredictResponse};
use crate::service::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "ppn", version, about = "Train, inspect and serve progressive prototypical network models")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted subtypes and split it.
    Synth(SynthArgs),
    /// Train a model and write its archive and per-epoch metrics.
    Train(TrainArgs),
    /// Print AUPRC and AUROC of a model on a dataset.
    Eval(EvalArgs),
    /// Score one patient and print the prediction as JSON.
    Predict(PredictArgs),
    /// AUPRC under thinned visits or observations.
    AblateMissing(AblateArgs),
    /// Export prototype and cohort tables.
    Cohorts(CohortsArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FileFormat {
    Jsonl,
    Csv,
}

impl FileFormat {
    fn data_format(self) -> DataFormat {
        match self {
            FileFormat::Jsonl => DataFormat::Jsonl,
            FileFormat::Csv => DataFormat::Csv,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            FileFormat::Jsonl => "jsonl",
            FileFormat::Csv => "csv",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Axis {
    Visit,
    Observation,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives all, train, val and test files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub patients: usize,
    #[arg(long, default_value_t = 4)]
    pub t_min: usize,
    #[arg(long, default_value_t = 30)]
    pub t_max: usize,
    #[arg(long, default_value_t = 0.8)]
    pub observation_prob: f64,
    #[arg(long, value_enum, default_value_t = FileFormat::Jsonl)]
    pub format: FileFormat,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.15, 0.15])]
    pub split: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file (`# ppn-config-v1` header, then `key = value` lines).
    /// Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Model archive to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV; defaults to the archive path with `.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Print a JSON object instead of two lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON file holding one patient object.
    #[arg(long, conflicts_with_all = ["data", "id"], required_unless_present = "data")]
    pub patient: Option<PathBuf>,
    /// Dataset file to take the patient from (with --id).
    #[arg(long, requires = "id")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub id: Option<String>,
    /// Include the visit-by-visit trajectory.
    #[arg(long)]
    pub trajectory: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw test dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Axis::Visit)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.75, 0.5, 0.25])]
    pub rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// CSV table to write (`rate,mean_auprc,std_auprc`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CohortsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Patients to group into cohorts.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for `prototypes.csv` and `membership.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset to browse through the patient and cohort endpoints.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path, DataFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelArchive> {
    ModelArchive::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::AblateMissing(a) => ablate(a),
        Command::Cohorts(a) => cohorts(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_patients: a.patients,
        t_min: a.t_min,
        t_max: a.t_max,
        observation_prob: a.observation_prob,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&default_subtypes(), &cfg)?;
    let (tr, va, te) = split(&ds, [a.split[0], a.split[1], a.split[2]], a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, part) in [("all", &ds), ("train", &tr), ("val", &va), ("test", &te)] {
        let path = a.out.join(format!("{name}.{}", a.format.extension()));
        save_dataset(part, &path, a.format.data_format())?;
    }
    println!(
        "wrote {} patients ({} train, {} val, {} test) to {}",
        ds.len(),
        tr.len(),
        va.len(),
        te.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let (tr, va) = (load(&a.train)?, load(&a.val)?);
    let out = train(&cfg, &tr, &va)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    let archive = ModelArchive::new(out.model, Some(cfg)).with_sources(&tr)?;
    archive.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let metrics = a.metrics.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".metrics.csv");
        PathBuf::from(s)
    });
    write_metrics_csv(&metrics, &out.report.loss_curve)?;
    println!(
        "best epoch {}: val AUPRC {:.4}, AUROC {:.4}; model {}, metrics {}",
        out.report.best_epoch,
        out.report.auprc,
        out.report.auroc,
        a.out.display(),
        metrics.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?.model;
    let (auprc, auroc) = evaluate(&model, &load(&a.data)?)?;
    if a.json {
        println!("{}", serde_json::json!({ "auprc": auprc, "auroc": auroc }));
    } else {
        println!("AUPRC {auprc:.6}\nAUROC {auroc:.6}");
    }
    Ok(())
}

/// What `ppn predict` prints, without printing it.
pub fn predict_response(a: &PredictArgs) -> Result<PredictResponse> {
    let model = load_model(&a.model)?.model;
    let rec = match (&a.patient, &a.data, &a.id) {
        (Some(p), _, _) => {
            let body = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            parse_record(&model, &body).with_context(|| format!("invalid patient in {}", p.display()))?
        }
        (None, Some(d), Some(id)) => match load(d)?.get(id) {
            Some(r) => r.clone(),
            None => bail!("patient `{id}` is not in {}", d.display()),
        },
        _ => bail!("give --patient, or --data with --id"),
    };
    Ok(PredictResponse::build(&model, &rec, a.trajectory)?)
}

fn predict(a: PredictArgs) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&predict_response(&a)?)?);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let model = load_model(&a.model)?.model;
    let axis = match a.axis {
        Axis::Visit => MaskAxis::Visit,
        Axis::Observation => MaskAxis::Observation,
    };
    let rows = run_missingness_experiment(&model, &load(&a.data)?, &a.rates, axis, &a.seeds)?;
    println!("rate  mean_auprc  std_auprc");
    for r in &rows {
        println!("{:<5} {:<11.4} {:.4}", r.rate, r.mean_auprc, r.std_auprc);
    }
    if let Some(out) = &a.out {
        write_experiment_csv(out, &rows)?;
    }
    Ok(())
}

fn cohorts(a: CohortsArgs) -> Result<()> {
    let archive = load_model(&a.model)?;
    let ds = load(&a.data)?;
    let model = &archive.model;
    let cohorts = build_cohorts(model, &ds)?;
    let mut sources = archive.sources.clone();
    sources.extend(ds.records.iter().cloned());
    let cards = prototype_cards_with(model, &sources, Some(&cohorts))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_cohort_csv(&a.out.join("prototypes.csv"), &model.static_names, &cards)?;
    write_membership_csv(&a.out.join("membership.csv"), &ds, &model.score_dataset(&ds)?)?;
    for c in &cohorts {
        println!("cohort {}: {} patients", c.index, c.stats.size);
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let archive = load_model(&a.model)?;
    let ds = a.data.as_deref().map(load).transpose()?;
    let state = AppState::new(archive, ds)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("invalid --host/--port")?;
    tokio::runtime::Runtime::new()?.block_on(serve(state, addr))
}
