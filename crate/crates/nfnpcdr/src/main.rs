//! Operator entry point: preprocessing, synthetic data generation, training,
//! evaluation, ablation sweeps, and inspection exports.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use clap::parser::ValueSource;
use serde::Deserialize;

use nfnpcdr::data::{
    build_task, parse_ratings_file, preprocess, read_preprocessed, write_preprocessed, Domain,
    DomainDataset, Preprocessed, SplitConfig, Task,
};
use nfnpcdr::error::{Error, Result};
use nfnpcdr::flows::FlowFamily;
use nfnpcdr::model::{IdMaps, Model, ModelConfig};
use nfnpcdr::synthdata::{self, SynthConfig};
use nfnpcdr::training::{
    estimate_entropy, evaluate, load_checkpoint, save_checkpoint, train, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "nfnpcdr",
    version,
    about = "Cold-start cross-domain rating prediction with flow-refined neural-process latents"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter, align, and split two rating files into a training directory
    Preprocess(PreprocessArgs),
    /// Generate a synthetic cross-domain dataset with planted interests
    GenSynth(GenSynthArgs),
    /// Train a model on a preprocessed directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on the cold-start test users
    Eval(EvalArgs),
    /// Train and evaluate the full model and its ablations over seeds
    Ablate(AblateArgs),
    /// Export soft assignments or latent entropies from a checkpoint
    Inspect(InspectArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Source-domain ratings file (user,item,rating,timestamp per line)
    #[arg(long)]
    source: PathBuf,
    /// Target-domain ratings file
    #[arg(long)]
    target: PathBuf,
    /// Fraction of overlapping users held out as cold-start test users
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSynthArgs {
    /// JSON file with generator settings (flags win over file keys)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    interests: usize,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items_per_domain: usize,
    #[arg(long, default_value_t = 0.8)]
    overlap: f64,
    #[arg(long, default_value_t = 20)]
    interactions_per_user: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

/// Model and optimization flags shared by train and ablate.
#[derive(Args, Clone)]
struct ModelFlags {
    /// JSON file whose keys mirror these flags (flags win)
    #[arg(long)]
    config: Option<PathBuf>,
    /// User/item embedding dimension
    #[arg(long, default_value_t = 10)]
    d1: usize,
    /// Latent dimension
    #[arg(long, default_value_t = 64)]
    d2: usize,
    /// Preference-pool dimension
    #[arg(long, default_value_t = 64)]
    d3: usize,
    /// Hidden width of fully connected layers
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Depth of the encoder networks
    #[arg(long, default_value_t = 3)]
    mlp_layers: usize,
    /// Modulated decoder depth
    #[arg(long, default_value_t = 3)]
    decoder_layers: usize,
    /// Flow family: planar, radial, coupling, or none
    #[arg(long, default_value = "planar")]
    flow: String,
    /// Flow steps K
    #[arg(long, default_value_t = 6)]
    flow_steps: usize,
    /// Preference-pool size N
    #[arg(long, default_value_t = 10)]
    pool_size: usize,
    /// Student's-t degrees of freedom for soft assignments
    #[arg(long, default_value_t = 1.0)]
    student_t_dof: f64,
    /// Clustering-loss weight
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Most-recent source interactions kept per support set
    #[arg(long, default_value_t = 20)]
    support_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Early-stopping patience on the holdout MAE
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Skip the flow refinement (equivalent to zero steps)
    #[arg(long, default_value_t = false)]
    no_flow: bool,
    /// Use the identity-network output directly, dropping the pool and its loss
    #[arg(long, default_value_t = false)]
    no_pool: bool,
    /// Replace decoder modulation with the neutral injection
    #[arg(long, default_value_t = false)]
    no_film: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed data directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Training log path (JSON lines); default: <out>.log
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Prior samples averaged per prediction
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo samples for the entropy estimates
    #[arg(long, default_value_t = 200)]
    entropy_samples: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Seeds, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Concurrent cells (requires the parallel build)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV output path; standard output when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// What to export: assignments or entropy
    #[arg(long)]
    what: String,
    /// Test tasks sampled for the assignments export
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    /// Monte Carlo samples for the entropy export
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

// ── config-file merging ─────────────────────────────────────────────

/// File keys mirror the training flags; unknown keys are rejected.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct ModelFileConfig {
    d1: Option<usize>,
    d2: Option<usize>,
    d3: Option<usize>,
    hidden: Option<usize>,
    mlp_layers: Option<usize>,
    decoder_layers: Option<usize>,
    flow: Option<String>,
    flow_steps: Option<usize>,
    pool_size: Option<usize>,
    student_t_dof: Option<f64>,
    lambda: Option<f64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    epochs: Option<usize>,
    support_len: Option<usize>,
    seed: Option<u64>,
    patience: Option<usize>,
    no_flow: Option<bool>,
    no_pool: Option<bool>,
    no_film: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct SynthFileConfig {
    interests: Option<usize>,
    users: Option<usize>,
    items_per_domain: Option<usize>,
    overlap: Option<f64>,
    interactions_per_user: Option<usize>,
    noise: Option<f64>,
    seed: Option<u64>,
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Apply file values beneath explicitly passed flags.
fn merge_model_flags(flags: &mut ModelFlags, m: &ArgMatches) -> Result<()> {
    let Some(path) = &flags.config else { return Ok(()) };
    let file: ModelFileConfig = read_json_config(path)?;
    macro_rules! merge {
        ($field:ident) => {
            if let Some(v) = file.$field {
                if !from_cli(m, stringify!($field)) {
                    flags.$field = v;
                }
            }
        };
    }
    merge!(d1);
    merge!(d2);
    merge!(d3);
    merge!(hidden);
    merge!(mlp_layers);
    merge!(decoder_layers);
    merge!(flow);
    merge!(flow_steps);
    merge!(pool_size);
    merge!(student_t_dof);
    merge!(lambda);
    merge!(batch_size);
    merge!(lr);
    merge!(epochs);
    merge!(support_len);
    merge!(seed);
    merge!(patience);
    merge!(no_flow);
    merge!(no_pool);
    merge!(no_film);
    Ok(())
}

fn merge_synth_flags(args: &mut GenSynthArgs, m: &ArgMatches) -> Result<()> {
    let Some(path) = &args.config else { return Ok(()) };
    let file: SynthFileConfig = read_json_config(path)?;
    macro_rules! merge {
        ($field:ident) => {
            if let Some(v) = file.$field {
                if !from_cli(m, stringify!($field)) {
                    args.$field = v;
                }
            }
        };
    }
    merge!(interests);
    merge!(users);
    merge!(items_per_domain);
    merge!(overlap);
    merge!(interactions_per_user);
    merge!(noise);
    merge!(seed);
    Ok(())
}

impl ModelFlags {
    fn model_config(&self) -> Result<ModelConfig> {
        let flow_family: FlowFamily = self
            .flow
            .parse()
            .map_err(|_| Error::Config(format!("unknown flow family {:?}", self.flow)))?;
        let cfg = ModelConfig {
            d1: self.d1,
            d2: self.d2,
            d3: self.d3,
            hidden: self.hidden,
            mlp_layers: self.mlp_layers,
            flow_family,
            flow_steps: if self.no_flow { 0 } else { self.flow_steps },
            pool_size: self.pool_size,
            student_t_dof: self.student_t_dof,
            decoder_layers: self.decoder_layers,
            normalize_rating: false,
            init_std: 0.1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lambda: self.lambda,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            epochs: self.epochs,
            support_length: self.support_len,
            seed: self.seed,
            patience: self.patience,
            no_flow: self.no_flow,
            no_pool: self.no_pool,
            no_film: self.no_film,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── shared helpers ──────────────────────────────────────────────────

fn build_tasks(prep: &Preprocessed, users: &[String], support_len: usize) -> Result<Vec<Task>> {
    users
        .iter()
        .map(|u| build_task(u, &prep.source, &prep.target, support_len))
        .collect()
}

fn fit(prep: &Preprocessed, model_cfg: &ModelConfig, train_cfg: &TrainConfig, mut on_epoch: impl FnMut(&nfnpcdr::training::EpochLog)) -> Result<Model> {
    let id_maps = IdMaps::from_datasets(&prep.source, &prep.target);
    let mut model = Model::new(model_cfg.clone(), id_maps, train_cfg.seed)?;
    let tasks = build_tasks(prep, &prep.split.train, train_cfg.support_length)?;
    train(&mut model, &tasks, train_cfg, &mut on_epoch)?;
    Ok(model)
}

// ── subcommands ─────────────────────────────────────────────────────

fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let source = DomainDataset::new(Domain::Source, parse_ratings_file(&args.source)?);
    let target = DomainDataset::new(Domain::Target, parse_ratings_file(&args.target)?);
    let split = SplitConfig {
        alpha: args.alpha,
        support_length: 20,
        seed: args.seed,
    };
    let prep = preprocess(source, target, &split)?;
    write_preprocessed(&args.out, &prep)?;
    println!(
        "source: {} users, {} items, {} ratings",
        prep.source.user_ids().len(),
        prep.source.item_ids().len(),
        prep.source.interactions.len()
    );
    println!(
        "target: {} users, {} items, {} ratings",
        prep.target.user_ids().len(),
        prep.target.item_ids().len(),
        prep.target.interactions.len()
    );
    println!(
        "overlap: {} users ({} train / {} test at alpha {})",
        prep.overlap.len(),
        prep.split.train.len(),
        prep.split.test.len(),
        prep.split.alpha
    );
    Ok(())
}

fn cmd_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        interests: args.interests,
        users: args.users,
        items_per_domain: args.items_per_domain,
        overlap: args.overlap,
        interactions_per_user: args.interactions_per_user,
        noise: args.noise,
        seed: args.seed,
    };
    let data = synthdata::generate(&cfg)?;
    synthdata::write_synth(&args.out, &data)?;
    let (s, t) = synthdata::as_datasets(&data);
    let prep = preprocess(
        s,
        t,
        &SplitConfig {
            alpha: 0.2,
            support_length: cfg.interactions_per_user,
            seed: cfg.seed,
        },
    )?;
    let oracle = synthdata::oracle_mae(&prep)?;
    println!("{}", serde_json::json!({ "oracle_mae": oracle }));
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let prep = read_preprocessed(&args.data)?;
    let model_cfg = args.model.model_config()?;
    let train_cfg = args.model.train_config()?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", args.out.display())));
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let model = fit(&prep, &model_cfg, &train_cfg, |line| {
        let json = serde_json::to_string(line).expect("serializable log line");
        let _ = writeln!(log_file, "{json}");
    })?;
    save_checkpoint(&model, &train_cfg, &args.out)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, train_cfg) = load_checkpoint(&args.ckpt)?;
    let prep = read_preprocessed(&args.data)?;
    let tasks = build_tasks(&prep, &prep.split.test, train_cfg.support_length)?;
    let mut report = evaluate(&model, &tasks, &train_cfg, args.samples, args.seed)?;
    let (h0, hk) = estimate_entropy(&model, &tasks, &train_cfg, args.entropy_samples, args.seed)?;
    report.entropy_z0 = Some(h0);
    report.entropy_zk = Some(hk);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

const ABLATION_VARIANTS: [&str; 5] = ["full", "no_flow", "no_pool", "no_film", "none_of_three"];

fn variant_configs(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    variant: &str,
    seed: u64,
) -> (ModelConfig, TrainConfig) {
    let mut m = base_model.clone();
    let mut t = base_train.clone();
    t.seed = seed;
    match variant {
        "no_flow" => {
            m.flow_steps = 0;
            t.no_flow = true;
        }
        "no_pool" => t.no_pool = true,
        "no_film" => t.no_film = true,
        "none_of_three" => {
            m.flow_steps = 0;
            t.no_flow = true;
            t.no_pool = true;
            t.no_film = true;
        }
        _ => {}
    }
    (m, t)
}

fn run_ablation_cell(
    prep: &Preprocessed,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    variant: &str,
    seed: u64,
) -> Result<(f64, f64)> {
    let (m_cfg, t_cfg) = variant_configs(base_model, base_train, variant, seed);
    let model = fit(prep, &m_cfg, &t_cfg, |_| {})?;
    let tasks = build_tasks(prep, &prep.split.test, t_cfg.support_length)?;
    let report = evaluate(&model, &tasks, &t_cfg, 1, seed)?;
    Ok((report.mae, report.rmse))
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let prep = read_preprocessed(&args.data)?;
    let base_model = args.model.model_config()?;
    let base_train = args.model.train_config()?;
    let cells: Vec<(u64, &str)> = args
        .seeds
        .iter()
        .flat_map(|&s| ABLATION_VARIANTS.iter().map(move |&v| (s, v)))
        .collect();
    let run = |_i: usize, cell: &(u64, &str)| -> (u64, String, Result<(f64, f64)>) {
        let (seed, variant) = *cell;
        (
            seed,
            variant.to_string(),
            run_ablation_cell(&prep, &base_model, &base_train, variant, seed),
        )
    };
    let results = if args.jobs > 1 {
        nfnpcdr::par::map_items(&cells, run)
    } else {
        nfnpcdr::par::map_sequential(&cells, run)
    };
    let mut csv = String::from("seed,variant,mae,rmse,status\n");
    for (seed, variant, outcome) in results {
        match outcome {
            Ok((mae, rmse)) => {
                csv.push_str(&format!("{seed},{variant},{mae},{rmse},ok\n"));
            }
            Err(e) => {
                eprintln!("cell seed={seed} variant={variant} failed: {e}");
                csv.push_str(&format!("{seed},{variant},,,error\n"));
            }
        }
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let (model, train_cfg) = load_checkpoint(&args.ckpt)?;
    let prep = read_preprocessed(&args.data)?;
    let tasks = build_tasks(&prep, &prep.split.test, train_cfg.support_length)?;
    match args.what.as_str() {
        "assignments" => {
            let mut out = String::from("user_id");
            for n in 0..model.config.pool_size {
                out.push_str(&format!(",a{n}"));
            }
            out.push('\n');
            for task in tasks.iter().take(args.tasks) {
                let mut tape = nfnpcdr::numkernel::Tape::new();
                let e = nfnpcdr::commonpref::identity_network(&mut tape, &model, &task.support)?;
                let a = nfnpcdr::commonpref::soft_assign(&mut tape, &model, e)?;
                out.push_str(&task.user_id);
                for v in tape.values(a) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
            print!("{out}");
        }
        "entropy" => {
            let (h0, hk) = estimate_entropy(&model, &tasks, &train_cfg, args.samples, args.seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "entropy_z0": h0,
                    "entropy_zK": hk,
                    "n_samples": args.samples,
                })
            );
        }
        other => {
            return Err(Error::Config(format!(
                "unknown inspection target {other:?} (expected assignments or entropy)"
            )));
        }
    }
    Ok(())
}

// ── entry point ─────────────────────────────────────────────────────

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) => 4,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run() -> Result<()> {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::Config(e.to_string()))?;
    match cli.cmd {
        Cmd::Preprocess(args) => cmd_preprocess(&args),
        Cmd::GenSynth(mut args) => {
            let sub = matches.subcommand().expect("subcommand present").1;
            merge_synth_flags(&mut args, sub)?;
            cmd_gen_synth(&args)
        }
        Cmd::Train(mut args) => {
            let sub = matches.subcommand().expect("subcommand present").1;
            merge_model_flags(&mut args.model, sub)?;
            cmd_train(&args)
        }
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::Ablate(mut args) => {
            let sub = matches.subcommand().expect("subcommand present").1;
            merge_model_flags(&mut args.model, sub)?;
            cmd_ablate(&args)
        }
        Cmd::Inspect(args) => cmd_inspect(&args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
