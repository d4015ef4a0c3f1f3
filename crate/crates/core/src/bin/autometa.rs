use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use autometa::config::expand_config_flag;
use autometa::data::{generate_synthetic_glyphs, load_dataset, FewShotSuite};
use autometa::meta::{evaluate_meta, sample_eval_episodes, trace_csv, MetaConfig, OuterSchedule};
use autometa::optim::OptimKind;
use autometa::report::emit_report;
use autometa::search::{final_train, resume_search, train_and_evaluate, FinalOutcome, SavedModel, SearchConfig, SearchState};
use autometa::{compile_network, CellSpec, Error, Result};

/// Progressive cell search over Reptile meta-learners.
///
/// Every flag can also be given in a `--config FILE` of `key = value` lines;
/// flags on the command line win.
#[derive(Parser)]
#[command(name = "autometa", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the beam search, then retrain and evaluate the best cell.
    Search(SearchArgs),
    /// Meta-train one cell and save the model.
    Train(TrainArgs),
    /// Evaluate a saved model on meta-test episodes.
    Eval(EvalArgs),
    /// Write report files from a search checkpoint.
    Report(ReportArgs),
    /// Generate a synthetic glyph dataset in FSDS format.
    GenData(GenDataArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// FSDS file, or `synthetic` for the built-in glyph set.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// Seed of the synthetic dataset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Classes used for meta-training; the rest are meta-test. Defaults to 80%.
    #[arg(long)]
    train_classes: Option<usize>,
}

impl DataArgs {
    fn suite(&self) -> Result<FewShotSuite> {
        if self.dataset == "synthetic" {
            let suite = FewShotSuite::synthetic(self.data_seed)?;
            return match self.train_classes {
                None => Ok(suite),
                Some(n) => {
                    let mut all = suite.meta_train;
                    all.classes.extend(suite.meta_test.classes);
                    FewShotSuite::split(all, n)
                }
            };
        }
        let ds = load_dataset(&self.dataset)?;
        let n = self.train_classes.unwrap_or(ds.n_classes() * 4 / 5);
        FewShotSuite::split(ds, n)
    }
}

#[derive(Args, Clone)]
struct MetaArgs {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Support images per class during meta-training (defaults to k-shot).
    #[arg(long)]
    train_shots: Option<usize>,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 8)]
    inner_iterations: usize,
    #[arg(long, default_value_t = 10)]
    inner_batch: usize,
    #[arg(long, default_value_t = 0.001)]
    inner_lr: f64,
    /// `adam` or `sgd`.
    #[arg(long, default_value = "adam", value_parser = parse_optim)]
    inner_optimizer: OptimKind,
    #[arg(long, default_value_t = 5)]
    meta_batch: usize,
    #[arg(long, default_value_t = 1.0)]
    outer_step: f64,
    /// `linear` or `constant`.
    #[arg(long, default_value = "linear", value_parser = parse_schedule)]
    outer_schedule: OuterSchedule,
    #[arg(long, default_value_t = 1000)]
    outer_iterations: usize,
    #[arg(long, default_value_t = 8)]
    eval_inner_iterations: usize,
    /// Evaluate with batch statistics of the query set.
    #[arg(long)]
    transduction: bool,
    /// Outer iterations between trace rows, 0 for none. Search candidates
    /// are never traced.
    #[arg(long, default_value_t = 100)]
    eval_interval: usize,
}

fn parse_optim(s: &str) -> std::result::Result<OptimKind, String> {
    match s {
        "adam" => Ok(OptimKind::Adam),
        "sgd" => Ok(OptimKind::Sgd),
        _ => Err(format!("unknown optimizer {s:?}")),
    }
}

fn parse_schedule(s: &str) -> std::result::Result<OuterSchedule, String> {
    match s {
        "linear" => Ok(OuterSchedule::Linear),
        "constant" => Ok(OuterSchedule::Constant),
        _ => Err(format!("unknown schedule {s:?}")),
    }
}

impl MetaArgs {
    fn config(&self) -> MetaConfig {
        MetaConfig {
            inner_iterations: self.inner_iterations,
            inner_batch: self.inner_batch,
            inner_lr: self.inner_lr,
            inner_optimizer: self.inner_optimizer,
            meta_batch: self.meta_batch,
            outer_step: self.outer_step,
            outer_schedule: self.outer_schedule,
            outer_iterations: self.outer_iterations,
            transduction: self.transduction,
            eval_inner_iterations: self.eval_inner_iterations,
            n_way: self.n_way,
            k_shot: self.k_shot,
            train_shots: self.train_shots,
            query_per_class: self.query,
            eval_interval: self.eval_interval,
        }
    }
}

#[derive(Args, Clone)]
struct ArchArgs {
    #[arg(long, default_value_t = 4)]
    filters: usize,
    /// Extra cells per stage.
    #[arg(long, default_value_t = 0)]
    unroll: usize,
    /// Filter multiplier between stages (1 or 2).
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 2)]
    stages: usize,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 5)]
    blocks: usize,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Evaluation episodes per candidate.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 200)]
    surrogate_epochs: usize,
    #[arg(long, default_value_t = 2000)]
    final_outer_iterations: usize,
    #[arg(long, default_value_t = 200)]
    final_episodes: usize,
    /// Stop after the search, without retraining the best cell.
    #[arg(long)]
    skip_final: bool,
    /// Continue from `OUT/state.json` if it exists; its saved settings win.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    meta: MetaArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Cell as JSON, e.g. `[[0,"conv3",1,"max3"]]`.
    #[arg(long)]
    cell: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Evaluation episodes after training.
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    meta: MetaArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file written by `train` or `search`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the saved transduction setting.
    #[arg(long)]
    transduction: Option<bool>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))
}

fn save_outcome(dir: &Path, outcome: &FinalOutcome, meta: &MetaConfig) -> Result<()> {
    write(&dir.join("trace.csv"), &trace_csv(&outcome.trace))?;
    write(&dir.join("final.json"), &serde_json::to_string_pretty(&outcome.report)?)?;
    SavedModel::new(outcome.spec.clone(), meta.clone(), outcome.report.seed, outcome.state.clone()).save(dir.join("model.json"))
}

fn search(args: SearchArgs) -> Result<()> {
    mkdir(&args.out)?;
    let suite = args.data.suite()?;
    let checkpoint = args.out.join("state.json");
    let mut state = if args.resume && checkpoint.exists() {
        let s = SearchState::load(&checkpoint)?;
        eprintln!("resuming after stage {}", s.stage);
        s
    } else {
        SearchState::new(SearchConfig {
            max_blocks: args.blocks,
            beam: args.beam,
            filters: args.arch.filters,
            unroll: args.arch.unroll,
            feature_scale_rate: args.arch.scale,
            n_stages: args.arch.stages,
            meta: MetaConfig {
                eval_interval: 0,
                ..args.meta.config()
            },
            eval_episodes: args.episodes,
            global_seed: args.seed,
            workers: args.workers,
            surrogate_epochs: args.surrogate_epochs,
            final_outer_iterations: args.final_outer_iterations,
            final_eval_episodes: args.final_episodes,
            final_trace_interval: args.meta.eval_interval,
        })?
    };
    let started = Instant::now();
    resume_search(&suite, &mut state, |s| {
        let best = s.best().map(|b| format!("{} {:.4}", b.cell.key(), b.score)).unwrap_or_default();
        eprintln!(
            "stage {}/{} done in {:.0}s, {} trained, {} failed, best {best}",
            s.stage,
            s.config.max_blocks,
            started.elapsed().as_secs_f64(),
            s.history.len(),
            s.failures.len()
        );
        s.save(&checkpoint)
    })?;
    let best = state.best().ok_or_else(|| Error::Config("every candidate failed".into()))?.cell.clone();
    let final_report = if args.skip_final {
        None
    } else {
        eprintln!("final training of {}", best.key());
        let outcome = final_train(&best, &state.config, &suite)?;
        let meta = MetaConfig {
            outer_iterations: state.config.final_outer_iterations,
            eval_interval: state.config.final_trace_interval,
            ..state.config.meta.clone()
        };
        save_outcome(&args.out, &outcome, &meta)?;
        Some(outcome.report)
    };
    let report = emit_report(&state, final_report, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.cell).map_err(|e| Error::Config(format!("{}: {e}", args.cell.display())))?;
    let cell = CellSpec::from_json(&text)?;
    let suite = args.data.suite()?;
    let meta = args.meta.config();
    let config = SearchConfig {
        filters: args.arch.filters,
        unroll: args.arch.unroll,
        feature_scale_rate: args.arch.scale,
        n_stages: args.arch.stages,
        meta: meta.clone(),
        ..SearchConfig::default()
    };
    mkdir(&args.out)?;
    let outcome = train_and_evaluate(&cell, &config, &meta, args.episodes, &suite, args.seed)?;
    save_outcome(&args.out, &outcome, &meta)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = SavedModel::load(&args.params)?;
    let suite = args.data.suite()?;
    let meta = MetaConfig {
        transduction: args.transduction.unwrap_or(model.meta.transduction),
        ..model.meta.clone()
    };
    let (net, _) = compile_network(&model.spec, model.seed)?;
    let episodes = sample_eval_episodes(&suite.meta_test, &meta, args.episodes, args.seed)?;
    let (accuracy, ci95) = evaluate_meta(&net, &model.state, &episodes, &meta, args.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "episodes": args.episodes,
            "transduction": meta.transduction,
            "accuracy": accuracy,
            "ci95": ci95,
        })
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let state = SearchState::load(&args.state)?;
    let final_path = args.state.with_file_name("final.json");
    let final_report = match std::fs::read_to_string(&final_path) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let report = emit_report(&state, final_report, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let ds = generate_synthetic_glyphs(args.seed, args.classes, args.per_class, args.size)?;
    ds.save(&args.out)?;
    eprintln!("wrote {} classes of {}x{} to {}", ds.n_classes(), ds.height, ds.width, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let argv = match expand_config_flag(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    let result = match cli.command {
        Command::Search(a) => search(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
