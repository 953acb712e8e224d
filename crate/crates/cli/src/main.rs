mod report;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use coordet::em_engine::{read_result_scores, LoopSetting};
use coordet::event_data::{
    load_dataset_with, load_labels, save_dataset, save_labels, AccountRegistry, Dataset, Format, IngestOptions, Labels,
};
use coordet::hawkes_synth::{make_planted_scenario_with, ScenarioConfig};
use coordet::knowledge_graph::FilterTag;
use coordet::pipeline::{build_graph, detect, evaluate_scores, prepare, pretrain, RunConfig};
use coordet::seq_model::SeqModelParams;

use report::{print_metrics, write_metrics_csv, SweepRow};
use rundir::RunDir;

#[derive(Parser)]
#[command(
    name = "coordet",
    version,
    about = "Find coordinated account groups in timestamped activity cascades"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a planted-group Hawkes dataset.
    Synth(SynthArgs),
    /// Validate and normalize an event file.
    Ingest(IngestArgs),
    /// Build the account co-activity graph.
    BuildGraph(GraphArgs),
    /// Fit the sequence model alone.
    Pretrain(PretrainArgs),
    /// Run the full pipeline and write a run directory.
    Detect(DetectArgs),
    /// Score a result file against ground-truth labels.
    Eval(EvalArgs),
    /// Repeat detection over EM loop counts and seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Normal accounts.
    #[arg(long, default_value_t = 80)]
    normal: usize,
    /// Coordinated accounts (at least 2).
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(2..))]
    coord: u64,
    /// Coordination strength; 0 makes the planted group indistinguishable.
    #[arg(long, default_value_t = 2.0)]
    strength: f64,
    #[arg(long, default_value_t = 300)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Event file (JSON lines).
    #[arg(long, default_value = "synth.jsonl")]
    out: PathBuf,
    /// Account label file.
    #[arg(long, default_value = "labels.csv")]
    labels: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Event file, `.jsonl` or `.csv`.
    #[arg(long)]
    input: PathBuf,
    /// Overrides the format implied by the extension.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Drop accounts with fewer events than this.
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let format = match self.format {
            Some(FormatArg::Jsonl) => Format::Jsonl,
            Some(FormatArg::Csv) => Format::Csv,
            None => Format::from_path(&self.input),
        };
        let opts = IngestOptions {
            min_account_count: self.min_count,
        };
        load_dataset_with(&self.input, format, &opts).with_context(|| format!("loading {}", self.input.display()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterKind {
    None,
    Power,
    /// Temporal-logic overlap filter.
    Tl,
}

#[derive(Args)]
struct FilterArgs {
    /// Graph filter [default: power with p = 3].
    #[arg(long, value_enum)]
    filter: Option<FilterKind>,
    /// Exponent of the power filter.
    #[arg(long, default_value_t = 3.0)]
    p: f64,
    /// Minimum active-interval overlap in seconds for the temporal-logic filter.
    #[arg(long, default_value_t = 43200.0)]
    c: f64,
}

impl FilterArgs {
    fn tag(&self) -> Option<FilterTag> {
        self.filter.map(|k| match k {
            FilterKind::None => FilterTag::None,
            FilterKind::Power => FilterTag::Power(self.p),
            FilterKind::Tl => FilterTag::TemporalLogic(self.c),
        })
    }
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, default_value = "graph.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Normalized JSON-lines output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Embedding width 64, 32 mixture components, batches of 256.
    Full,
    /// Embedding width 8, 4 components; suited to a few hundred sequences.
    Compact,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum pretraining epochs [default: 50].
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => match self.preset {
                Preset::Full => RunConfig::default(),
                Preset::Compact => RunConfig::compact(),
            },
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(e) = self.epochs {
            cfg.pretrain.max_epochs = e;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint (JSON).
    #[arg(long, default_value = "pretrained.json")]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    filter: FilterArgs,
    /// Pretrained checkpoint; skips pretraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// EM rounds: 1, 2, 3, ... or `auto` to choose among 1-3 on validation data.
    #[arg(long)]
    loops: Option<String>,
    /// A single E-step on the initialization, no parameter updates.
    #[arg(long)]
    estep_only: bool,
    /// Labels to clamp (semi-supervised); excluded from evaluation.
    #[arg(long)]
    revealed: Option<PathBuf>,
    /// Ground truth; when given, metrics are written.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    groups: Option<usize>,
    /// Weight of the group-assignment term in the M-step.
    #[arg(long)]
    lambda: Option<f64>,
    /// Exact run directory; defaults to `<runs-root>/<timestamp>-<tag>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
    #[arg(long, default_value = "detect")]
    tag: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Result CSV with `account,score,label,group`.
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Accounts to leave out, e.g. the revealed labels.
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long)]
    labels: PathBuf,
    /// EM loop counts to try.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    loops: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Directory for `runs.csv` and `summary.csv`.
    #[arg(long, default_value = "sweep")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::ValueValidation, msg)
        .exit()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = ScenarioConfig {
        n_normal: a.normal,
        n_coord: a.coord as usize,
        strength: a.strength,
        n_sequences: a.sequences,
        ..ScenarioConfig::default()
    };
    let (_, data) = make_planted_scenario_with(&cfg, a.seed).context("simulating scenario")?;
    save_dataset(&data, &a.out, Format::Jsonl)?;
    let labels = data.labels.as_ref().expect("planted labels");
    save_labels(labels, &data.registry, &a.labels)?;
    println!(
        "wrote {} sequences, {} events, {} accounts to {} and labels to {}",
        data.sequences.len(),
        data.num_events(),
        data.num_accounts(),
        a.out.display(),
        a.labels.display()
    );
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let data = a.data.load()?;
    save_dataset(&data, &a.out, Format::Jsonl)?;
    println!(
        "{} sequences, {} events, {} accounts -> {}",
        data.sequences.len(),
        data.num_events(),
        data.num_accounts(),
        a.out.display()
    );
    Ok(())
}

fn cmd_build_graph(a: GraphArgs) -> Result<()> {
    let data = a.data.load()?;
    let tag = a.filter.tag().unwrap_or(FilterTag::Power(3.0));
    let g = build_graph(&data, tag)?;
    g.save_csv(&data.registry, &a.out)?;
    println!(
        "{} accounts, {} edges, filter {} -> {}",
        g.n(),
        g.edges().len(),
        tag,
        a.out.display()
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let data = a.data.load()?;
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let prep = prepare(&data, &cfg)?;
    let (params, report) = pretrain(&data, &prep, &cfg).context("stage pretrain failed")?;
    for e in &report.history {
        match e.valid_nll {
            Some(v) => println!("epoch {:3}  train nll {:.4}  valid nll {:.4}", e.epoch, e.train_nll, v),
            None => println!("epoch {:3}  train nll {:.4}", e.epoch, e.train_nll),
        }
    }
    params.save(&a.out)?;
    println!("kept epoch {} -> {}", report.best_epoch, a.out.display());
    Ok(())
}

fn load_checkpoint(path: &Path, data: &Dataset) -> Result<SeqModelParams> {
    let p = SeqModelParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if p.config.n_accounts != data.num_accounts() {
        bail!(
            "checkpoint {} covers {} accounts but the dataset has {}",
            path.display(),
            p.config.n_accounts,
            data.num_accounts()
        );
    }
    Ok(p)
}

fn detect_config(a: &DetectArgs) -> Result<RunConfig> {
    let mut cfg = a.config.resolve()?;
    if let Some(tag) = a.filter.tag() {
        cfg.filter = tag;
    }
    if let Some(l) = &a.loops {
        cfg.em.loops = l.parse().unwrap_or_else(|e| usage_error(e));
    }
    if a.estep_only {
        cfg.em.estep_only = true;
    }
    if let Some(m) = a.groups {
        cfg.groups = m;
        cfg.group_candidates.clear();
    }
    if let Some(l) = a.lambda {
        cfg.em.lambda = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let data = a.data.load()?;
    let cfg = detect_config(&a)?;
    let run = match &a.run_dir {
        Some(dir) => RunDir::at(dir)?,
        None => RunDir::create(&a.runs_root, &a.tag)?,
    };
    run.write_config(&cfg)?;

    let prep = prepare(&data, &cfg).context("stage prepare failed")?;
    let pretrained = match &a.checkpoint {
        Some(path) => load_checkpoint(path, &data)?,
        None => {
            let (p, report) = pretrain(&data, &prep, &cfg).context("stage pretrain failed")?;
            eprintln!(
                "pretrained for {} epochs, kept epoch {}",
                report.history.len(),
                report.best_epoch
            );
            p
        }
    };
    pretrained.save(&run.checkpoint("pretrained.json"))?;

    let graph = build_graph(&data, cfg.filter).context("stage build-graph failed")?;
    graph.save_csv(&data.registry, &run.graph())?;

    let revealed = match &a.revealed {
        Some(path) => Some(load_labels(path, &data.registry).with_context(|| format!("loading {}", path.display()))?),
        None => None,
    };
    let outcome = detect(&prep, &graph, &pretrained, &cfg, revealed.as_ref()).context("stage detect failed")?;
    outcome.model.save(&run.checkpoint("joint.json"))?;
    outcome.result.write_q_csv(&data.registry, &run.q_matrix())?;
    outcome.result.write_csv(&data.registry, &run.result())?;
    run.write_rounds(&outcome.rounds)?;

    if let Some(path) = &a.labels {
        let truth = load_labels(path, &data.registry).with_context(|| format!("loading {}", path.display()))?;
        let m = evaluate_scores(&outcome.result.scores, &truth, revealed.as_ref(), cfg.em.threshold)
            .context("stage eval failed")?;
        write_metrics_csv(&run.metrics(), &m)?;
        print_metrics(&m);
    }
    println!("{}", run.path().display());
    Ok(())
}

fn registry_from_result(path: &Path) -> Result<AccountRegistry> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut reg = AccountRegistry::new();
    for rec in r.records() {
        let rec = rec?;
        reg.intern(rec.get(0).unwrap_or_default());
    }
    Ok(reg)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let reg = registry_from_result(&a.result)?;
    let scores_by_account = read_result_scores(&a.result, &reg)?;
    let mut scores = vec![f64::NAN; reg.len()];
    for (u, s) in scores_by_account {
        scores[u] = s;
    }
    let truth = load_labels(&a.labels, &reg)?;
    let exclude: Option<Labels> = match &a.exclude {
        Some(p) => Some(load_labels(p, &reg)?),
        None => None,
    };
    let m = evaluate_scores(&scores, &truth, exclude.as_ref(), a.threshold)?;
    print_metrics(&m);
    if let Some(out) = &a.out {
        write_metrics_csv(out, &m)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    if a.loops.is_empty() || a.seeds.is_empty() {
        usage_error("the sweep grid is empty");
    }
    let loops: Vec<LoopSetting> = a
        .loops
        .iter()
        .map(|l| l.parse().unwrap_or_else(|e| usage_error(e)))
        .collect();
    let data = a.data.load()?;
    let truth = load_labels(&a.labels, &data.registry)?;
    let mut base = a.config.resolve()?;
    if let Some(tag) = a.filter.tag() {
        base.filter = tag;
    }
    let graph = build_graph(&data, base.filter)?;
    let mut rows = Vec::new();
    for &seed in &a.seeds {
        let cfg = base.clone().with_seed(seed);
        cfg.validate()?;
        let prep = prepare(&data, &cfg)?;
        let (pretrained, _) = pretrain(&data, &prep, &cfg).with_context(|| format!("pretraining seed {seed}"))?;
        for &l in &loops {
            let mut run_cfg = cfg.clone();
            run_cfg.em.loops = l;
            let out = detect(&prep, &graph, &pretrained, &run_cfg, None)
                .with_context(|| format!("detect with loops {l}, seed {seed}"))?;
            let metrics = evaluate_scores(&out.result.scores, &truth, None, run_cfg.em.threshold)?;
            eprintln!("loops {l} seed {seed}: AP {:.4}", metrics.ap);
            rows.push(SweepRow {
                loops: l.to_string(),
                seed,
                metrics,
            });
        }
    }
    std::fs::create_dir_all(&a.out_dir)?;
    report::write_sweep(&a.out_dir, &rows)?;
    report::print_sweep_summary(&report::summarize(&rows));
    Ok(())
}
