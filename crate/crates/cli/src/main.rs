//! `flowrec` command-line driver.
//!
//! Settings are resolved in this order, later wins: built-in defaults, the
//! TOML file given with `--config`, then command-line flags. Every command
//! writes its outputs into `<output_dir>/<config-hash>-<unix-seconds>/`.
//! Log verbosity comes from `FLOWREC_LOG` (e.g. `FLOWREC_LOG=debug`).

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowrec::baseline::Popularity;
use flowrec::checkpoint::{self, Checkpoint};
use flowrec::config::{CfmReduction, EncoderKind, RunConfig, ALPHA_GRID, BETA_GRID, STEPS_GRID};
use flowrec::dataset::snapshot::{load_snapshot, save_snapshot};
use flowrec::dataset::synthetic::MarkovCorpus;
use flowrec::dataset::{Dataset, Example, InputFormat};
use flowrec::eval::{self, EvalOptions, EvalReport, GroupMetrics, Recommender};
use flowrec::sampler::{self, FlowSampler};
use flowrec::trainer::{self, TrainState};
use flowrec::Error;

#[derive(Parser)]
#[command(name = "flowrec", version, about = "Flow-matching sequential recommender")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Interaction file (user, item, timestamp).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// tsv, csv or movielens_dat.
    #[arg(long, global = true)]
    format: Option<InputFormat>,
    /// Use the built-in synthetic Markov corpus instead of a file.
    #[arg(long, global = true)]
    synthetic: bool,
    /// Read the dataset from a preprocessed snapshot.
    #[arg(long, global = true)]
    snapshot: Option<PathBuf>,
    /// Threads used for ranking.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, split and snapshot a dataset; prints corpus statistics.
    Preprocess {
        /// Snapshot path (default: snapshot.jsonl in the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and evaluate the best epoch on the test split.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Evaluate over the sampling-step grid, or train over the loss-weight grid.
    Sweep(SweepArgs),
    /// Export sampling trajectories as CSV.
    Trace(TraceArgs),
    /// Evaluate the most-popular baseline.
    Baseline {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        groups: bool,
    },
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    no_prior: bool,
    #[arg(long)]
    no_cfm: bool,
    #[arg(long)]
    no_align: bool,
    /// transformer or gru.
    #[arg(long, value_parser = parse_encoder)]
    encoder: Option<EncoderKind>,
    /// sum or mean over coordinates.
    #[arg(long, value_parser = parse_reduction)]
    cfm_reduction: Option<CfmReduction>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Train on every prefix of each sequence.
    #[arg(long)]
    all_prefixes: bool,
    /// Sampling steps for validation and the final report.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a training checkpoint (`last.ckpt`).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Add head/tail and length-bucket breakdowns.
    #[arg(long)]
    groups: bool,
    /// Also write sampling trajectories to this CSV file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write top-100 lists (one JSON object per line).
    #[arg(long)]
    ranked: Option<PathBuf>,
    /// Measure inference wall-clock over three passes.
    #[arg(long)]
    timing: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    /// Sampling steps {1, 5, ..., 35} on a checkpoint.
    Steps,
    /// Train once per (alpha, beta) pair of the tuning grids.
    Weights,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also time each step count.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only the first N evaluation cases.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Valid => "valid",
            SplitArg::Test => "test",
        }
    }

    fn cases(self, ds: &Dataset) -> &[Example] {
        match self {
            SplitArg::Valid => &ds.split.valid,
            SplitArg::Test => &ds.split.test,
        }
    }
}

fn parse_encoder(s: &str) -> Result<EncoderKind, String> {
    match s {
        "transformer" => Ok(EncoderKind::Transformer),
        "gru" => Ok(EncoderKind::Gru),
        _ => Err(format!("unknown encoder {s:?} (expected transformer or gru)")),
    }
}

fn parse_reduction(s: &str) -> Result<CfmReduction, String> {
    match s {
        "sum" => Ok(CfmReduction::Sum),
        "mean" => Ok(CfmReduction::Mean),
        _ => Err(format!("unknown reduction {s:?} (expected sum or mean)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWREC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                // Some errors already print their source inline.
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for problems with the invocation or its inputs, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::NoActiveLoss) => 2,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        Some(_) => 1,
        None if e.downcast_ref::<Usage>().is_some() => 2,
        None => 1,
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_common(&mut cfg, &cli.common);
    match cli.command {
        Command::Preprocess { out } => cmd_preprocess(cfg, out),
        Command::Train(args) => cmd_train(cfg, &cli.common, args),
        Command::Eval(args) => cmd_eval(cfg, &cli.common, args),
        Command::Sweep(args) => cmd_sweep(cfg, &cli.common, args),
        Command::Trace(args) => cmd_trace(&cli.common, args),
        Command::Baseline { split, groups } => cmd_baseline(cfg, &cli.common, split, groups),
    }
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(p) = &c.data {
        cfg.data.path = Some(p.clone());
        cfg.data.synthetic = None;
    }
    if let Some(f) = c.format {
        cfg.data.format = f;
    }
    if c.synthetic && cfg.data.synthetic.is_none() {
        cfg.data.synthetic = Some(MarkovCorpus::default());
    }
    if let Some(w) = c.workers {
        cfg.train.eval_workers = w;
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(t.max_epochs, a.epochs);
    set!(t.alpha, a.alpha);
    set!(t.beta, a.beta);
    set!(t.lr, a.lr);
    set!(t.batch_size, a.batch_size);
    set!(t.patience, a.patience);
    set!(t.cfm_reduction, a.cfm_reduction);
    if a.no_prior {
        t.use_prior_loss = false;
    }
    if a.no_cfm {
        t.use_cfm_loss = false;
    }
    if a.no_align {
        t.use_align_loss = false;
    }
    let m = &mut cfg.model;
    set!(m.encoder, a.encoder);
    set!(m.dim, a.dim);
    set!(m.layers, a.layers);
    set!(m.heads, a.heads);
    set!(m.max_len, a.max_len);
    set!(cfg.sampler.steps, a.steps);
    if a.all_prefixes {
        cfg.data.all_prefixes = true;
    }
}

/// Creates `<output_dir>/<hash>-<unix-seconds>`, adding a counter if that
/// name is taken.
fn run_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("{}-{secs}", cfg.hash());
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = cfg.output_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                fs::write(dir.join("config.toml"), cfg.to_toml())?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn load_dataset(cfg: &mut RunConfig, common: &Common) -> anyhow::Result<Dataset> {
    if let Some(p) = &common.snapshot {
        let (ds, _) = load_snapshot(p)?;
        // The snapshot decides how the data was prepared.
        cfg.data = ds.config.clone();
        return Ok(ds);
    }
    if cfg.data.path.is_none() && cfg.data.synthetic.is_none() {
        return Err(Usage("no data: pass --data, --synthetic, --snapshot, or set [data] in the config".into()).into());
    }
    Ok(Dataset::load(&cfg.data)?)
}

fn write_report(dir: &Path, report: &EvalReport) -> anyhow::Result<()> {
    fs::write(dir.join("report.json"), report.to_pretty_json() + "\n")?;
    fs::write(dir.join("report.csv"), format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    Ok(())
}

fn eval_opts(cfg: &RunConfig) -> EvalOptions {
    trainer::eval_options(cfg)
}

fn with_groups<R: Recommender>(
    rec: &R,
    cases: &[Example],
    ds: &Dataset,
    opts: &EvalOptions,
) -> anyhow::Result<(eval::Metrics, GroupMetrics)> {
    let ranks = eval::ranks(rec, cases, opts)?;
    let groups = GroupMetrics::from_ranks(cases, &ranks, &ds.groups)?;
    Ok((eval::Metrics::from_ranks(&ranks), groups))
}

fn cmd_preprocess(mut cfg: RunConfig, out: Option<PathBuf>) -> anyhow::Result<()> {
    if cfg.data.path.is_none() && cfg.data.synthetic.is_none() {
        return Err(Usage("no data: pass --data or --synthetic".into()).into());
    }
    let ds = Dataset::load(&cfg.data)?;
    cfg.data = ds.config.clone();
    println!("{}", ds.stats());
    let path = match out {
        Some(p) => p,
        None => run_dir(&cfg)?.join("snapshot.jsonl"),
    };
    save_snapshot(&ds, Some(&cfg), &path)?;
    println!("snapshot: {}", path.display());
    Ok(())
}

fn train_once(cfg: &RunConfig, ds: &Dataset, dir: &Path, resume: Option<TrainState>) -> anyhow::Result<TrainState> {
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(cfg, ds.num_items())?,
    };
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    trainer::train(&mut state, ds, cfg, None, |st, line| {
        let io = |e| Error::io(&log_path, e);
        writeln!(log, "{}", line.to_json_line()).map_err(io)?;
        log.flush().map_err(io)?;
        checkpoint::save(&dir.join("last.ckpt"), &checkpoint::encode_state(cfg, st))?;
        if st.training.progress.stopping.best_epoch == line.epoch {
            checkpoint::save(&dir.join("best.ckpt"), &checkpoint::encode_model(cfg, &st.model))?;
        }
        eprintln!("epoch {:>3}  loss {:.4}  val ndcg@10 {:.4}", line.epoch, line.total, line.val_ndcg10);
        Ok(())
    })?;
    Ok(state)
}

fn final_report(cfg: &RunConfig, ds: &Dataset, state: &TrainState) -> anyhow::Result<EvalReport> {
    let best = state.best_model();
    let rec = FlowSampler::new(&best, cfg.sampler.steps);
    let opts = eval_opts(cfg);
    let (overall, groups) = with_groups(&rec, &ds.split.test, ds, &opts)?;
    let mut report = EvalReport::new("flowrec", "test", cfg.sampler.steps, overall, cfg);
    report.groups = Some(groups);
    let epochs: Vec<f64> = state.training.progress.history.iter().map(|l| l.seconds).collect();
    report.timing = Some(eval::timing_report(&rec, cfg.sampler.steps, &ds.split.test, &opts, &epochs, 3)?);
    Ok(report)
}

fn cmd_train(mut cfg: RunConfig, common: &Common, args: TrainArgs) -> anyhow::Result<()> {
    let (state, dir) = match &args.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            cfg = ck.config.clone();
            if let Some(e) = args.epochs {
                cfg.train.max_epochs = e;
            }
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            let mut state = ck.into_state()?;
            // A raised epoch limit reopens a run that only stopped on the old one.
            let p = &mut state.training.progress;
            p.finished = p.stopping.bad_epochs >= p.stopping.patience;
            (Some(state), dir)
        }
        None => {
            apply_train(&mut cfg, &args);
            cfg.validate()?;
            (None, PathBuf::new())
        }
    };
    let ds = load_dataset(&mut cfg, common)?;
    if let Some(s) = &state {
        let ck = Checkpoint {
            config: cfg.clone(),
            model: s.model.clone(),
            training: None,
        };
        ck.check_compatible(&cfg.model, ds.num_items())?;
    }
    let dir = if state.is_some() { dir } else { run_dir(&cfg)? };
    log::info!("run directory {}", dir.display());
    let state = train_once(&cfg, &ds, &dir, state)?;
    let report = final_report(&cfg, &ds, &state)?;
    write_report(&dir, &report)?;
    println!("{}", report.to_pretty_json());
    println!("run: {}", dir.display());
    Ok(())
}

fn load_for_eval(common: &Common, path: &Path, steps: Option<usize>) -> anyhow::Result<(RunConfig, Dataset, Checkpoint)> {
    let ck = checkpoint::load(path)?;
    let mut cfg = ck.config.clone();
    apply_common(&mut cfg, common);
    if let Some(s) = steps {
        cfg.sampler.steps = s;
    }
    cfg.validate()?;
    let ds = load_dataset(&mut cfg, common)?;
    ck.check_compatible(&cfg.model, ds.num_items())?;
    Ok((cfg, ds, ck))
}

fn cmd_eval(cfg_in: RunConfig, common: &Common, args: EvalArgs) -> anyhow::Result<()> {
    let _ = cfg_in;
    let (cfg, ds, ck) = load_for_eval(common, &args.checkpoint, args.steps)?;
    let rec = FlowSampler::new(&ck.model, cfg.sampler.steps);
    let cases = args.split.cases(&ds);
    let opts = eval_opts(&cfg);
    let mut report = if args.groups {
        let (m, g) = with_groups(&rec, cases, &ds, &opts)?;
        let mut r = EvalReport::new("flowrec", args.split.name(), cfg.sampler.steps, m, &cfg);
        r.groups = Some(g);
        r
    } else {
        let m = eval::evaluate(&rec, cases, &opts)?;
        EvalReport::new("flowrec", args.split.name(), cfg.sampler.steps, m, &cfg)
    };
    if args.timing {
        report.timing = Some(eval::timing_report(&rec, cfg.sampler.steps, cases, &opts, &[], 3)?);
    }
    let dir = run_dir(&cfg)?;
    write_report(&dir, &report)?;
    if let Some(p) = &args.trace {
        let t = sampler::trajectories(&ck.model, cases, cfg.sampler.steps, cfg.train.batch_size)?;
        sampler::trace_export(&t, ck.model.dim(), File::create(p).with_context(|| p.display().to_string())?)?;
    }
    if let Some(p) = &args.ranked {
        let lists = sampler::ranked_lists(
            &rec,
            cases,
            100,
            cfg.train.batch_size,
            |u| ds.users.users[u as usize].clone(),
            |i| ds.catalog.raw(i).unwrap_or("?").to_string(),
        )?;
        sampler::write_ranked_lists(&lists, BufWriter::new(File::create(p).with_context(|| p.display().to_string())?))?;
    }
    println!("{}", report.to_pretty_json());
    println!("run: {}", dir.display());
    Ok(())
}

fn cmd_sweep(mut cfg: RunConfig, common: &Common, args: SweepArgs) -> anyhow::Result<()> {
    match args.kind {
        SweepKind::Steps => {
            let Some(ck) = &args.checkpoint else {
                return Err(Usage("sweep steps needs --checkpoint".into()).into());
            };
            let (cfg, ds, ck) = load_for_eval(common, ck, None)?;
            let opts = eval_opts(&cfg);
            let cases = &ds.split.test;
            let sweep = eval::steps_sweep(&STEPS_GRID, cases, &opts, |t| FlowSampler::new(&ck.model, t))?;
            let base = sweep
                .iter()
                .find(|e| e.steps == cfg.sampler.steps)
                .map(|e| e.metrics)
                .unwrap_or_else(|| sweep[0].metrics);
            let mut report = EvalReport::new("flowrec", "test", cfg.sampler.steps, base, &cfg);
            report.steps_sweep = sweep.clone();
            let dir = run_dir(&cfg)?;
            let mut csv = String::from(EvalReport::CSV_HEADER);
            csv.push('\n');
            for e in &sweep {
                let mut r = EvalReport::new("flowrec", "test", e.steps, e.metrics, &cfg);
                r.config_hash = report.config_hash.clone();
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            if args.timing {
                let mut rows = String::from("steps,inference_seconds_per_pass\n");
                for &t in &STEPS_GRID {
                    let secs = eval::time_inference(&FlowSampler::new(&ck.model, t), cases, &opts, 3)?;
                    rows.push_str(&format!("{t},{secs:.6}\n"));
                }
                fs::write(dir.join("timing.csv"), rows)?;
            }
            fs::write(dir.join("sweep.csv"), csv)?;
            write_report(&dir, &report)?;
            println!("{}", report.to_pretty_json());
            println!("run: {}", dir.display());
        }
        SweepKind::Weights => {
            apply_train(&mut cfg, &args.train);
            cfg.validate()?;
            let ds = load_dataset(&mut cfg, common)?;
            let root = run_dir(&cfg)?;
            let mut csv = format!("alpha,beta,{}\n", EvalReport::CSV_HEADER);
            for &alpha in &ALPHA_GRID {
                for &beta in &BETA_GRID {
                    let mut c = cfg.clone();
                    c.train.alpha = alpha;
                    c.train.beta = beta;
                    let dir = root.join(format!("alpha{alpha}-beta{beta}"));
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("config.toml"), c.to_toml())?;
                    let state = train_once(&c, &ds, &dir, None)?;
                    let report = final_report(&c, &ds, &state)?;
                    write_report(&dir, &report)?;
                    csv.push_str(&format!("{alpha},{beta},{}\n", report.csv_row()));
                    fs::write(root.join("sweep.csv"), &csv)?;
                }
            }
            print!("{csv}");
            println!("run: {}", root.display());
        }
    }
    Ok(())
}

fn cmd_trace(common: &Common, args: TraceArgs) -> anyhow::Result<()> {
    let (cfg, ds, ck) = load_for_eval(common, &args.checkpoint, args.steps)?;
    let mut cases = args.split.cases(&ds);
    if let Some(n) = args.limit {
        cases = &cases[..n.min(cases.len())];
    }
    let path = match args.out {
        Some(p) => p,
        None => run_dir(&cfg)?.join("trace.csv"),
    };
    let t = sampler::trajectories(&ck.model, cases, cfg.sampler.steps, cfg.train.batch_size)?;
    sampler::trace_export(&t, ck.model.dim(), File::create(&path).with_context(|| path.display().to_string())?)?;
    println!("trace: {} ({} trajectories, {} steps)", path.display(), t.len(), cfg.sampler.steps);
    Ok(())
}

fn cmd_baseline(mut cfg: RunConfig, common: &Common, split: SplitArg, groups: bool) -> anyhow::Result<()> {
    cfg.validate()?;
    let ds = load_dataset(&mut cfg, common)?;
    let rec = Popularity::new(&ds.train_popularity, cfg.model.max_len);
    let cases = split.cases(&ds);
    if cases.is_empty() {
        bail!("the {} split is empty", split.name());
    }
    let opts = eval_opts(&cfg);
    let report = if groups {
        let (m, g) = with_groups(&rec, cases, &ds, &opts)?;
        let mut r = EvalReport::new("popularity", split.name(), 0, m, &cfg);
        r.groups = Some(g);
        r
    } else {
        EvalReport::new("popularity", split.name(), 0, eval::evaluate(&rec, cases, &opts)?, &cfg)
    };
    let dir = run_dir(&cfg)?;
    write_report(&dir, &report)?;
    println!("{}", report.to_pretty_json());
    println!("run: {}", dir.display());
    Ok(())
}
