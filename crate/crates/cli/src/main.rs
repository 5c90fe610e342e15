//! `fibo` command-line tool.

mod session;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use fibo::bench::{run_suite, write_summary_csv, DomainMap, SuiteSpec};
use fibo::boloop::{fibo_suggest, gap_value, random_suggest};
use fibo::funcprior::{default_restarts, generate_corpus, Corpus, CorpusConfig, PriorHyperparams};
use fibo::trainer::{train, Checkpoint, TrainConfig};
use fibo::{rng, Error, Model, ModelConfig};
use serde_json::json;

use session::{Observation, Pending, Session, SessionLock};

#[derive(Parser)]
#[command(name = "fibo", version, about = "In-context Bayesian optimization with a pretrained posterior over maximizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample (x*, D) pretraining pairs from the function prior.
    GenData(GenDataArgs),
    /// Fit a model to a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Run a benchmark suite.
    Bench(BenchArgs),
    /// Propose the next batch for an ask-tell session.
    Suggest(SuggestArgs),
    /// Report measured values for the pending batch.
    Tell(TellArgs),
    /// Summarize an ask-tell session.
    Status(StatusArgs),
    /// Print a checkpoint's metadata as JSON.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    n_min: usize,
    #[arg(long, default_value_t = 100)]
    n_max: usize,
    /// Ascent restarts per function [default: 32 for d <= 2, else 64].
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, default_value_t = 4)]
    bins: usize,
    #[arg(long)]
    max_draws: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Output path; a `.jsonl` extension selects the JSON-lines encoding.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "FIBO_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Fail unless the corpus has this dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    context_dim: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    attention: bool,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, env = "FIBO_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Write zero suggestion times so outputs are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct SuggestArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    q: usize,
    #[arg(long)]
    seed: u64,
    /// Model checkpoint; required when the session is created.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Native box as `lo:hi` per dimension, comma separated; required when
    /// the session is created.
    #[arg(long)]
    bounds: Option<String>,
    #[arg(long)]
    experiment: Option<String>,
    /// Drop an unresolved pending batch instead of failing.
    #[arg(long)]
    force_discard: bool,
}

#[derive(Args)]
struct TellArgs {
    #[arg(long)]
    session: PathBuf,
    /// Comma-separated values, one per pending point.
    #[arg(long, conflicts_with = "csv", allow_hyphen_values = true)]
    values: Option<String>,
    /// CSV with either one value per row, or coordinates followed by the
    /// value. With no pending batch, coordinate rows are ingested as history.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct StatusArgs {
    #[arg(long)]
    session: PathBuf,
    /// Known optimum, for reporting GAP.
    #[arg(long, allow_hyphen_values = true)]
    y_star: Option<f64>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

/// Relative paths are taken from `FIBO_DATA_DIR` when it is set.
fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os("FIBO_DATA_DIR") {
        Some(base) if p.is_relative() && !base.is_empty() => PathBuf::from(base).join(p),
        _ => p.to_path_buf(),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}")?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let hp = PriorHyperparams::new(a.dim);
    let mut cfg = CorpusConfig::new(a.dim, a.count);
    cfg.n_min = a.n_min;
    cfg.n_max = a.n_max;
    cfg.restarts = a.restarts.unwrap_or_else(|| default_restarts(a.dim));
    cfg.bins_per_dim = a.bins;
    cfg.workers = a.workers;
    if let Some(m) = a.max_draws {
        cfg.max_draws = m;
    }
    let report = match generate_corpus(&hp, &cfg, a.seed) {
        Ok(r) => r,
        Err(Error::QuotaExhausted { draws, quota, fills }) => {
            eprintln!("quota of {quota} per bin not reached after {draws} draws");
            for (i, f) in fills.iter().enumerate() {
                eprintln!("  bin {i:>3}: {f}/{quota}");
            }
            bail!("corpus generation failed");
        }
        Err(e) => return Err(e.into()),
    };
    let out = data_path(&a.out);
    if out.extension().is_some_and(|e| e == "jsonl") {
        let mut bytes = Vec::new();
        report.corpus.write_jsonl(&mut bytes)?;
        fibo::io::write_atomic(&out, &bytes)?;
    } else {
        report.corpus.save(&out)?;
    }
    for (i, f) in report.fills.iter().enumerate() {
        eprintln!("bin {i:>3}: {f}/{}", report.quota);
    }
    print_json(&json!({
        "out": out,
        "dim": a.dim,
        "pairs": report.corpus.pairs.len(),
        "draws": report.draws,
        "quota": report.quota,
        "fills": report.fills,
    }))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Corpus::read_jsonl(std::io::BufReader::new(file))?)
    } else {
        Ok(Corpus::load(path)?)
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&data_path(&a.corpus))?;
    if let Some(d) = a.dim {
        ensure!(d == corpus.dim, "corpus has dimension {}, expected {d}", corpus.dim);
    }
    let model = match &a.init {
        Some(p) => {
            let model = Checkpoint::load(data_path(p))?.model;
            ensure!(model.dim() == corpus.dim, "checkpoint has dimension {}, corpus has {}", model.dim(), corpus.dim);
            model
        }
        None => {
            let mut config = ModelConfig::new(corpus.dim);
            if let Some(h) = a.hidden {
                config.encoder.hidden = h;
                config.encoder.width = h;
                config.flow.hidden = h;
            }
            if let Some(c) = a.context_dim {
                config.encoder.context_dim = c;
                config.flow.context_dim = c;
            }
            if let Some(b) = a.blocks {
                config.flow.blocks = b;
            }
            config.encoder.attention = a.attention;
            Model::new(config, rng::derive_seed(a.seed, 0x1417))?
        }
    };
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        validation_fraction: a.val_fraction,
        ..TrainConfig::default()
    };
    let out = data_path(&a.out);
    let outcome = train(&corpus, model, Some(PriorHyperparams::new(corpus.dim)), &config, |r, _| {
        let val = r.val_nll.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!("epoch {:>4}  train {:.4}  val {val}  lr {:.2e}", r.epoch + 1, r.train_nll, r.learning_rate);
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::Diverged { epoch, step, last_good }) => {
            let mut rescue = out.clone().into_os_string();
            rescue.push(".last-good");
            last_good.save(&rescue)?;
            bail!("training diverged at epoch {epoch}, step {step}; last good weights saved to {}", PathBuf::from(rescue).display());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(&out)?;
    let t = &outcome.checkpoint.training;
    print_json(&json!({
        "checkpoint": out,
        "epochs": t.epochs,
        "steps": t.steps,
        "initial_val_nll": t.initial_val_nll,
        "train_nll": t.final_train_nll,
        "val_nll": t.final_val_nll,
    }))
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut spec = SuiteSpec::load(data_path(&a.suite))?;
    spec.output_dir = data_path(&spec.output_dir);
    for p in spec.checkpoints.values_mut() {
        *p = data_path(p);
    }
    if a.no_timing {
        spec.record_timing = false;
    }
    let report = run_suite(&spec, a.workers)?;
    let mut out = std::io::stdout().lock();
    write_summary_csv(&report.summary, &mut out)?;
    let failed: Vec<_> = report.cells.iter().filter(|c| c.failed()).collect();
    for c in &failed {
        let why = match &c.result {
            Ok(t) => t.error.clone().unwrap_or_else(|| "incomplete".into()),
            Err(e) => e.clone(),
        };
        eprintln!("cell {} {} q={} seed={} failed: {why}", c.objective, c.method, c.q, c.seed);
    }
    ensure!(failed.is_empty(), "{} of {} cells failed", failed.len(), report.cells.len());
    Ok(())
}

fn parse_bounds(text: &str) -> Result<DomainMap> {
    let bounds = text
        .split(',')
        .map(|part| {
            let (lo, hi) = part.trim().split_once(':').ok_or_else(|| anyhow!("bound `{part}` is not `lo:hi`"))?;
            Ok((lo.trim().parse::<f64>()?, hi.trim().parse::<f64>()?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainMap::new(bounds)?)
}

fn open_session(a: &SuggestArgs, dir: &Path) -> Result<Session> {
    let bounds = a.bounds.as_deref().map(parse_bounds).transpose()?;
    let checkpoint = a.checkpoint.as_deref().map(data_path);
    if let Some(s) = Session::load(dir)? {
        if let Some(b) = &bounds {
            ensure!(*b == s.domain, "--bounds differ from the session's domain");
        }
        if let Some(c) = &checkpoint {
            ensure!(std::path::absolute(c)? == s.checkpoint, "--checkpoint differs from the session's checkpoint");
        }
        return Ok(s);
    }
    let domain = bounds.ok_or_else(|| anyhow!("new session needs --bounds"))?;
    let checkpoint = checkpoint.ok_or_else(|| anyhow!("new session needs --checkpoint"))?;
    let experiment = a.experiment.clone().unwrap_or_else(|| {
        dir.file_name().map_or_else(|| "session".into(), |n| n.to_string_lossy().into_owned())
    });
    Ok(Session::new(experiment, domain, std::path::absolute(checkpoint)?))
}

fn suggest(a: SuggestArgs) -> Result<()> {
    ensure!(a.q > 0, "--q must be at least 1");
    let dir = data_path(&a.session);
    let _lock = SessionLock::acquire(&dir)?;
    let mut s = open_session(&a, &dir)?;
    if let Some(p) = &s.pending {
        ensure!(
            a.force_discard,
            "{} suggested points are still pending; tell their values or pass --force-discard",
            p.points.len()
        );
    }
    let model = Checkpoint::load(&s.checkpoint)?.model;
    ensure!(model.dim() == s.dim, "checkpoint has dimension {}, session has {}", model.dim(), s.dim);
    let mut rng = rng::seeded(a.seed);
    let unit = if s.history.is_empty() {
        random_suggest(s.dim, a.q, &mut rng)
    } else {
        fibo_suggest(&model, &s.unit_history()?, a.q, &mut rng)?
    };
    let points = unit.iter().map(|u| s.domain.to_native(u)).collect::<fibo::Result<Vec<_>>>()?;
    s.pending = Some(Pending { seed: a.seed, points: points.clone() });
    s.save(&dir)?;
    let mut out = std::io::stdout().lock();
    let header: Vec<String> = (0..s.dim).map(|i| format!("x{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for p in &points {
        writeln!(out, "{}", p.iter().map(f64::to_string).collect::<Vec<_>>().join(","))?;
    }
    Ok(())
}

/// Rows of numbers; a leading non-numeric row is treated as a header.
fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => bail!("{}: row {}: {e}", path.display(), i + 1),
        }
    }
    Ok(rows)
}

fn tell(a: TellArgs) -> Result<()> {
    let dir = data_path(&a.session);
    let _lock = SessionLock::acquire(&dir)?;
    let mut s = Session::load(&dir)?.ok_or_else(|| anyhow!("no session at {}", dir.display()))?;
    let rows: Vec<Vec<f64>> = match (&a.values, &a.csv) {
        (Some(v), None) => v
            .split(',')
            .map(|t| t.trim().parse::<f64>().map(|y| vec![y]).with_context(|| format!("bad value `{t}`")))
            .collect::<Result<_>>()?,
        (None, Some(p)) => read_csv_rows(&data_path(p))?,
        _ => bail!("pass exactly one of --values or --csv"),
    };
    ensure!(rows.iter().flatten().all(|v| v.is_finite()), "values must be finite");
    let added = match s.pending.take() {
        Some(p) => {
            ensure!(
                rows.len() == p.points.len(),
                "{} values given for {} pending points; session unchanged",
                rows.len(),
                p.points.len()
            );
            let mut batch = Vec::with_capacity(rows.len());
            for (row, x) in rows.iter().zip(p.points) {
                let y = match row.len() {
                    1 => row[0],
                    n if n == s.dim + 1 => {
                        let same = row[..s.dim].iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
                        ensure!(same, "row {row:?} does not match pending point {x:?}; session unchanged");
                        row[s.dim]
                    }
                    n => bail!("rows need 1 or {} columns, got {n}; session unchanged", s.dim + 1),
                };
                batch.push(Observation { x, y });
            }
            batch
        }
        None => {
            ensure!(a.csv.is_some(), "no pending batch to tell");
            let mut batch = Vec::with_capacity(rows.len());
            for row in rows {
                ensure!(row.len() == s.dim + 1, "history rows need {} columns, got {}", s.dim + 1, row.len());
                let x = row[..s.dim].to_vec();
                let u = s.domain.to_unit(&x)?;
                ensure!(fibo::data::in_unit_cube(&u), "point {x:?} lies outside the session bounds");
                batch.push(Observation { x, y: row[s.dim] });
            }
            ensure!(!batch.is_empty(), "no rows to ingest");
            batch
        }
    };
    let n = added.len();
    if s.initial_count.is_none() {
        s.initial_count = Some(n);
    }
    s.history.extend(added);
    s.save(&dir)?;
    print_json(&json!({ "added": n, "history": s.history.len() }))
}

fn status(a: StatusArgs) -> Result<()> {
    let dir = data_path(&a.session);
    let s = Session::load(&dir)?.ok_or_else(|| anyhow!("no session at {}", dir.display()))?;
    let best = s.best();
    let gap = match (a.y_star, s.initial_best(), best) {
        (Some(y_star), Some(y0), Some(b)) => Some(gap_value(y0, b.y, y_star)?),
        _ => None,
    };
    print_json(&json!({
        "experiment": s.experiment,
        "dim": s.dim,
        "history": s.history.len(),
        "pending": s.pending.as_ref().map_or(0, |p| p.points.len()),
        "best": best.map(|b| b.y),
        "best_x": best.map(|b| b.x.clone()),
        "initial_best": s.initial_best(),
        "gap": gap,
    }))
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(data_path(&a.path))?;
    let params = ckpt.model.params();
    print_json(&json!({
        "format_version": fibo::trainer::CHECKPOINT_VERSION,
        "dim": ckpt.dim(),
        "model": ckpt.model.config(),
        "prior": ckpt.prior,
        "training": ckpt.training,
        "tensors": params.len(),
        "parameters": params.numel(),
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => bench(a),
        Command::Suggest(a) => suggest(a),
        Command::Tell(a) => tell(a),
        Command::Status(a) => status(a),
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
