mod bench;
mod meta;
mod run;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qclmix::data::{self, LabelColumn};
use qclmix::model::{self, Variant};
use qclmix::stats::{self, GlobalMode};
use qclmix::train::{self, TrainConfig};
use qclmix::{config, gradcheck, metrics, Error};

use run::RunRecord;

#[derive(Parser)]
#[command(name = "qclmix", version, about = "Quantum-inspired contrastive classifier for imbalanced tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Training flags; they override the config file, which overrides defaults.
#[derive(Args, Clone, Debug, Default)]
struct TrainFlags {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for split, init, shuffling and mixup [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant
    #[arg(long, value_parser = parse_variant, value_name = "no-quantum|no-mixup|no-attention")]
    ablate: Option<Variant>,
    /// Select on a stratified validation subset of train instead of the test split
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key, e.g. `--set max_lr=0.005` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Test,
    Train,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one dataset; writes a checkpoint, its sidecar, history.csv and a run record
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Label column name, or `last`
        #[arg(long, default_value = "last")]
        label: String,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label: Option<String>,
        /// Rows to score; train/test re-derive the training-time split
        #[arg(long, value_enum, default_value = "test")]
        split: Which,
    },
    /// Train every dataset x variant x seed of a manifest (resumable)
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated variants
        #[arg(long, default_value = "full,no-quantum,no-mixup,no-attention")]
        variants: String,
        /// Comma-separated seeds; overrides --seed
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Friedman / Iman-Davenport tests over a results table or mean ranks
    Stats {
        /// `dataset,model,metric,value` table
        #[arg(long, conflicts_with = "ranks", required_unless_present = "ranks")]
        results: Option<PathBuf>,
        /// `metric,<model>...` rows of mean ranks, fed to the global test directly
        #[arg(long)]
        ranks: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Re-rank each metric's mean ranks before the global test
        #[arg(long)]
        reranked: bool,
        /// Also write stats.csv here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// Restrict to checks whose name contains this
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Write embeddings, labels and predictions for every row of a dataset
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Error with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Data(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Checkpoint { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Shape { .. } => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn resolve(flags: &TrainFlags) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &flags.config {
        config::load(&mut cfg, p)?;
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config::apply(&mut cfg, k.trim(), v.trim())?;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(v) = flags.ablate {
        cfg.ablation = v.ablation();
    }
    if let Some(f) = flags.val_fraction {
        cfg.val_fraction = Some(f);
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &TrainConfig, extra: &[(&str, String)]) {
    let mut s = String::new();
    for (k, v) in extra {
        let _ = writeln!(s, "# {k} = {v}");
    }
    for line in config::render(cfg).lines() {
        let _ = writeln!(s, "# {line}");
    }
    print!("{s}");
}

fn cmd_train(data_path: &Path, label: &str, flags: &TrainFlags, out: &Path) -> CmdResult {
    let cfg = resolve(flags)?;
    echo_config(
        &cfg,
        &[
            ("data", data_path.display().to_string()),
            ("label_column", label.to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let col = LabelColumn::parse(label);
    let ds = data::load_csv(data_path, &col)?;
    let rec = run::train_run(&ds, &col, &cfg, out)?;
    run::append_locked(&out.join("runs.csv"), RunRecord::HEADER, &rec.to_csv())?;
    print!("{}{}", RunRecord::HEADER, rec.to_csv());
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, data_path: &Path, label: Option<&str>, which: Which) -> CmdResult {
    let loaded = run::load_model(ckpt)?;
    let (ds, x, y) = run::load_for(&loaded, data_path, label)?;
    let cfg = &loaded.meta.config;
    echo_config(
        cfg,
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("data", data_path.display().to_string()),
            ("split", format!("{which:?}").to_lowercase()),
        ],
    );
    let rows: Vec<usize> = match which {
        Which::All => (0..ds.len()).collect(),
        Which::Train | Which::Test => {
            let split = data::stratified_split(&ds.y, cfg.test_ratio, cfg.seed)?;
            if matches!(which, Which::Test) {
                split.test
            } else {
                split.train
            }
        }
    };
    let xs = x.select_rows(&rows);
    let ys: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
    let m = train::evaluate(&loaded.params, &loaded.model, &xs, &ys)?;
    println!("rows,accuracy,maP,maR,maF1");
    println!(
        "{},{},{},{},{}",
        ys.len(),
        m.accuracy,
        m.macro_precision,
        m.macro_recall,
        m.macro_f1
    );
    Ok(())
}

fn csv_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Failure::usage(format!("bad {what} `{t}`: {e}")))
        })
        .collect()
}

fn cmd_bench(
    manifest: &Path,
    variants: &str,
    seeds: Option<&str>,
    flags: &TrainFlags,
    out: &Path,
    jobs: usize,
) -> CmdResult {
    let cfg = resolve(flags)?;
    let variants: Vec<Variant> = csv_list(variants, "variant")?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => csv_list(s, "seed")?,
        None => vec![cfg.seed],
    };
    if jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    echo_config(
        &cfg,
        &[
            ("manifest", manifest.display().to_string()),
            (
                "variants",
                variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
            ),
            (
                "seeds",
                seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("out", out.display().to_string()),
            ("jobs", jobs.to_string()),
        ],
    );
    let entries = data::read_manifest(manifest)?;
    let s = bench::run(&entries, &variants, &seeds, &cfg, out, jobs)?;
    println!(
        "trained {}, skipped {}, failed {}; results in {}",
        s.trained,
        s.skipped,
        s.failed,
        out.join("results.csv").display()
    );
    if s.failed > 0 {
        return Err(Failure {
            code: 2,
            message: format!(
                "{} runs failed; see {}",
                s.failed,
                out.join("failures.csv").display()
            ),
        });
    }
    Ok(())
}

/// Reads `metric,<model>...` rows of mean ranks.
fn read_ranks(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    let models: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut f = line.split(',');
        metrics.push(f.next().unwrap_or("").trim().to_string());
        let row: Vec<f64> = f
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad rank `{t}`", n + 2)))
            })
            .collect::<Result<_, _>>()?;
        if row.len() != models.len() {
            return Err(Error::Data(format!(
                "line {}: {} ranks for {} models",
                n + 2,
                row.len(),
                models.len()
            ))
            .into());
        }
        rows.push(row);
    }
    Ok((models, metrics, rows))
}

fn cmd_stats(
    results: Option<&Path>,
    ranks: Option<&Path>,
    alpha: f64,
    reranked: bool,
    out: Option<&Path>,
) -> CmdResult {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Failure::usage("--alpha must lie in (0, 1)"));
    }
    let mode = if reranked {
        GlobalMode::Reranked
    } else {
        GlobalMode::MeanRanks
    };
    println!("# alpha = {alpha}");
    println!("# global_mode = {}", if reranked { "reranked" } else { "mean-ranks" });
    let (text, csv) = match (results, ranks) {
        (Some(p), _) => {
            println!("# results = {}", p.display());
            let rows = stats::read_results(p)?;
            let report = stats::analyze(&rows, alpha, mode)?;
            (report.to_text(), report.to_csv())
        }
        (None, Some(p)) => {
            println!("# ranks = {}", p.display());
            let (models, metrics, rows) = read_ranks(p)?;
            let g = stats::global_test(&rows, mode)?;
            let (crit, decision) = g.decide_f(alpha)?;
            let mut t = String::new();
            let _ = writeln!(
                t,
                "global test over {} rank rows ({}) x {} models",
                g.n,
                metrics.join(", "),
                models.len()
            );
            let _ = writeln!(
                t,
                "chi2 = {:.4}, corrected {:.4}, p = {:.4e}",
                g.chi2, g.chi2_corrected, g.p_value
            );
            let _ = writeln!(
                t,
                "F_F = {:.4}{} with df ({}, {}), critical {:.4} -> {}",
                g.f_f,
                if g.f_f_undefined { " (undefined)" } else { "" },
                g.df1,
                g.df2,
                crit,
                decision
            );
            let c = format!(
                "metric,chi2,chi2_corrected,p,decision\nglobal,{},{},{},{}\n",
                g.chi2, g.chi2_corrected, g.p_value, decision
            );
            (t, c)
        }
        (None, None) => return Err(Failure::usage("give --results or --ranks")),
    };
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        std::fs::write(dir.join("stats.csv"), csv).map_err(Error::from)?;
    }
    Ok(())
}

fn cmd_gradcheck(op: Option<&str>, instances: usize, seed: u64) -> CmdResult {
    if instances == 0 {
        return Err(Failure::usage("--instances must be at least 1"));
    }
    println!("# instances = {instances}");
    println!("# seed = {seed}");
    println!("# step = {:e}", gradcheck::STEP);
    println!("# tolerance = {:e}", gradcheck::TOLERANCE);
    let reports = gradcheck::run_suite(op, instances, seed)?;
    println!("{:<20} {:>9} {:>12} {:>12}  status", "check", "instances", "coords", "max_rel_err");
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<20} {:>9} {:>12} {:>12.3e}  {}",
            r.name,
            r.instances,
            r.coordinates,
            r.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{failed} of {} gradient checks failed", reports.len()),
        });
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

fn cmd_export(ckpt: &Path, data_path: &Path, label: Option<&str>, out: &Path) -> CmdResult {
    let loaded = run::load_model(ckpt)?;
    let (ds, x, y) = run::load_for(&loaded, data_path, label)?;
    echo_config(
        &loaded.meta.config,
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("data", data_path.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let (logits, emb) = model::infer(&loaded.params, &loaded.model, &x)?;
    let pred = model::argmax_rows(&logits);
    let names = &loaded.meta.labels;
    let mut s = String::new();
    for j in 0..emb.cols() {
        let _ = write!(s, "e{j},");
    }
    s.push_str("label,pred\n");
    for i in 0..ds.len() {
        for v in emb.row(i) {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{},{}", names[y[i]], names[pred[i]]);
    }
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let path = out.join("embeddings.csv");
    std::fs::write(&path, s).map_err(Error::from)?;
    let m = metrics::evaluate_predictions(&y, &pred, loaded.model.num_classes)?;
    println!("wrote {} rows to {} (accuracy {:.4})", ds.len(), path.display(), m.accuracy);
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train {
            data,
            label,
            flags,
            out,
        } => cmd_train(&data, &label, &flags, &out),
        Command::Evaluate {
            checkpoint,
            data,
            label,
            split,
        } => cmd_evaluate(&checkpoint, &data, label.as_deref(), split),
        Command::Bench {
            manifest,
            variants,
            seeds,
            flags,
            out,
            jobs,
        } => cmd_bench(&manifest, &variants, seeds.as_deref(), &flags, &out, jobs),
        Command::Stats {
            results,
            ranks,
            alpha,
            reranked,
            out,
        } => cmd_stats(results.as_deref(), ranks.as_deref(), alpha, reranked, out.as_deref()),
        Command::Gradcheck { op, instances, seed } => cmd_gradcheck(op.as_deref(), instances, seed),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            label,
            out,
        } => cmd_export(&checkpoint, &data, label.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
