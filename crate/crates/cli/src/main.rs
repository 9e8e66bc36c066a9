use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dm2::checkpoint::Checkpoint;
use dm2::config::RunConfig;
use dm2::encoder::EncoderParams;
use dm2::eval::{evaluate_cohort, REPORT_HEADER};
use dm2::experiment::{self, Prepared, RunResult};
use dm2::Error;

#[derive(Parser)]
#[command(name = "dm2", version, about = "Cohort metric learning with relation-matrix exchange")]
struct Cli {
    /// Run config (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads per cohort; 0 means one per member.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Evaluate every N epochs.
    #[arg(long, global = true)]
    eval_every: Option<usize>,
    /// Override a config key, e.g. `--set cohort.size=2` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Caps the number of worker threads.
    #[arg(long, env = "DM2_THREADS", hide_env_values = true, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset snapshot.
    GenerateData,
    /// Pretrain backbones on the pretext classes.
    Pretrain,
    /// Train cohorts; writes member checkpoints, trace and report per seed.
    Train,
    /// Run the diversity ablation grid over all seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "independent,md,md+td,md+vd,md+td+vd")]
        diversities: Vec<String>,
    },
    /// Evaluate member checkpoints on the test classes.
    Evaluate {
        /// Directory holding `member<N>.dm2w` files.
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Distill a trained cohort into a fresh student.
    Distill {
        /// Directory holding the teacher `member<N>.dm2w` files.
        #[arg(long)]
        teachers: PathBuf,
    },
    /// Aggregate report CSVs (mean ± std over seeds).
    Report {
        /// Directory of report CSVs sharing one config hash.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "recall@1")]
        metric: String,
    },
}

struct Failure {
    code: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let mut message = e.to_string();
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            let s_msg = s.to_string();
            if !message.contains(&s_msg) {
                message = format!("{message}: {s_msg}");
            }
            src = s.source();
        }
        Failure {
            code: e.code(),
            message,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: "E_USAGE",
        message: message.into(),
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(e) = cli.eval_every {
        cfg.eval_every = e;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("DM2_THREADS must be positive"));
        }
        let effective = if cfg.workers == 0 { cfg.cohort_size } else { cfg.workers };
        cfg.workers = effective.min(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> dm2::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn save_checkpoint(path: &Path, params: &EncoderParams, hash: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Checkpoint::from_params(params, Some(hash)).save(path)?;
    Ok(())
}

/// Loads `member1.dm2w`, `member2.dm2w`, ... in order; all must carry `hash`.
fn load_members(dir: &Path, hash: &str) -> CliResult<Vec<EncoderParams>> {
    let mut out = Vec::new();
    loop {
        let path = dir.join(format!("member{}.dm2w", out.len() + 1));
        if !path.exists() {
            break;
        }
        let ck = Checkpoint::load(&path)?;
        match ck.config_hash() {
            Some(h) if h == hash => {}
            other => {
                return Err(Failure {
                    code: "E_CONFIG",
                    message: format!(
                        "{} has config hash {:?}, expected {hash}",
                        path.display(),
                        other.unwrap_or("none")
                    ),
                })
            }
        }
        out.push(ck.to_params()?);
    }
    if out.is_empty() {
        return Err(Failure {
            code: "E_IO",
            message: format!("no member checkpoints in {}", dir.display()),
        });
    }
    Ok(out)
}

fn write_run(dir: &Path, run: &RunResult, config_id: &str) -> CliResult<()> {
    for (l, m) in run.members.iter().enumerate() {
        save_checkpoint(&dir.join(format!("member{}.dm2w", l + 1)), &m.params, &run.config_hash)?;
    }
    write_text(&dir.join("trace.csv"), |w| run.trace.write_csv(&run.config_hash, w))?;
    write_text(&dir.join("report.csv"), |w| run.write_reports(config_id, w))?;
    Ok(())
}

fn parse_metric(metric: &str) -> CliResult<usize> {
    metric
        .strip_prefix("recall@")
        .and_then(|k| k.parse().ok())
        .filter(|&k| k > 0)
        .ok_or_else(|| usage(format!("unknown metric {metric:?}; expected recall@K")))
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Report { runs, metric } = &cli.command {
        return report(cli, runs, metric);
    }
    let cfg = load_config(cli)?;
    let hash = cfg.hash();
    let out = &cli.out;
    fs::create_dir_all(out)?;
    write_text(&out.join("config.txt"), |w| {
        writeln!(w, "# config_hash={hash}")?;
        w.write_all(cfg.to_text().as_bytes())?;
        Ok(())
    })?;
    match &cli.command {
        Command::GenerateData => {
            let ds = experiment::generate_data(&cfg)?;
            write_text(&out.join("dataset.txt"), |w| ds.write_snapshot_tagged(w, Some(&hash)))?;
            println!("wrote {} images to {}", ds.len(), out.join("dataset.txt").display());
        }
        Command::Pretrain => {
            let prep = experiment::prepare(&cfg)?;
            for (k, b) in prep.backbones.iter().enumerate() {
                // Stored with a placeholder head so the checkpoint loader applies.
                let params = EncoderParams::new(b.clone(), 0, 1);
                save_checkpoint(&out.join(format!("backbone{}.dm2w", k + 1)), &params, &hash)?;
            }
            println!("wrote {} backbone checkpoint(s) to {}", prep.backbones.len(), out.display());
        }
        Command::Train => {
            let prep = experiment::prepare(&cfg)?;
            for &seed in &cfg.seeds {
                let run = experiment::run_seed(&prep, &cfg, seed)?;
                let dir = out.join(format!("seed{seed}"));
                write_run(&dir, &run, &cfg.diversity.name())?;
                let r = run.final_report();
                println!(
                    "seed {seed}: member1 R@1 {:.4} ensemble R@1 {:.4} -> {}",
                    r.member_recall(0, 1).unwrap_or(f64::NAN),
                    r.ensemble_recall(1).unwrap_or(f64::NAN),
                    dir.display()
                );
            }
        }
        Command::Ablate { diversities } => {
            let names: Vec<&str> = diversities.iter().map(|s| s.trim()).collect();
            let k = cfg.eval_ks.first().copied().unwrap_or(1);
            let k = if cfg.eval_ks.contains(&1) { 1 } else { k };
            let (rows, runs) = experiment::ablate(&cfg, &names, k)?;
            for (name, rs) in &runs {
                for r in rs {
                    let path = out.join("runs").join(name).join(format!("seed{}.csv", r.seed));
                    write_text(&path, |w| r.write_reports(name, w))?;
                }
            }
            write_text(&out.join("ablation.csv"), |w| experiment::write_grid(&rows, &hash, w))?;
            for r in &rows {
                println!(
                    "{:<12} member1 {:.4} ± {:.4}  ensemble {:.4} ± {:.4}",
                    r.config, r.member1.0, r.member1.1, r.ensemble.0, r.ensemble.1
                );
            }
        }
        Command::Evaluate { checkpoints } => {
            let params = load_members(checkpoints, &hash)?;
            let prep = prepare_eval(&cfg)?;
            let test = prep.test_indices();
            let report = evaluate_cohort(&params, &prep.dataset, &test, &cfg.eval_ks, cfg.train_epochs, "test")?;
            write_text(&out.join("evaluate.csv"), |w| {
                writeln!(w, "# config_hash={hash}")?;
                writeln!(w, "{REPORT_HEADER}")?;
                report.write_rows(&cfg.diversity.name(), w)
            })?;
            println!(
                "ensemble R@1 {:.4} over {} members",
                report.ensemble_recall(1).unwrap_or(f64::NAN),
                params.len()
            );
        }
        Command::Distill { teachers } => {
            let params = load_members(teachers, &hash)?;
            let prep = experiment::prepare(&cfg)?;
            let seed = cfg.seeds[0];
            let res = experiment::run_distill(&prep, &cfg, &params, seed)?;
            save_checkpoint(&out.join("student.dm2w"), &res.outcome.student, &hash)?;
            write_text(&out.join("distill.csv"), |w| {
                writeln!(w, "# config_hash={hash}")?;
                writeln!(w, "{REPORT_HEADER}")?;
                for (k, r) in cfg.eval_ks.iter().zip(&res.recall) {
                    writeln!(w, "{},distill,student,{k},{r}", cfg.distill_epochs)?;
                }
                Ok(())
            })?;
            println!("student R@1 {:.4}", res.recall.first().copied().unwrap_or(f64::NAN));
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// Evaluation needs only the data and splits, not pretrained backbones.
fn prepare_eval(cfg: &RunConfig) -> CliResult<Prepared> {
    let mut c = cfg.clone();
    c.pretrain_shared = false;
    Ok(experiment::prepare(&c)?)
}

fn report(cli: &Cli, runs: &Path, metric: &str) -> CliResult<()> {
    let k = parse_metric(metric)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(runs)
        .map_err(|e| Failure {
            code: "E_IO",
            message: format!("cannot read {}: {e}", runs.display()),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let files = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            experiment::read_report(&text, k).map_err(|e| {
                Failure::from(Error::Format(format!("{}: {}", p.display(), e)))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let rows = experiment::aggregate(&files)?;
    let hash = &files[0].config_hash;
    let mut stdout = std::io::stdout().lock();
    experiment::write_aggregate(&rows, hash, &mut stdout)?;
    let path = cli.out.join("aggregate.csv");
    write_text(&path, |w| experiment::write_aggregate(&rows, hash, w))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            println!("error code=E_USAGE message={}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            println!("error code={} message={}", f.code, f.message.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
