//! Command-line entry point. `main.rs` only forwards to [`run`].

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::probe::{compare_checkpoints, make_probe_task, write_comparison_csv, FineTuneOptions, ProbeTask};
use crate::text::BUNDLED_CORPUS;
use crate::trainer::{bench_strategies, run_pretraining};
use crate::verify::{run_suite, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tmr", version, about = "Replaced-token-detection pretraining with prioritized memory replay")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override configuration keys. Applied after `--config`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// key = value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// tmr or electra_baseline
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub steps: Option<String>,
    #[arg(long, global = true)]
    pub update_strategy: Option<String>,
    #[arg(long, global = true)]
    pub init_strategy: Option<String>,
    #[arg(long, global = true)]
    pub alpha: Option<String>,
    #[arg(long, global = true)]
    pub lambda: Option<String>,
    #[arg(long, global = true)]
    pub buffer_capacity: Option<String>,
    #[arg(long, global = true)]
    pub batch_size: Option<String>,
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    #[arg(long, global = true)]
    pub jobs: Option<String>,
    /// Any other key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run pretraining; writes metrics.csv, checkpoints and report.json under out_dir.
    Pretrain,
    /// Run a property suite and print every check against its limit.
    Verify {
        /// sampling, gradients, buffer, drift, losses, strategies or all
        suite: String,
    },
    /// Time the strategies on identical configurations.
    Bench {
        #[arg(long, default_value_t = 100)]
        iterations: u64,
        /// Interleaved repetitions; the fastest is reported.
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        /// Also write the table here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fine-tune checkpoints on a probe task and tabulate dev accuracy.
    Probe {
        /// Checkpoint manifests or glob patterns.
        #[arg(long = "checkpoints", required = true, num_args = 1..)]
        checkpoints: Vec<String>,
        /// label<TAB>text file; defaults to the task built from the configured corpus.
        #[arg(long)]
        task: Option<PathBuf>,
        /// Defaults to the probe_seeds key.
        #[arg(long)]
        seeds: Option<usize>,
        /// Defaults to out_dir/probe_comparison.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the bundled probe task as label<TAB>text.
    MakeProbeTask {
        #[arg(long)]
        output: PathBuf,
        /// Corpus to build from; defaults to the configured corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let named = [
            ("seed", &self.seed),
            ("mode", &self.mode),
            ("steps", &self.steps),
            ("update_strategy", &self.update_strategy),
            ("init_strategy", &self.init_strategy),
            ("alpha", &self.alpha),
            ("lambda", &self.lambda),
            ("buffer_capacity", &self.buffer_capacity),
            ("batch_size", &self.batch_size),
            ("out_dir", &self.out_dir),
            ("jobs", &self.jobs),
        ];
        let mut out: Vec<(String, String)> = named
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
                None => out.push((kv.clone(), String::new())),
            }
        }
        out
    }

    /// Defaults, then the config file, then flags. Every problem is reported.
    pub fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let mut errors = Vec::new();
        for (k, v) in self.pairs() {
            if let Err(e) = cfg.set(&k, &v) {
                errors.push(e);
            }
        }
        errors.extend(cfg.validate());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn command() -> clap::Command {
    Cli::command().after_help(Config::help_text())
}

/// Parse arguments and run. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let cfg = cli.overrides.resolve()?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Verify { suite } => cmd_verify(&cfg, suite),
        Command::Bench { iterations, rounds, output } => cmd_bench(&cfg, *iterations, *rounds, output.as_deref()),
        Command::Probe {
            checkpoints,
            task,
            seeds,
            output,
        } => cmd_probe(&cfg, checkpoints, task.as_deref(), *seeds, output.as_deref()),
        Command::MakeProbeTask { output, corpus } => cmd_make_probe_task(&cfg, output, corpus.as_deref()),
    }
}

fn cmd_pretrain(cfg: &Config) -> Result<i32> {
    let report = run_pretraining(cfg)?;
    println!("steps run       {}", report.steps_run);
    println!("vocab size      {}", report.vocab_size);
    println!("sequences       {}", report.sequences);
    if let Some(last) = report.metrics.last() {
        println!("final loss_g    {:.6}", last.loss_g);
        println!("final loss_d    {:.6}", last.loss_d);
    }
    if let Some(d) = report.final_drift {
        println!("final drift     {d:.6}");
    }
    println!("metrics         {}", report.metrics_csv.display());
    for c in &report.checkpoints {
        println!("checkpoint      {}", c.display());
    }
    Ok(EXIT_OK)
}

fn cmd_verify(cfg: &Config, suite: &str) -> Result<i32> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(|e: String| Error::Config(vec![e]))?]
    };
    let mut all_passed = true;
    for s in suites {
        println!("== {s}");
        for c in run_suite(s, cfg)? {
            all_passed &= c.passed;
            println!("{c}");
        }
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_bench(cfg: &Config, iterations: u64, rounds: usize, output: Option<&Path>) -> Result<i32> {
    if iterations == 0 {
        return Err(Error::Config(vec!["--iterations must be at least 1".into()]));
    }
    let report = bench_strategies(cfg, iterations, rounds)?;
    let csv = report.to_csv()?;
    print!("{csv}");
    if let Some(p) = output {
        fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
    }
    for c in &report.checks {
        println!(
            "{} {}: measured {:.4} (limit {:.4})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.limit
        );
    }
    println!("ordering {}", if report.passed() { "holds" } else { "does not hold" });
    Ok(EXIT_OK)
}

/// Expand each argument as a glob; literal paths must exist.
pub fn resolve_checkpoints(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let matches: Vec<PathBuf> = glob::glob(p)
            .map_err(|e| Error::Config(vec![format!("bad checkpoint pattern {p:?}: {e}")]))?
            .filter_map(|r| r.ok())
            .collect();
        if matches.is_empty() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint matches")));
        }
        out.extend(matches);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn cmd_probe(cfg: &Config, patterns: &[String], task: Option<&Path>, seeds: Option<usize>, output: Option<&Path>) -> Result<i32> {
    let manifests = resolve_checkpoints(patterns)?;
    let task = match task {
        Some(p) => ProbeTask::load(p)?,
        None => ProbeTask::parse(&make_probe_task(&corpus_text(cfg, None)?, cfg.seed)?)?,
    };
    let seeds = seeds.unwrap_or(cfg.probe_seeds) as u64;
    let rows = compare_checkpoints(&manifests, &task, FineTuneOptions::from_config(cfg, cfg.seed), seeds, cfg.jobs)?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Path::new(&cfg.out_dir).join("probe_comparison.csv"));
    write_comparison_csv(&rows, &out)?;
    println!("{:<16} {:>13} {:>9} {:>9} {:>7}  checkpoint", "mode", "pretrain_step", "mean_acc", "std_acc", "n_seeds");
    for r in &rows {
        println!(
            "{:<16} {:>13} {:>9.4} {:>9.4} {:>7}  {}",
            r.mode,
            r.pretrain_step,
            r.mean_acc,
            r.std_acc,
            r.n_seeds,
            r.checkpoint.display()
        );
    }
    println!("table           {}", out.display());
    Ok(EXIT_OK)
}

fn corpus_text(cfg: &Config, corpus: Option<&Path>) -> Result<String> {
    match corpus.map(Path::to_path_buf).or_else(|| (!cfg.corpus.is_empty()).then(|| PathBuf::from(&cfg.corpus))) {
        Some(p) => fs::read_to_string(&p).map_err(|e| Error::io(&p, e)),
        None => Ok(BUNDLED_CORPUS.to_string()),
    }
}

fn cmd_make_probe_task(cfg: &Config, output: &Path, corpus: Option<&Path>) -> Result<i32> {
    let tsv = make_probe_task(&corpus_text(cfg, corpus)?, cfg.seed)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(output, tsv).map_err(|e| Error::io(output, e))?;
    println!("wrote {}", output.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        let m = command().try_get_matches_from(args).unwrap();
        Cli::from_arg_matches(&m).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "steps = 7\nalpha = 0.5\n").unwrap();
        let cli = parse(&["tmr", "--config", path.to_str().unwrap(), "--steps", "9", "--set", "ridge=2", "pretrain"]);
        let cfg = cli.overrides.resolve().unwrap();
        assert_eq!(cfg.steps, 9);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.ridge, 2.0);
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = parse(&["tmr", "verify", "losses", "--seed", "4", "--mode", "electra_baseline"]);
        let cfg = cli.overrides.resolve().unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.mode.to_string(), "electra_baseline");
    }

    #[test]
    fn every_problem_is_reported() {
        let cli = parse(&["tmr", "--alpha", "x", "--set", "nosuchkey=1", "--batch-size", "0", "pretrain"]);
        match cli.overrides.resolve().unwrap_err() {
            Error::Config(errs) => {
                assert!(errs.len() >= 3, "{errs:?}");
                assert!(errs.iter().any(|e| e.contains("nosuchkey")));
                assert!(errs.iter().any(|e| e.contains("alpha")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["tmr", "--set", "bogus=1", "verify", "losses"]), EXIT_CONFIG);
        assert_eq!(run(["tmr", "verify", "nosuite"]), EXIT_CONFIG);
        assert_eq!(run(["tmr", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(["tmr", "verify", "losses"]), EXIT_OK);
        assert_eq!(
            run(["tmr", "probe", "--checkpoints", "/nonexistent/*.manifest", "--task", "/nonexistent.tsv"]),
            EXIT_FAILURE
        );
    }

    #[test]
    fn help_lists_every_key_with_default() {
        let help = command().render_long_help().to_string();
        let d = Config::default();
        for (k, _) in crate::config::KEYS {
            let line = help.lines().find(|l| l.trim_start().starts_with(&format!("{k} "))).unwrap_or_else(|| panic!("{k} missing"));
            let v = d.get(k).unwrap();
            if !v.is_empty() {
                assert!(line.contains(&v), "{line}");
            }
        }
    }
}
