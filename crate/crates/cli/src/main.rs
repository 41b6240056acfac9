//! `powerllm`: generate labeled data, inspect prompts, run experiments and
//! render reports.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 fatal
//! backend or replay error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use powerllm_core::backend::{build_backend, BackendError, BackendKind, RecordingBackend};
use powerllm_core::harness::{
    self, generate_dataset, prepare_trial, read_trial_csv, run_experiment, summarize, trial_rng, write_csv,
    write_dataset_csv, write_plots, HarnessError, RunConfig, SUMMARY_CSV, SUMMARY_HEADER,
};
use powerllm_core::{GainDomain, GridSpec, ObjectiveKind};

#[derive(Parser, Debug)]
#[command(name = "powerllm", version, about = "LLM-driven power allocation benchmark for a two-pair interference channel")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Emit a dataset of channel realizations labeled by the grid oracle.
    Gen {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Output file (defaults to `<out-dir>/dataset.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the prompt one trial would send.
    Prompt {
        #[arg(long, default_value_t = 25)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        trial_id: usize,
    },
    /// Run the full experiment and write CSV and SVG output.
    Run,
    /// Rebuild the summary CSV and charts from a stored trial CSV.
    Report {
        /// Trial CSV (defaults to `<out-dir>/trials.csv`).
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Run the experiment and record every completion for later replay.
    ReplayRecord {
        /// Transcript destination (defaults to `<out-dir>/replay.jsonl`).
        #[arg(long)]
        replay_out: Option<PathBuf>,
    },
}

/// Flags that override fields of the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML file with `RunConfig` fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `se` or `ee`.
    #[arg(long, global = true)]
    objective: Option<ObjectiveKind>,
    /// `http`, `nn_mock`, `malformed_mock` or `replay`.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Comma-separated list of N_S values.
    #[arg(long, global = true, value_delimiter = ',')]
    n_shots: Option<Vec<usize>>,
    #[arg(long, global = true)]
    n_trials: Option<usize>,
    #[arg(long, global = true)]
    levels: Option<usize>,
    #[arg(long, global = true)]
    include_both_on: bool,
    /// `db` or `linear`.
    #[arg(long, global = true, value_parser = parse_domain)]
    gain_domain: Option<GainDomain>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    api_key_env: Option<String>,
    #[arg(long, global = true)]
    replay_path: Option<PathBuf>,
    #[arg(long, global = true)]
    max_inflight: Option<usize>,
    #[arg(long, global = true)]
    retries: Option<u32>,
    #[arg(long, global = true)]
    timeout_secs: Option<f64>,
}

fn parse_domain(s: &str) -> Result<GainDomain, String> {
    match s {
        "db" => Ok(GainDomain::Db),
        "linear" => Ok(GainDomain::Linear),
        other => Err(format!("unknown gain domain `{other}` (expected db or linear)")),
    }
}

impl Overrides {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.objective {
            cfg.objective = v;
        }
        if let Some(v) = self.backend {
            cfg.backend.kind = v;
        }
        if let Some(v) = &self.n_shots {
            cfg.n_shots_list = v.clone();
        }
        if let Some(v) = self.n_trials {
            cfg.n_trials = v;
        }
        if let Some(v) = self.levels {
            cfg.grid = GridSpec { levels: v };
        }
        if self.include_both_on {
            cfg.binary_opts.include_both_on = true;
        }
        if let Some(v) = self.gain_domain {
            cfg.gain_domain = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = &self.endpoint {
            cfg.backend.endpoint_url = Some(v.clone());
        }
        if let Some(v) = &self.model {
            cfg.backend.model = v.clone();
        }
        if let Some(v) = &self.api_key_env {
            cfg.backend.api_key_env = Some(v.clone());
        }
        if let Some(v) = &self.replay_path {
            cfg.backend.replay_path = Some(v.clone());
        }
        if let Some(v) = self.max_inflight {
            cfg.backend.max_inflight = v;
        }
        if let Some(v) = self.retries {
            cfg.backend.retries = v;
        }
        if let Some(v) = self.timeout_secs {
            cfg.backend.timeout_secs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(_) => 2,
        HarnessError::Backend(BackendError::Config(_)) => 2,
        HarnessError::Backend(_) => 3,
        HarnessError::Io { .. } => 1,
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn write_outputs(out: &harness::ExperimentOutput, dir: &Path) -> Result<(), HarnessError> {
    for path in write_csv(&out.records, &out.summaries, dir)?.into_iter().chain(write_plots(&out.summaries, dir)?) {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn print_summary(out: &harness::ExperimentOutput) {
    println!("{SUMMARY_HEADER}");
    for s in &out.summaries {
        println!(
            "{},{},{},{:.6},{:.4},{:.4},{}",
            s.n_shots,
            s.objective,
            s.strategy.as_str(),
            s.mean_value,
            s.mean_ratio,
            s.parse_failure_rate,
            s.n_trials
        );
    }
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let out_dir = &cli.overrides.out_dir;
    match &cli.command {
        Command::Gen { count, out } => {
            let cfg = cli.overrides.load()?;
            let data = generate_dataset(&cfg.params, cfg.objective, cfg.grid, *count, cfg.master_seed);
            std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
            let path = out.clone().unwrap_or_else(|| out_dir.join("dataset.csv"));
            write_dataset_csv(&data, &path)?;
            eprintln!("wrote {} samples to {}", data.len(), path.display());
        }
        Command::Prompt { shots, trial_id } => {
            let cfg = cli.overrides.load()?;
            let mut rng = trial_rng(cfg.master_seed, *shots, *trial_id);
            let prepared = prepare_trial(&cfg, *shots, *trial_id, &mut rng);
            match prepared.prompt {
                Ok(prompt) => println!("{prompt}"),
                Err(reason) => return Err(HarnessError::Config(format!("cannot render prompt: {reason}"))),
            }
        }
        Command::Run => {
            let cfg = cli.overrides.load()?;
            let backend = build_backend(&cfg.backend)?;
            let out = run_experiment(&cfg, backend.as_ref())?;
            write_outputs(&out, out_dir)?;
            print_summary(&out);
        }
        Command::Report { trials } => {
            let path = trials.clone().unwrap_or_else(|| out_dir.join(harness::TRIALS_CSV));
            let rows = read_trial_csv(&path)?;
            let summaries = summarize(&rows);
            std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
            let summary_path = out_dir.join(SUMMARY_CSV);
            harness::write_summary_csv(&summaries, &summary_path)?;
            eprintln!("wrote {}", summary_path.display());
            for p in write_plots(&summaries, out_dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::ReplayRecord { replay_out } => {
            let cfg = cli.overrides.load()?;
            let recorder = RecordingBackend::new(build_backend(&cfg.backend)?);
            let out = run_experiment(&cfg, &recorder)?;
            std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
            let path = replay_out.clone().unwrap_or_else(|| out_dir.join("replay.jsonl"));
            recorder.write(&path).map_err(|e| io_err(&path, e))?;
            eprintln!("recorded {} completions to {}", recorder.transcript().len(), path.display());
            write_outputs(&out, out_dir)?;
            print_summary(&out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
