mod commands;
mod config;
mod dataset;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use align_core::connectors::ConnectorKind;
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig, OUT_ENV};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "alignbench", version, about = "Toy vision-language connector experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config and ALIGNBENCH_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stages to train, e.g. `3`, `1,2` or `1-3`.
    #[arg(long, global = true)]
    stages: Option<String>,
    #[arg(long, global = true, value_parser = parse_connector)]
    connector: Option<ConnectorKind>,
    /// Checkpoint to start from; `noise` accepts a comma-separated list.
    #[arg(long, global = true)]
    from: Option<String>,
    /// Noise standard deviation for `noise`.
    #[arg(long, global = true)]
    sigma: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Render the synthetic documents and their manifest.
    Synth,
    /// Run the training stages, one checkpoint per stage.
    Train,
    /// Token accuracy and loss on the held-out split.
    Eval,
    /// Vocabulary distribution, embedding PCA and the optional connector comparison.
    Analyze,
    /// Evaluate with low-probability embedding rows removed.
    Prune,
    /// Feature-noise robustness of one or more checkpoints.
    Noise,
    /// Connector latency, throughput and memory.
    Bench,
    /// SVG figures from the reports already written.
    Plot,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Synth => "synth",
            Cmd::Train => "train",
            Cmd::Eval => "eval",
            Cmd::Analyze => "analyze",
            Cmd::Prune => "prune",
            Cmd::Noise => "noise",
            Cmd::Bench => "bench",
            Cmd::Plot => "plot",
        }
    }
}

fn parse_connector(s: &str) -> Result<ConnectorKind, String> {
    s.parse::<ConnectorKind>().map_err(|e| e.to_string())
}

fn log_line(cfg: &RunConfig, line: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let _ = std::fs::create_dir_all(&cfg.out_dir);
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(cfg.out_dir.join("run.log")) {
        let _ = writeln!(f, "{secs} {line}");
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        connector: cli.connector,
    };
    let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let cfg = RunConfig::resolve(cli.config.as_deref(), env_out, &overrides)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let name = cli.cmd.name();
    std::fs::write(
        cfg.out_dir.join(format!("{name}.config.json")),
        serde_json::to_string_pretty(&cfg)? + "\n",
    )?;
    log_line(&cfg, &format!("{name} start"));
    let from = cli.from.as_deref();
    let res = match cli.cmd {
        Cmd::Synth => commands::synth(&cfg),
        Cmd::Train => commands::train(&cfg, cli.stages.as_deref(), from),
        Cmd::Eval => commands::eval(&cfg, from),
        Cmd::Analyze => commands::analyze(&cfg, from),
        Cmd::Prune => commands::prune(&cfg, from),
        Cmd::Noise => commands::noise(&cfg, from, cli.sigma),
        Cmd::Bench => commands::bench(&cfg, cli.connector),
        Cmd::Plot => commands::plot(&cfg),
    };
    match &res {
        Ok(_) => log_line(&cfg, &format!("{name} ok")),
        Err(e) => log_line(&cfg, &format!("{name} failed ({}): {e}", e.exit_code())),
    }
    res
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
