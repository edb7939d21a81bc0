//! `headlamp`: command-line driver for retrieval-head studies.

mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "headlamp", version, about = "Retrieval-head dynamics lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $HEADLAMP_OUT, then ./headlamp-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate unablated traces for every task cell.
    GenTraces(Common),
    /// Static ranking, Jaccard turnover and activation entropy.
    Stats(Common),
    /// Ablation accuracy over the length x depth grid per condition.
    AblateGrid(Common),
    /// Progressive top-k ablation with compensation tracking.
    AblateProgressive(Common),
    /// Temporal-offset CCA between hidden states and head scores.
    Cca(Common),
    /// Train the classifier and regressor probes.
    ProbeTrain(Common),
    /// Evaluate stored probes on the test split.
    ProbeEval(Common),
    /// Dynamic RAG under each configured head policy.
    Dynrag(Common),
    /// Plot-ready tables from stored results.
    Report(Common),
    /// Serve the configured model over hlb/1 on stdin/stdout.
    Serve(Common),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<headlamp::Error>(), Some(headlamp::Error::Config(_))))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let (common, run): (&Common, fn(&setup::Ctx) -> anyhow::Result<()>) = match &cli.command {
        Command::GenTraces(c) => (c, commands::gen_traces),
        Command::Stats(c) => (c, commands::stats),
        Command::AblateGrid(c) => (c, commands::ablate_grid),
        Command::AblateProgressive(c) => (c, commands::ablate_progressive),
        Command::Cca(c) => (c, commands::cca),
        Command::ProbeTrain(c) => (c, commands::probe_train),
        Command::ProbeEval(c) => (c, commands::probe_eval),
        Command::Dynrag(c) => (c, commands::dynrag),
        Command::Report(c) => (c, commands::report_cmd),
        Command::Serve(c) => (c, commands::serve),
    };
    let ctx = match setup::Ctx::new(&common.config, common.seed, common.out.clone()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_RUNTIME });
        }
    };
    match run(&ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_flags() {
        let cli = Cli::try_parse_from(["headlamp", "ablate-grid", "--config", "c.toml", "--seed", "4", "--out", "d"]).unwrap();
        let Command::AblateGrid(c) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(c.config, PathBuf::from("c.toml"));
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.out, Some(PathBuf::from("d")));
        assert!(Cli::try_parse_from(["headlamp", "stats"]).is_err());
        assert!(Cli::try_parse_from(["headlamp", "stats", "--config", "c", "--bogus"]).is_err());
    }

    #[test]
    fn config_errors_are_found_through_context() {
        let e = anyhow::Error::new(headlamp::Error::Config("bad".into())).context("loading");
        assert!(is_config_error(&e));
        assert!(!is_config_error(&anyhow::anyhow!("runtime")));
        assert!(!is_config_error(&anyhow::Error::new(headlamp::Error::Empty("context"))));
    }
}
