use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use cocofed::aoa::write_batches;
use cocofed::config::{ExperimentConfig, Mode};
use cocofed::protocol::{client_stream, Experiment, RoundRecord};
use cocofed::{verify, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SUITE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "cocofed", version, about = "Low-rank, superposed federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for metrics and data files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the federated experiment and write metrics.
    Train,
    /// Run the property suite and print a pass/fail report.
    Verify,
    /// Print the per-round traffic and memory ledger.
    Account,
    /// Write each station's signal blocks to `<out>/gnb_<k>.bin`.
    GenData {
        /// Blocks per station; defaults to what `rounds` rounds consume.
        #[arg(long)]
        blocks: Option<usize>,
    },
}

fn log(event: serde_json::Value) {
    let _ = writeln!(std::io::stderr().lock(), "{event}");
}

/// File values over defaults, then flags over both.
fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(r) = cli.rounds {
        cfg.rounds = r;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(cfg: ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut exp = Experiment::new(cfg.clone())?;
    let setup = exp.setup_record()?;
    log(json!({"event": "setup", "config_hash": exp.config_hash(), "test_mse": setup.test_mse,
               "wall_clock_s": start.elapsed().as_secs_f64()}));
    let mut csv = String::from(RoundRecord::CSV_HEADER);
    csv.push('\n');
    csv.push_str(&setup.csv_row());
    csv.push('\n');
    let mut records = vec![setup];
    for _ in 0..cfg.rounds {
        let rec = exp.run_round()?;
        log(json!({"event": "round", "round": rec.round_index, "test_mse": rec.test_mse,
                   "grad_norm": rec.grad_norm, "wall_clock_s": rec.wall_clock_s}));
        csv.push_str(&rec.csv_row());
        csv.push('\n');
        records.push(rec);
    }
    fs::write(out.join("metrics.csv"), csv)?;
    let rounds = &records[1..];
    let summary = json!({
        "final_mse": records.last().map(|r| r.test_mse),
        "total_uplink_bits": rounds.iter().map(|r| r.uplink_bits).sum::<u64>(),
        "total_downlink_bits": rounds.iter().map(|r| r.downlink_bits).sum::<u64>(),
        "ledger": exp.ledger,
        "config_hash": exp.config_hash(),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    exp.global_net().save(&out.join("model.bin"))?;
    log(json!({"event": "done", "wall_clock_s": start.elapsed().as_secs_f64()}));
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, blocks: Option<usize>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let n = blocks.unwrap_or(cfg.rounds * cfg.n_loc * cfg.arrivals_per_step);
    for k in 0..cfg.k {
        let mut data = client_stream(cfg, k);
        let batches = (0..n).map(|_| data.next_batch()).collect::<Result<Vec<_>>>()?;
        let path = out.join(format!("gnb_{k}.bin"));
        write_batches(&path, &batches)?;
        log(json!({"event": "gen-data", "gnb": k, "blocks": n, "path": path.display().to_string()}));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            log(json!({"event": "config_error", "message": e.to_string()}));
            return Ok(EXIT_CONFIG);
        }
    };
    match cli.command {
        Command::Train => train(cfg, &cli.out)?,
        Command::Account => println!("{}", serde_json::to_string_pretty(&cocofed::protocol::account_overhead(&cfg))?),
        Command::GenData { blocks } => gen_data(&cfg, blocks, &cli.out)?,
        Command::Verify => {
            let start = Instant::now();
            let report = verify::run_suite(cfg.master_seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            log(json!({"event": "verify", "passed": report.passed, "wall_clock_s": start.elapsed().as_secs_f64()}));
            if !report.passed {
                return Ok(EXIT_SUITE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log(json!({"event": "error", "message": e.to_string()}));
            ExitCode::from(EXIT_USAGE)
        }
    }
}
