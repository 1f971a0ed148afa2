use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use swarmchain::blockchain::ChainRules;
use swarmchain::bus::AdapterId;
use swarmchain::contracts::{ContractRegistry, DEFAULT_CONTRACT_TIMEOUT_MS};
use swarmchain::harness::{
    read_chain_file, verify_chain_file, ChainFileError, HarnessError, ScenarioConfig, Simulation, TxRequest,
};
use swarmchain::miner::replay_contract_states;

const EXIT_INVALID: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "swarmchain", version, about = "Simulated miner networks on a swarm bus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Read commands from stdin instead of running the timeline to completion.
        #[arg(long)]
        interactive: bool,
    },
    /// Run a scenario and write one miner's chain as json lines.
    Dump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        miner: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a chain file.
    Verify {
        file: PathBuf,
        #[command(flatten)]
        rules: RulesArgs,
    },
    /// Validate a chain file and print the contract states it produces.
    ReplayStates {
        file: PathBuf,
        #[command(flatten)]
        rules: RulesArgs,
        #[arg(long, default_value_t = DEFAULT_CONTRACT_TIMEOUT_MS)]
        timeout_ms: u64,
    },
    /// Only available inside `run --interactive`.
    #[command(hide = true)]
    Submit {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        rest: Vec<String>,
    },
}

#[derive(clap::Args)]
struct RulesArgs {
    #[arg(long, default_value_t = 8)]
    difficulty: u32,
    #[arg(long, default_value_t = 4)]
    block_cap: usize,
}

impl RulesArgs {
    fn rules(&self) -> ChainRules {
        ChainRules { difficulty: self.difficulty, block_cap: self.block_cap }
    }
}

#[derive(Parser)]
#[command(no_binary_name = true, disable_help_flag = true, disable_version_flag = true)]
struct ReplLine {
    #[command(subcommand)]
    command: ReplCommand,
}

#[derive(Subcommand)]
enum ReplCommand {
    Submit {
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "counter")]
        contract: String,
        #[arg(long, default_value = "client1")]
        sender: String,
        #[arg(long)]
        nonce: Option<u64>,
    },
    Tick {
        #[arg(default_value_t = 1)]
        n: u64,
    },
    Run,
    Dump {
        #[arg(long)]
        miner: String,
        #[arg(long)]
        out: PathBuf,
    },
    Report,
    Quit,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load(config: &Path, seed: Option<u64>) -> Result<ScenarioConfig, ExitCode> {
    let mut cfg = ScenarioConfig::load(config).map_err(|e| fail(EXIT_USAGE, e))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn harness_exit(e: HarnessError) -> ExitCode {
    let code = match e {
        HarnessError::Config(_) | HarnessError::UnknownMiner(_) | HarnessError::DuplicateMiner(_) => EXIT_USAGE,
        _ => EXIT_INVALID,
    };
    fail(code, e)
}

fn chain_file_exit(e: ChainFileError) -> ExitCode {
    match e {
        ChainFileError::Io(_) => fail(EXIT_USAGE, e),
        _ => fail(EXIT_INVALID, e),
    }
}

fn emit(text: &str, to: Option<&Path>) -> Result<(), ExitCode> {
    match to {
        Some(path) => {
            std::fs::write(path, format!("{text}\n")).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
        }
        // A closed pipe (`| head`) is not an error.
        None => {
            let _ = writeln!(io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn run(config: &Path, seed: Option<u64>, report: Option<&Path>, interactive: bool) -> Result<(), ExitCode> {
    let cfg = load(config, seed)?;
    let mut sim = Simulation::new(cfg).map_err(harness_exit)?;
    if interactive {
        return repl(&mut sim, report);
    }
    let r = sim.run().map_err(harness_exit)?;
    emit(&r.to_canonical(), report)
}

fn repl(sim: &mut Simulation, report: Option<&Path>) -> Result<(), ExitCode> {
    let stdin = io::stdin();
    let mut out = io::stdout();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| fail(EXIT_USAGE, e))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let cmd = match ReplLine::try_parse_from(&words) {
            Ok(l) => l.command,
            Err(e) => {
                eprintln!("{}", e.to_string().trim_end());
                continue;
            }
        };
        match cmd {
            ReplCommand::Submit { method, contract, sender, nonce } => {
                let mut req = TxRequest::call(&sender, &contract, &method);
                req.nonce = nonce;
                match sim.submit_transaction(&req) {
                    Ok(s) => writeln!(out, "submitted {}", s.tx_id()),
                    Err(e) => writeln!(out, "rejected: {e}"),
                }
            }
            ReplCommand::Tick { n } => {
                for _ in 0..n {
                    sim.apply_due().map_err(harness_exit)?;
                    sim.tick();
                }
                writeln!(out, "tick {}", sim.now())
            }
            ReplCommand::Run => {
                let r = sim.run().map_err(harness_exit)?;
                writeln!(out, "tick {} converged={} height={}", r.ticks, r.converged, r.chain_length)
            }
            ReplCommand::Dump { miner, out: path } => match sim.dump_chain(&miner, &path) {
                Ok(()) => writeln!(out, "wrote {}", path.display()),
                Err(e) => writeln!(out, "rejected: {e}"),
            },
            ReplCommand::Report => writeln!(out, "{}", sim.report().to_canonical()),
            ReplCommand::Quit => break,
        }
        .map_err(|e| fail(EXIT_USAGE, e))?;
    }
    if let Some(path) = report {
        emit(&sim.report().to_canonical(), Some(path))?;
    }
    Ok(())
}

fn dump(config: &Path, seed: Option<u64>, miner: &str, out: &Path) -> Result<(), ExitCode> {
    let mut sim = Simulation::new(load(config, seed)?).map_err(harness_exit)?;
    if sim.miner(miner).is_none()
        && !sim
            .config()
            .events
            .iter()
            .any(|e| matches!(&e.action, swarmchain::harness::Action::JoinMiner { name } if name == miner))
    {
        return Err(fail(EXIT_USAGE, HarnessError::UnknownMiner(miner.to_string())));
    }
    sim.run().map_err(harness_exit)?;
    sim.dump_chain(miner, out).map_err(harness_exit)
}

fn verify(file: &Path, rules: &ChainRules) -> Result<(), ExitCode> {
    let chain = verify_chain_file(file, rules).map_err(chain_file_exit)?;
    println!("ok: {} blocks, tip {}", chain.len(), chain.tip().block_hash);
    Ok(())
}

fn replay_states(file: &Path, rules: &ChainRules, timeout_ms: u64) -> Result<(), ExitCode> {
    let chain = read_chain_file(file).map_err(chain_file_exit)?;
    let contracts = ContractRegistry::with_samples();
    let executing = AdapterId::new("replay").expect("non-empty");
    let states = replay_contract_states(&chain, rules, &contracts, timeout_ms, &executing)
        .map_err(|e| fail(EXIT_INVALID, format!("line {}: {}", e.index + 1, e.error)))?;
    let text = swarmchain::blockchain::canonical::to_canonical_string(&states).map_err(|e| fail(EXIT_INVALID, e))?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, seed, report, interactive } => run(config, *seed, report.as_deref(), *interactive),
        Command::Dump { config, miner, out, seed } => dump(config, *seed, miner, out),
        Command::Verify { file, rules } => verify(file, &rules.rules()),
        Command::ReplayStates { file, rules, timeout_ms } => replay_states(file, &rules.rules(), *timeout_ms),
        Command::Submit { .. } => Err(fail(EXIT_USAGE, "submit is only available inside `run --interactive`")),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
