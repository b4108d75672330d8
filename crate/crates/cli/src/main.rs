//! `meshran` command-line entry point.
//!
//! Exit codes: 0 on success, 2 when a scenario fails to parse or validate
//! (or no cell is feasible), 3 when writing outputs fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshran::scenario::{self, compare_matrix, Scenario, ScenarioError, ScenarioRun};

#[derive(Parser)]
#[command(
    name = "meshran",
    version,
    about = "Coreless session-establishment simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file (every variant x approach cell in it).
    Run {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run several scenario files as one matrix and print a single table.
    Compare {
        #[arg(required = true)]
        scenarios: Vec<String>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Parse a scenario and report which cells are feasible.
    Validate { scenario: String },
    /// List the bundled scenarios.
    List,
}

#[derive(Args)]
struct RunOpts {
    /// Overrides the seed in the file.
    #[arg(long, env = "MESHRAN_SEED")]
    seed: Option<u64>,
    /// Directory for metrics.csv, report.txt and traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit the event trace of every feasible cell.
    #[arg(long)]
    trace: bool,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn load(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => match scenario::bundled(arg) {
            Some(t) if !path.exists() => t.to_string(),
            _ => return Err(Failure::Runtime(format!("{arg}: {e}"))),
        },
    };
    scenario::parse(&text).map_err(|e| Failure::Validation(format!("{arg}: {e}")))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(scenarios: &[Scenario], opts: &RunOpts) -> Result<(), Failure> {
    let seed = opts.seed.unwrap_or(scenarios[0].seed);
    let ScenarioRun { report, traces } = compare_matrix(scenarios, seed)?;
    let table = report.to_string();
    print!("{table}");
    match &opts.out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            write(&dir.join("metrics.csv"), &report.csv())?;
            write(&dir.join("report.txt"), &table)?;
            if opts.trace {
                for ((variant, approach), t) in &traces {
                    let name = format!("trace_{variant}_{approach}.log");
                    write(&dir.join(name), &t.to_string())?;
                }
            }
        }
        None if opts.trace => {
            for ((variant, approach), t) in &traces {
                println!("# trace {variant} {approach}");
                print!("{t}");
            }
        }
        None => {}
    }
    Ok(())
}

fn validate(arg: &str) -> Result<(), Failure> {
    let s = load(arg)?;
    let mut feasible = 0;
    for (placement, approach) in s.cells() {
        let variant = placement.variant;
        let verdict = match s.topology_spec(&placement).build() {
            Err(e) => format!("infeasible: placement: {e}"),
            Ok(topo) => {
                let w = s.workload(&topo);
                match scenario::check_interfaces(&topo, approach, &w.sessions) {
                    Err(why) => format!("infeasible: {why}"),
                    Ok(()) => {
                        feasible += 1;
                        "ok".to_string()
                    }
                }
            }
        };
        println!("{variant:<16} {approach:<3} {verdict}");
    }
    if feasible == 0 {
        return Err(Failure::Validation(format!("{arg}: no feasible cell")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, opts } => load(&scenario).and_then(|s| execute(&[s], &opts)),
        Command::Compare { scenarios, opts } => scenarios
            .iter()
            .map(|a| load(a))
            .collect::<Result<Vec<_>, _>>()
            .and_then(|s| execute(&s, &opts)),
        Command::Validate { scenario } => validate(&scenario),
        Command::List => {
            for (name, _) in scenario::BUNDLED {
                println!("{name}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
