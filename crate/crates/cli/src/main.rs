//! `rpfem`: build relational priors, check gradients, and train, evaluate and
//! ablate the toy proposal classifier.

mod gradcheck;
mod priors;
mod toy;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use rpfem_core::rpkg::Relation;

#[derive(Parser)]
#[command(name = "rpfem", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a prior graph from an annotation corpus.
    BuildRpkg(priors::BuildArgs),
    /// Print the prior vector of one ordered class pair.
    InspectRpkg(priors::InspectArgs),
    /// Run the gradient-check suite over several seeds.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Write a synthetic annotation corpus drawn from the toy task.
    GenerateCorpus(toy::GenerateArgs),
    /// Train a toy classifier into a run directory named by its config hash.
    TrainToy(toy::TrainArgs),
    /// Evaluate a trained run on freshly drawn scenes.
    EvalToy(toy::EvalArgs),
    /// Compare a baseline run against an enhanced run.
    Compare(toy::CompareArgs),
    /// Train the ablation grid and upsert its rows into ablation.csv.
    Ablate(toy::AblateArgs),
}

/// Failure of the computation itself (as opposed to bad input).
#[derive(Debug)]
pub struct Internal(pub String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Internal>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<rpfem_core::Error>() {
            return if e.is_user_error() { 2 } else { 1 };
        }
    }
    2
}

/// Task flags shared by the toy subcommands.
#[derive(Args, Clone, Debug)]
pub struct TaskArgs {
    /// Use the task variant where classes appear independently of each other.
    #[arg(long)]
    independent: bool,
}

impl TaskArgs {
    fn spec(&self) -> rpfem_core::toy::ToyTaskSpec {
        if self.independent {
            rpfem_core::toy::ToyTaskSpec::independent()
        } else {
            rpfem_core::toy::ToyTaskSpec::default()
        }
    }
}

pub fn parse_relations(s: &str) -> Result<Vec<Relation>> {
    Ok(Relation::parse_list(s)?)
}

/// Fails with a message naming the first path that does not exist.
pub fn require_paths<'a>(paths: impl IntoIterator<Item = (&'a str, &'a Path)>) -> Result<()> {
    for (what, p) in paths {
        if !p.exists() {
            bail!("{what} not found: {}", p.display());
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
}

pub fn create_dir(path: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", path.display()))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("RPFEM_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => bail!("RPFEM_THREADS must be a positive integer, got {v:?}"),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Internal(e.to_string()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::BuildRpkg(a) => priors::build(a),
        Command::InspectRpkg(a) => priors::inspect(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::GenerateCorpus(a) => toy::generate(a),
        Command::TrainToy(a) => toy::train(a),
        Command::EvalToy(a) => toy::eval(a),
        Command::Compare(a) => toy::compare(a),
        Command::Ablate(a) => toy::ablate(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
