use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use rulex_cli::{
    cmd_eval, cmd_infer, cmd_oracle, cmd_synth, cmd_train, init_threads, oracle_table, Command, Overrides, Paths,
    RunConfig,
};
use rulex_core::em::InferenceMode;
use rulex_core::oracle::Scope;

#[derive(Parser)]
#[command(name = "rulex", version, about = "Document-level relation extraction with latent logic rules")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Global {
    /// JSON run config; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output of the command: corpus dir, run dir, predictions or report file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "RULEX_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    inference_mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Top,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleScope {
    All,
    Grounding,
    Posterior,
    Normalization,
    Gradient,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with planted rules.
    Synth,
    /// Train the generator and extractor with EM.
    Train {
        /// Corpus directory with vocab.txt and train.jsonl.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Predict facts with rule explanations.
    Infer {
        #[arg(long)]
        run: Option<PathBuf>,
        /// Documents JSONL; their listed facts are the candidate queries.
        #[arg(long)]
        docs: Option<PathBuf>,
        /// Score every ordered entity pair for every relation instead.
        #[arg(long)]
        all_pairs: bool,
    },
    /// Score predictions against gold documents.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Training documents whose facts ign F1 leaves out.
        #[arg(long)]
        train_facts: Option<PathBuf>,
        /// Rules for the logic score.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Corpus directory to take vocab.txt from.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Check the engine against brute-force references.
    Oracle {
        #[arg(long, value_enum)]
        scope: Option<OracleScope>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let g = cli.global;
    let mut o = Overrides {
        config: g.config,
        seed: g.seed,
        threads: g.threads,
        inference_mode: g.inference_mode.map(|m| match m {
            Mode::Sample => InferenceMode::Sample,
            Mode::Top => InferenceMode::TopRules,
        }),
        out: g.out,
        ..Overrides::default()
    };
    let command = match cli.command {
        Cmd::Synth => Command::Synth,
        Cmd::Train { corpus } => {
            o.paths.corpus = corpus;
            Command::Train
        }
        Cmd::Infer { run, docs, all_pairs } => {
            o.paths.run = run;
            o.paths.docs = docs;
            o.all_pairs = all_pairs;
            Command::Infer
        }
        Cmd::Eval {
            predictions,
            gold,
            train_facts,
            rules,
            vocab,
            corpus,
        } => {
            o.paths = Paths {
                predictions,
                gold,
                train_facts,
                rules,
                vocab,
                corpus,
                ..Paths::default()
            };
            Command::Eval
        }
        Cmd::Oracle { scope } => {
            o.oracle_scope = scope.map(|s| match s {
                OracleScope::All => Scope::All,
                OracleScope::Grounding => Scope::Grounding,
                OracleScope::Posterior => Scope::Posterior,
                OracleScope::Normalization => Scope::Normalization,
                OracleScope::Gradient => Scope::Gradient,
            });
            Command::Oracle
        }
    };
    let cfg = RunConfig::resolve(command, &o)?;
    eprint!("resolved config:\n{}", cfg.to_json());
    init_threads(cfg.threads);

    match command {
        Command::Synth => {
            let out = cmd_synth(&cfg)?;
            println!("wrote corpus to {}", out.display());
        }
        Command::Train => {
            let s = cmd_train(&cfg)?;
            println!("warm start used {} positive instances", s.warm_start_instances);
            println!("{:>4} {:>12} {:>12} {:>9}", "iter", "L_G", "L_R", "train_f1");
            for d in &s.diagnostics {
                println!("{:>4} {:>12.4} {:>12.4} {:>9.4}", d.iteration, d.l_g, d.l_r, d.train_f1);
            }
            println!("wrote run to {}", s.run.display());
        }
        Command::Infer => {
            let s = cmd_infer(&cfg)?;
            println!(
                "{} positive predictions over {} documents written to {}",
                s.positives,
                s.documents,
                s.predictions.display()
            );
        }
        Command::Eval => {
            let report = cmd_eval(&cfg)?;
            print!("{}", report.to_table());
        }
        Command::Oracle => {
            let reports = cmd_oracle(&cfg)?;
            print!("{}", oracle_table(&reports));
            return Ok(reports.iter().all(|r| r.passed()));
        }
    }
    Ok(true)
}
