use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use longtail::commands::{self, Component, Context};
use longtail::config::RunConfig;
use longtail::{Error, Result};

/// Hybrid long-tail recommender: data generation, training, serving and evaluation.
#[derive(Parser, Debug)]
#[command(name = "longtail", version)]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Allows `generate` to overwrite existing data files.
    #[arg(long, global = true)]
    force: bool,

    /// Directory holding data, artifacts and reports.
    #[arg(long, global = true, default_value = "run")]
    output: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic catalog, interaction log and item embeddings.
    Generate,
    /// Train one pipeline stage, or all of them in order.
    Train {
        #[arg(value_enum, default_value = "all")]
        component: ComponentArg,
    },
    /// Print the top-k recommendations for a user.
    Recommend {
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Rank by semantic score alone against these comma-separated items
        /// instead of the user's training history.
        #[arg(long, value_delimiter = ',')]
        cold_start_semantic: Option<Vec<String>>,
    },
    /// Evaluate fusion against single-channel pipelines on the test split.
    Evaluate,
    /// Search the fusion weight simplex on the validation slice.
    Gridsearch,
    /// Measure end-to-end recommendation latency.
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ComponentArg {
    Intent,
    Cf,
    Gen,
    Align,
    All,
}

impl From<ComponentArg> for Component {
    fn from(c: ComponentArg) -> Self {
        match c {
            ComponentArg::Intent => Component::Intent,
            ComponentArg::Cf => Component::Cf,
            ComponentArg::Gen => Component::Gen,
            ComponentArg::Align => Component::Align,
            ComponentArg::All => Component::All,
        }
    }
}

fn context(cli: &Cli) -> Result<Context> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Context::new(config, &cli.output, cli.force)
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = context(cli)?;
    let print_paths = |paths: Vec<PathBuf>| paths.iter().for_each(|p| println!("wrote {}", p.display()));
    match &cli.command {
        Command::Generate => print_paths(commands::cmd_generate(&ctx)?),
        Command::Train { component } => print_paths(commands::cmd_train(&ctx, (*component).into())?),
        Command::Recommend {
            user,
            k,
            cold_start_semantic,
        } => print!(
            "{}",
            commands::cmd_recommend(&ctx, user, *k, cold_start_semantic.as_deref())?
        ),
        Command::Evaluate => {
            let paths = commands::cmd_evaluate(&ctx)?;
            print!(
                "{}",
                fs::read_to_string(ctx.path("comparison.txt")).map_err(|e| Error::io(ctx.path("comparison.txt"), e))?
            );
            print_paths(paths);
        }
        Command::Gridsearch => {
            let (result, paths) = commands::cmd_gridsearch(&ctx)?;
            println!("best weights {} (score {})", result.best, result.best_score);
            print_paths(paths);
        }
        Command::Bench => {
            let (_, path) = commands::cmd_bench(&ctx)?;
            print!("{}", fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
