use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qexgan::adversarial::RewardMode;
use qexgan::conditions::Strategy;
use qexgan::workflow::{self, Overrides, RunConfig};
use qexgan::{Error, Result};

#[derive(Parser)]
#[command(
    name = "qexgan",
    version,
    about = "Conditional sequence GAN for product-search query expansion"
)]
struct Cli {
    /// TOML run configuration. Defaults to the config.toml saved by `prepare`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "QEXGAN_WORKDIR")]
    workdir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    /// Overrides the configured epoch count of the training command.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Halves the epoch count (rounded down, at least one).
    #[arg(long, global = true)]
    half_epochs: bool,
    #[arg(long, global = true, value_enum)]
    reward_mode: Option<RewardModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build corpus, vocabulary, reduced embeddings and condition tables.
    Prepare,
    /// Pre-train the generator with teacher forcing.
    PretrainGen,
    /// Pre-train the discriminator on real documents and sampled expansions.
    PretrainDisc,
    /// Policy-gradient training against the discriminator.
    AdvTrain,
    /// Expand queries and print one JSON object per line.
    Expand {
        /// Queries to expand.
        queries: Vec<String>,
        /// File with one query per line.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate on the test split and print the results table.
    Evaluate,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    #[value(name = "self")]
    SelfCondition,
    Tfidf,
    DocSim,
    WordSim,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::SelfCondition => Strategy::SelfCondition,
            StrategyArg::Tfidf => Strategy::TfIdf,
            StrategyArg::DocSim => Strategy::DocSim,
            StrategyArg::WordSim => Strategy::WordSim,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardModeArg {
    ProbReal,
    DiscLoss,
}

impl From<RewardModeArg> for RewardMode {
    fn from(r: RewardModeArg) -> Self {
        match r {
            RewardModeArg::ProbReal => RewardMode::ProbReal,
            RewardModeArg::DiscLoss => RewardMode::DiscLoss,
        }
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workdir: self.workdir.clone(),
            strategy: self.strategy.map(Into::into),
            epochs: self.epochs,
            half_epochs: self.half_epochs,
            reward_mode: self.reward_mode.map(Into::into),
        }
    }

    fn config(&self, overrides: &Overrides) -> Result<RunConfig> {
        let path = match (&self.config, &self.workdir) {
            (Some(p), _) => p.clone(),
            (None, Some(w)) => w.join(workflow::CONFIG_FILE),
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "no configuration: pass --config, or --workdir of a prepared run".into(),
                ))
            }
        };
        if !path.is_file() {
            return Err(Error::MissingFile(path).in_artifact("config"));
        }
        let mut config = RunConfig::load(&path)?;
        overrides.apply(&mut config);
        config.validate()?;
        Ok(config)
    }
}

fn read_queries(queries: &[String], input: Option<&Path>) -> Result<Vec<String>> {
    let mut all = queries.to_vec();
    if let Some(path) = input {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()).in_artifact("input"))?;
        all.extend(text.lines().filter(|l| !l.trim().is_empty()).map(String::from));
    }
    if all.is_empty() {
        return Err(Error::InvalidConfig("expand needs a query or --input".into()));
    }
    Ok(all)
}

fn run(cli: &Cli) -> Result<()> {
    let overrides = cli.overrides();
    let config = cli.config(&overrides)?;
    match &cli.command {
        Command::Prepare => {
            let s = workflow::prepare(&config)?;
            log::info!("{} pairs kept, {} dropped", s.stats.pairs, s.dropped);
            for p in &s.artifacts {
                println!("{}", p.display());
            }
        }
        Command::PretrainGen | Command::PretrainDisc | Command::AdvTrain => {
            let s = match cli.command {
                Command::PretrainGen => workflow::pretrain_gen(&config, &overrides)?,
                Command::PretrainDisc => workflow::pretrain_disc(&config, &overrides)?,
                _ => workflow::adv_train(&config, &overrides)?,
            };
            log::info!("{} epochs run, history in {}", s.epochs_run, s.history.display());
            for p in &s.checkpoints {
                println!("{}", p.display());
            }
        }
        Command::Expand { queries, input } => {
            let queries = read_queries(queries, input.as_deref())?;
            for record in workflow::expand(&config, &queries)? {
                println!("{}", serde_json::to_string(&record)?);
            }
        }
        Command::Evaluate => {
            let out = workflow::evaluate(&config)?;
            log::info!("report written to {}", out.report_path.display());
            for row in &out.table {
                println!("{row}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
