use clap::{Args, Parser, Subcommand};
use sbp_core::cli::{exit_code, run_chain_demo, run_gendata, run_gradsim, run_memory_report, run_train, TrainConfig};
use sbp_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sbp", version, about = "Stochastic backpropagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write per-step metrics and a checkpoint.
    Train(Common),
    /// Compare SBP and exact weight gradients for each configured variant.
    Gradsim(Common),
    /// Tabulate cached activations and the analytic attention memory ratios.
    Memreport(Common),
    /// Classify input-gradient positions of small stacked SBP layers.
    Chaindemo(Common),
    /// Write the configured synthetic dataset to disk.
    Gendata(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `optimizer.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every mask plan under `<out>/masks`.
    #[arg(long)]
    dump_masks: bool,
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<Option<TrainConfig>> {
        let Some(path) = &self.config else { return Ok(None) };
        let mut cfg = TrainConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.optimizer.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        Ok(Some(cfg))
    }

    fn require(&self) -> Result<TrainConfig> {
        self.config()?.ok_or_else(|| Error::Config("--config is required".into()))
    }

    fn out_dir(&self, cfg: Option<&TrainConfig>) -> PathBuf {
        self.out.clone().or_else(|| cfg.map(|c| c.output.dir.clone())).unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn run(command: &Command) -> Result<PathBuf> {
    match command {
        Command::Train(a) => {
            let cfg = a.require()?;
            Ok(run_train(&cfg, &a.out_dir(Some(&cfg)), a.dump_masks)?.metrics_path)
        }
        Command::Gradsim(a) => {
            let cfg = a.require()?;
            Ok(run_gradsim(&cfg, &a.out_dir(Some(&cfg)))?.1)
        }
        Command::Memreport(a) => {
            let cfg = a.require()?;
            Ok(run_memory_report(&cfg, &a.out_dir(Some(&cfg)))?.1)
        }
        Command::Chaindemo(a) => {
            let cfg = a.config()?;
            Ok(run_chain_demo(cfg.as_ref(), &a.out_dir(cfg.as_ref()))?.1)
        }
        Command::Gendata(a) => {
            let cfg = a.require()?;
            run_gendata(&cfg.dataset, &a.out_dir(Some(&cfg)))
        }
    }
}

fn common(command: &Command) -> &Common {
    match command {
        Command::Train(a) | Command::Gradsim(a) | Command::Memreport(a) | Command::Chaindemo(a) | Command::Gendata(a) => a,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = common(&cli.command).threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli.command) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
