use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ebm_core::{ActivationKind, NetworkSpec};
use ebm_experiments::{run, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ebm", version, about = "Energy-based credit assignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Energy decomposition during clamped PC inference
    Fig2a(Flags),
    /// Activity-change direction against backprop gradients during inference
    Fig2b(Flags),
    /// Equilibrium distance against gradient error over a λ sweep
    Fig2c(Flags),
    /// λ-linearity, PC-Nudge vs backprop training, and update similarity on MNIST
    Fig3(Flags),
    /// Oracle comparisons of every learning rule on small random nets
    Gradcheck(Flags),
    /// Train one rule on MNIST
    Train(Flags),
}

#[derive(Args, Clone, Debug)]
struct Flags {
    /// Seeds: `3`, `0,1,2` or `0..10`
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated λ values
    #[arg(long)]
    lambda: Option<String>,
    /// Comma-separated feedback gains
    #[arg(long)]
    gamma: Option<String>,
    /// Inference steps (the step budget; a cap when running to convergence)
    #[arg(long)]
    steps: Option<usize>,
    /// Inference step size
    #[arg(long = "lr-x")]
    lr_x: Option<f64>,
    /// Weight learning rate (before the 1/λ scaling of PC-Nudge)
    #[arg(long = "lr-w")]
    lr_w: Option<f64>,
    /// Directory with MNIST IDX files (plain or .gz)
    #[arg(long = "data-dir", env = "EBM_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated layer sizes, e.g. 784,128,64,10
    #[arg(long)]
    net: Option<String>,
    /// Hidden activation: relu, tanh or linear
    #[arg(long)]
    activation: Option<ActivationKind>,
    /// Training and test subset sizes: `N` or `N,M`
    #[arg(long)]
    subset: Option<String>,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Learning rule for `train`: pc_nudge, backprop, first_step, ep, chl, pc
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let items = s
        .split(',')
        .map(|t| t.trim().parse::<T>().ok().with_context(|| format!("bad {what} value '{t}'")))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        bail!("empty {what} list");
    }
    Ok(items)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {s}");
        }
        return Ok((a..b).collect());
    }
    parse_list(s, "seed")
}

fn build_config(experiment: Experiment, f: &Flags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults(experiment);
    if let Some(s) = &f.seed {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(s) = &f.lambda {
        cfg.lambda_values = parse_list(s, "lambda")?;
    }
    if let Some(s) = &f.gamma {
        cfg.gamma_values = parse_list(s, "gamma")?;
    }
    if let Some(n) = f.steps {
        cfg.inference.max_steps = n;
    }
    if let Some(x) = f.lr_x {
        cfg.inference.step_size = x;
    }
    if let Some(x) = f.lr_w {
        cfg.weight_lr = x;
    }
    if f.net.is_some() || f.activation.is_some() {
        let sizes = match &f.net {
            Some(s) => parse_list(s, "layer size")?,
            None => cfg.net.layer_sizes.clone(),
        };
        let act = f.activation.unwrap_or(cfg.net.hidden_activation);
        cfg.net = NetworkSpec::new(sizes, act, cfg.net.output_head)?;
    }
    if let Some(s) = &f.subset {
        let v: Vec<usize> = parse_list(s, "subset")?;
        cfg.train_subset = v[0];
        if let Some(t) = v.get(1) {
            cfg.test_subset = *t;
        }
    }
    if let Some(r) = &f.rule {
        cfg.rule = r.clone();
    }
    if let Some(e) = f.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = f.batch_size {
        cfg.batch_size = b;
    }
    if cfg.seeds.is_empty() || cfg.gamma_values.is_empty() || cfg.lambda_values.is_empty() {
        bail!("seed, lambda and gamma lists must be non-empty");
    }
    cfg.data_dir = f.data_dir.clone();
    cfg.jobs = f.jobs.max(1);
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, flags) = match &cli.command {
        Command::Fig2a(f) => (Experiment::Fig2a, f),
        Command::Fig2b(f) => (Experiment::Fig2b, f),
        Command::Fig2c(f) => (Experiment::Fig2c, f),
        Command::Fig3(f) => (Experiment::Fig3, f),
        Command::Gradcheck(f) => (Experiment::Gradcheck, f),
        Command::Train(f) => (Experiment::Train, f),
    };
    let result = (|| -> Result<bool> {
        let cfg = build_config(experiment, flags)?;
        let report = run(&cfg)?;
        let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("out").join(experiment.name()));
        let written = report.write(&out).with_context(|| format!("writing to {}", out.display()))?;
        print!("{}", report.summary.render());
        for p in written {
            eprintln!("wrote {}", p.display());
        }
        Ok(report.summary.all_passed())
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
