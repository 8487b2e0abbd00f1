use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nsreg::detectors::HeadKind;
use nsreg::graph::FeatureFormat;
use nsreg_cli::{
    cmd_eval, cmd_gradcheck, cmd_sweep_alpha, cmd_synth, cmd_train, CliResult, RunConfig, EXIT_OK,
    EXIT_VERIFICATION,
};

#[derive(Parser)]
#[command(name = "nsreg", version, about = "Open-set graph anomaly detection with normal structure regularisation")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Graph directory (edges.txt, features.csv|features.bin, labels.csv).
    /// Without it, a synthetic graph is generated from the config.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark graph.
    Synth(SynthArgs),
    /// Train one model on one rotation.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate across relation-label values.
    SweepAlpha(SweepArgs),
    /// Finite-difference check of the training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Bce,
    Deviation,
    Hypersphere,
}

impl From<Head> for HeadKind {
    fn from(h: Head) -> HeadKind {
        match h {
            Head::Bce => HeadKind::Bce,
            Head::Deviation => HeadKind::Deviation,
            Head::Hypersphere => HeadKind::Hypersphere,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Normal nodes.
    #[arg(long)]
    n_normal: Option<usize>,
    /// Nodes per anomaly class.
    #[arg(long)]
    n_anomaly_per_class: Option<usize>,
    /// Anomaly classes (at least 2).
    #[arg(long)]
    anomaly_classes: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Feature file format.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Default)]
struct ModelArgs {
    /// Base seed; multi-seed runs use seed, seed + 1, ...
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Anomaly scoring head.
    #[arg(long, value_enum)]
    head: Option<Head>,
    /// Relation regularisation term.
    #[arg(long, value_enum)]
    nsr: Option<Switch>,
    /// Label of unconnected labelled-normal pairs.
    #[arg(long)]
    alpha: Option<f64>,
    /// Sample unconnected labelled-normal pairs.
    #[arg(long, value_enum)]
    unconnected_normal: Option<Switch>,
    /// Weight of the relation term in the total loss.
    #[arg(long)]
    nsr_weight: Option<f64>,
    /// Labelled anomalies drawn from the seen class.
    #[arg(long)]
    labelled_anomalies: Option<usize>,
    /// Fraction of normal nodes labelled for training.
    #[arg(long)]
    labelled_normal_fraction: Option<f64>,
    /// Seed of the synthetic graph when no --data is given.
    #[arg(long)]
    synth_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Rotation, i.e. index of the seen anomaly class.
    #[arg(long)]
    rotation: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Rotation, i.e. index of the seen anomaly class.
    #[arg(long)]
    rotation: Option<usize>,
    /// Seed of the synthetic graph when no --data is given.
    #[arg(long)]
    synth_seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated relation-label values.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Seeds per rotation.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Nodes in the synthetic check graph (at most 50).
    #[arg(long)]
    nodes: Option<usize>,
    /// Perturb one analytic gradient entry (negative control).
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    let t = &mut cfg.train;
    if let Some(v) = m.seed {
        t.seed = v;
    }
    if let Some(v) = m.epochs {
        t.epochs = v;
    }
    if let Some(v) = m.lr {
        t.learning_rate = v;
    }
    if let Some(v) = m.head {
        t.head = v.into();
    }
    if let Some(v) = m.nsr {
        t.nsr_enabled = v.into();
    }
    if let Some(v) = m.alpha {
        t.alpha = v;
    }
    if let Some(v) = m.unconnected_normal {
        t.use_unconnected_normal = v.into();
    }
    if let Some(v) = m.nsr_weight {
        t.nsr_weight = v;
    }
    if let Some(v) = m.labelled_anomalies {
        t.n_labelled_anomalies = v;
    }
    if let Some(v) = m.labelled_normal_fraction {
        t.labelled_normal_fraction = v;
    }
    if let Some(v) = m.synth_seed {
        cfg.synth_seed = v;
    }
}

fn run(cli: Cli) -> CliResult<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(data) = cli.data {
        cfg.data_dir = Some(data);
    }
    match cli.command {
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            if let Some(v) = a.n_normal {
                s.n_normal = v;
            }
            if let Some(v) = a.n_anomaly_per_class {
                s.n_anomaly_per_class = v;
            }
            if let Some(v) = a.anomaly_classes {
                s.n_anomaly_classes = v;
            }
            if let Some(v) = a.feature_dim {
                s.feature_dim = v;
            }
            if let Some(v) = a.seed {
                cfg.synth_seed = v;
            }
            if let Some(f) = a.format {
                cfg.feature_format = match f {
                    Format::Csv => FeatureFormat::Csv,
                    Format::Binary => FeatureFormat::Binary,
                };
            }
            let manifest = cmd_synth(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&manifest).map_err(nsreg::Error::from)?);
        }
        Command::Train(a) => {
            apply_model(&mut cfg, &a.model);
            if let Some(r) = a.rotation {
                cfg.rotation = r;
            }
            let (state, history) = cmd_train(&cfg)?;
            let last = history.last().map_or(f64::NAN, |l| l.total);
            println!(
                "trained {} iterations, final loss {last:.6}; checkpoint in {}",
                state.iteration,
                cfg.out_dir.display()
            );
        }
        Command::Eval(a) => {
            if let Some(c) = a.checkpoint {
                cfg.checkpoint = Some(c);
            }
            if let Some(r) = a.rotation {
                cfg.rotation = r;
            }
            if let Some(s) = a.synth_seed {
                cfg.synth_seed = s;
            }
            let report = cmd_eval(&cfg)?;
            print!("{}", report.to_csv());
        }
        Command::SweepAlpha(a) => {
            apply_model(&mut cfg, &a.model);
            if let Some(alphas) = a.alphas {
                cfg.alphas = alphas;
            }
            if let Some(s) = a.seeds {
                cfg.seeds = s;
            }
            let rows = cmd_sweep_alpha(&cfg)?;
            println!("{} runs written to {}", rows.len(), cfg.out_dir.join("sweep.csv").display());
        }
        Command::Gradcheck(a) => {
            apply_model(&mut cfg, &a.model);
            if let Some(n) = a.nodes {
                cfg.gradcheck_nodes = n;
            }
            let report = cmd_gradcheck(&cfg, a.corrupt_gradient)?;
            print!("{}", report.render());
            if !report.passed {
                return Ok(EXIT_VERIFICATION);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Training allocates and frees the same few hundred kilobytes every step;
/// returning them to the kernel each time costs more than the arithmetic.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_freed_memory() {
    const THRESHOLD: libc::c_int = 256 << 20;
    // SAFETY: mallopt only adjusts allocator tunables and is called before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, THRESHOLD);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_freed_memory() {}

fn main() -> ExitCode {
    keep_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
