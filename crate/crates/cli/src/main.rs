use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocl_cli::commands;
use ocl_cli::{CliError, DatasetSource, RunConfig};
use ocl_core::data::Dataset;
use ocl_core::gradcheck::SuiteConfig;
use ocl_core::masking::MaskStrategy;
use ocl_core::model::InputShape;

#[derive(Parser)]
#[command(name = "ocl", version, about = "Orthogonal center learning: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset (CSV + manifest).
    Generate(RunArgs),
    /// Train a model; writes trace.jsonl and checkpoint.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's query/gallery split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Also write query/gallery embeddings as CSV.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Finite-difference check of every loss gradient and the pooling head.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train the loss ladder under one seed and tabulate the results.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Add one full-loss row per mask strategy.
        #[arg(long)]
        strategy_sweep: bool,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV (otherwise a synthetic set is generated in memory).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    spread: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    separation: Option<f64>,
    /// Treat rows as C×H×W images, e.g. `1,8,8`.
    #[arg(long, value_parser = parse_image)]
    image: Option<InputShape>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, default_value_t = 0.001, allow_hyphen_values = true)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4, allow_hyphen_values = true)]
    weight_decay: f64,
    #[arg(long, value_delimiter = ',', default_value = "80,180,300")]
    decay_epochs: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    alpha1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha3: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mask_p: Option<f64>,
    #[arg(long)]
    mask_strategy: Option<MaskStrategy>,
}

fn parse_image(s: &str) -> Result<InputShape, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad image shape `{s}`")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [channels, height, width] => Ok(InputShape::Image { channels, height, width }),
        _ => Err(format!("image shape must be C,H,W (got `{s}`)")),
    }
}

impl RunArgs {
    /// Config file (if any), then explicit flags, then `OCL_SEED`.
    fn resolve(&self, matches: &clap::ArgMatches) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        // Defaulted flags only override a config file when given explicitly.
        let explicit = |id: &str| {
            self.config.is_none() || matches.value_source(id) == Some(clap::parser::ValueSource::CommandLine)
        };
        if let Some(p) = &self.data {
            c.dataset = DatasetSource::Csv { path: p.clone() };
        }
        if let DatasetSource::Synthetic { spec } = &mut c.dataset {
            set(&mut spec.num_classes, self.classes);
            set(&mut spec.samples_per_class, self.samples_per_class);
            set(&mut spec.dim, self.dim);
            set(&mut spec.cluster_spread, self.spread);
            set(&mut spec.separation, self.separation);
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        set(&mut c.seed, self.seed);
        if self.image.is_some() {
            c.input = self.image;
        }
        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.eval_every, self.eval_every);
        if explicit("lr") {
            t.schedule.base_lr = self.lr;
        }
        if explicit("weight_decay") {
            t.adam.weight_decay = self.weight_decay;
        }
        if explicit("decay_epochs") {
            t.schedule.decay_epochs = self.decay_epochs.clone();
        }
        if explicit("p") {
            t.batch.p = self.p;
        }
        if explicit("k") {
            t.batch.k = self.k;
        }
        set(&mut t.weights.alpha1, self.alpha1);
        set(&mut t.weights.alpha2, self.alpha2);
        set(&mut t.weights.alpha3, self.alpha3);
        set(&mut t.mask.p, self.mask_p);
        set(&mut t.mask.strategy, self.mask_strategy);
        if self.batch_size.is_some() {
            c.batch_size = self.batch_size;
        }
        c.apply_env()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn sub_matches(m: &clap::ArgMatches) -> &clap::ArgMatches {
    m.subcommand().map_or(m, |(_, sub)| sub)
}

fn run(cli: Cli, matches: &clap::ArgMatches) -> Result<(), CliError> {
    let sub = sub_matches(matches);
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve(sub)?;
            let DatasetSource::Synthetic { spec } = &cfg.dataset else {
                return Err(CliError::Config("generate needs a synthetic dataset spec, not --data".into()));
            };
            let path = commands::generate(spec, cfg.seed, &cfg.output_dir)?;
            println!("wrote {}", path.display());
        }
        Command::Train { run, resume } => {
            let cfg = run.resolve(sub)?;
            let out = commands::train(&cfg, resume.as_deref())?;
            if let Some(last) = out.trainer.trace.last() {
                println!("epoch {} total {:.6} lr {:.3e}", last.epoch, last.total, last.lr);
            }
            println!("wrote {} and {}", out.trace_path.display(), out.checkpoint_path.display());
        }
        Command::Eval { checkpoint, run, export_embeddings } => {
            let cfg = run.resolve(sub)?;
            cfg.validate()?;
            let ds: Dataset = cfg.load_dataset()?;
            let r = commands::eval(&checkpoint, &ds, &cfg.output_dir, export_embeddings)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Gradcheck { seed, instances, corrupt } => {
            let seed = match std::env::var(ocl_cli::config::SEED_ENV) {
                Ok(s) => s.trim().parse().map_err(|_| CliError::Config(format!("OCL_SEED={s:?} is not an unsigned integer")))?,
                Err(_) => seed,
            };
            let suite = SuiteConfig { seed, instances, corrupt, ..Default::default() };
            let (_, table, status) = commands::gradcheck(&suite);
            print!("{table}");
            status?;
        }
        Command::Ablate { run, strategy_sweep } => {
            let cfg = run.resolve(sub)?;
            let rows = commands::ablate(&cfg, strategy_sweep)?;
            for r in &rows {
                println!(
                    "{:<22} rank1 {:.4} mAP {:.4} corr {:.4} compact {:.4}",
                    r.rung, r.rank1, r.map, r.center_corr_mean, r.compactness
                );
            }
            println!("wrote {}", cfg.output_dir.join(commands::ABLATION_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = <Cli as clap::CommandFactory>::command().get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
