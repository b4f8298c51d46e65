use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepnorm::data::TaskKind;
use deepnorm::init::InitFamily;
use deepnorm::layers::NormOrder;

use deepnorm_cli::config::{CliConfig, Overrides};
use deepnorm_cli::{commands, Failure};

#[derive(Parser)]
#[command(name = "deepnorm", version, about = "Post-norm vs pre-norm transformer lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory.
    #[arg(long, env = "DEEPNORM_OUT", default_value = "deepnorm-out")]
    out: PathBuf,
    #[arg(long)]
    order: Option<NormOrder>,
    #[arg(long)]
    init: Option<InitFamily>,
    #[arg(long)]
    enc: Option<usize>,
    #[arg(long)]
    dec: Option<usize>,
    #[arg(long = "d-model")]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    task: Option<TaskKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Residual-stream statistics of a freshly initialized model.
    InitStats {
        #[command(flatten)]
        common: Common,
        /// Exit 3 unless every sublayer has sigma <= 1 + tolerance.
        #[arg(long)]
        assert_bound: bool,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Monte-Carlo check that bounded distributions have std < b - a.
    BoundCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        bound: commands::BoundArgs,
    },
    /// Finite-difference audit of every gradient of a micro model.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 11)]
        vocab: usize,
        /// Negative control: perturb one analytic gradient element.
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Train one model on a synthetic task.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "batch-tokens")]
        batch_tokens: Option<usize>,
        #[arg(long = "lr-scale")]
        lr_scale: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Print one line per evaluation to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Train the depth x order x init comparison grid.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<NormOrder>>,
        #[arg(long, value_delimiter = ',')]
        inits: Option<Vec<InitFamily>>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "batch-tokens")]
        batch_tokens: Option<usize>,
        #[arg(long)]
        parallel: bool,
    },
    /// Greedy decoding with a saved checkpoint.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Space-separated source ids; repeat for several sequences.
        #[arg(long, required = true)]
        src: Vec<String>,
        #[arg(long = "max-len")]
        max_len: Option<usize>,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            order: self.order,
            init: self.init,
            enc: self.enc,
            dec: self.dec,
            d_model: self.d_model,
            heads: self.heads,
            task: self.task,
        }
    }

    fn resolve(&self, edit: impl FnOnce(&mut CliConfig)) -> Result<CliConfig, Failure> {
        let mut cfg = CliConfig::load(self.config.as_deref())?;
        cfg.apply(&self.overrides());
        edit(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::InitStats {
            common,
            assert_bound,
            tolerance,
        } => {
            let cfg = common.resolve(|c| {
                if let Some(t) = tolerance {
                    c.analysis.sigma_tolerance = t;
                }
            })?;
            commands::init_stats(&cfg, &common.out, assert_bound)
        }
        Command::BoundCheck { common, bound } => {
            let cfg = common.resolve(|_| {})?;
            commands::bound_check(&cfg, &bound, &common.out)
        }
        Command::GradCheck {
            common,
            vocab,
            corrupt_grad,
        } => commands::grad_check(&common.overrides(), vocab, corrupt_grad, &common.out),
        Command::Train {
            common,
            steps,
            batch_tokens,
            lr_scale,
            warmup,
            verbose,
        } => {
            let cfg = common.resolve(|c| {
                let t = &mut c.train;
                t.steps = steps.unwrap_or(t.steps);
                t.batch_tokens = batch_tokens.unwrap_or(t.batch_tokens);
                t.lr_scale = lr_scale.unwrap_or(t.lr_scale);
                t.warmup = warmup.unwrap_or(t.warmup);
            })?;
            commands::train(&cfg, &common.out, verbose)
        }
        Command::Grid {
            common,
            depths,
            orders,
            inits,
            steps,
            batch_tokens,
            parallel,
        } => {
            let cfg = common.resolve(|c| {
                let g = &mut c.grid;
                g.depths = depths.unwrap_or(std::mem::take(&mut g.depths));
                g.orders = orders.unwrap_or(std::mem::take(&mut g.orders));
                g.inits = inits.unwrap_or(std::mem::take(&mut g.inits));
                g.parallel |= parallel;
                c.train.steps = steps.unwrap_or(c.train.steps);
                c.train.batch_tokens = batch_tokens.unwrap_or(c.train.batch_tokens);
            })?;
            cfg.grid.validate()?;
            commands::grid(&cfg, &common.out)
        }
        Command::Decode {
            common,
            checkpoint,
            src,
            max_len,
        } => commands::decode(&checkpoint, &src, max_len, &common.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("deepnorm: {f}");
            ExitCode::from(f.code())
        }
    }
}
