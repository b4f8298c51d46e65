use std::path::Path;

use clap::Args;
use deepnorm::analysis::{
    default_bound_suite, finite_difference_check, fixed_len_probe_batch, grad_norm_profile, probe_sublayers, random_probe_batch,
    run_bound_suite, BoundReport, BoundedDistributionSpec, DistKind, GradCheckReport, GradCorruption, LayerStats,
    LossFn, ParamCheck, FD_STEP,
};
use deepnorm::checkpoint;
use deepnorm::data::parse_ids;
use deepnorm::layers::NormOrder;
use deepnorm::model::{ModelConfig, TransformerModel, PAD};
use deepnorm::report::{write_csv, write_json};
use deepnorm::rng::Rng;
use deepnorm::train::{run_grid, train_loop_with, EvalRecord, TrainHooks, Verdict};
use deepnorm::VERSION;
use serde::Serialize;

use crate::config::{CliConfig, Overrides};
use crate::Failure;

/// Max relative error accepted by `grad-check`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn model_rng(seed: u64) -> Rng {
    // Same stream the training loop builds its model from.
    Rng::new(seed).split("model")
}

#[derive(Serialize)]
struct StatsRow {
    stack: &'static str,
    layer_index: usize,
    sublayer_kind: &'static str,
    mu: f64,
    sigma: f64,
    w_over_sigma: f64,
    grad_norm: f64,
}

impl From<&LayerStats> for StatsRow {
    fn from(s: &LayerStats) -> Self {
        use deepnorm::model::{Stack, SublayerKind};
        StatsRow {
            stack: match s.stack {
                Stack::Encoder => "encoder",
                Stack::Decoder => "decoder",
            },
            layer_index: s.layer_index,
            sublayer_kind: match s.sublayer_kind {
                SublayerKind::SelfAttn => "self_attn",
                SublayerKind::CrossAttn => "cross_attn",
                SublayerKind::Ffn => "ffn",
            },
            mu: s.mu,
            sigma: s.sigma,
            w_over_sigma: s.w_over_sigma,
            grad_norm: s.grad_norm,
        }
    }
}

#[derive(Serialize)]
struct ProbeInfo {
    sequences: usize,
    source_tokens: usize,
    seed: u64,
}

#[derive(Serialize)]
struct Assertion {
    requested: bool,
    limit: f64,
    holds: bool,
}

#[derive(Serialize)]
struct StatsReport<'a> {
    version: &'static str,
    command: &'static str,
    config: &'a CliConfig,
    probe: ProbeInfo,
    max_sigma: f64,
    encoder_depth_ratio: Option<f64>,
    /// Largest gap when rebuilding post-norm outputs from recorded statistics (v1 only).
    identity_max_error: Option<f64>,
    sigma_bound: Assertion,
    stats: Vec<LayerStats>,
}

pub fn init_stats(cfg: &CliConfig, out: &Path, assert_bound: bool) -> Result<(), Failure> {
    let seed = cfg.train.seed;
    let model = TransformerModel::build(cfg.model.clone(), &model_rng(seed))?;
    let probe = fixed_len_probe_batch(cfg.task.vocab_size, cfg.task.max_len, cfg.analysis.probe_tokens, seed)?;
    let smoothing = cfg.train.label_smoothing;
    let loss: LossFn = &|g, logits, b| g.cross_entropy(logits, &b.tgt_out.ids, PAD, smoothing);
    let profile = grad_norm_profile(&model, &probe, loss)?;
    let identity_max_error = match cfg.model.norm_order {
        NormOrder::V1 => Some(
            probe_sublayers(&model, &probe)?
                .iter()
                .map(|s| s.post_norm_identity_error())
                .fold(0.0, f64::max),
        ),
        NormOrder::V2 => None,
    };
    let max_sigma = profile.stats.iter().map(|s| s.sigma).fold(0.0, f64::max);
    let limit = 1.0 + cfg.analysis.sigma_tolerance;
    let holds = profile.stats.iter().all(|s| s.sigma <= limit);
    let report = StatsReport {
        version: VERSION,
        command: "init-stats",
        config: cfg,
        probe: ProbeInfo {
            sequences: probe.size(),
            source_tokens: probe.src.ids.iter().filter(|&&t| t != PAD).count(),
            seed,
        },
        max_sigma,
        encoder_depth_ratio: profile.encoder_depth_ratio,
        identity_max_error,
        sigma_bound: Assertion {
            requested: assert_bound,
            limit,
            holds,
        },
        stats: profile.stats,
    };
    let rows: Vec<StatsRow> = report.stats.iter().map(StatsRow::from).collect();
    write_csv(&out.join("stats.csv"), &rows)?;
    write_json(&out.join("stats.json"), &report)?;
    println!(
        "{} sublayers, max sigma {max_sigma:.6}, limit {limit}, encoder grad ratio {}",
        rows.len(),
        report.encoder_depth_ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    if assert_bound && !holds {
        return Err(Failure::Check(format!("max sigma {max_sigma:.6} exceeds {limit}")));
    }
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct BoundArgs {
    /// Named suite; used when no single distribution is given.
    #[arg(long, default_value = "default")]
    suite: String,
    /// Single distribution: uniform, beta, two-point or truncated-normal.
    #[arg(long)]
    dist: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, allow_hyphen_values = true)]
    mean: Option<f64>,
    #[arg(long)]
    std: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

impl BoundArgs {
    fn specs(&self) -> Result<Vec<BoundedDistributionSpec>, Failure> {
        if self.dist.is_none() && self.a.is_none() && self.b.is_none() {
            return match self.suite.as_str() {
                "default" => Ok(default_bound_suite()),
                other => Err(Failure::Config(format!("unknown suite `{other}`"))),
            };
        }
        let (a, b) = (self.a.unwrap_or(0.0), self.b.unwrap_or(1.0));
        let kind = match self.dist.as_deref().unwrap_or("uniform") {
            "uniform" => DistKind::Uniform,
            "beta" => DistKind::Beta {
                alpha: self.alpha,
                beta: self.beta,
            },
            "two-point" | "two_point" => DistKind::TwoPoint { p: self.p },
            "truncated-normal" | "truncated_normal" => DistKind::TruncatedNormal {
                mean: self.mean.unwrap_or((a + b) / 2.0),
                std: self.std.unwrap_or((b - a) / 4.0),
            },
            other => return Err(Failure::Config(format!("unknown distribution `{other}`"))),
        };
        let spec = BoundedDistributionSpec::new(kind, a, b);
        spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(vec![spec])
    }
}

#[derive(Serialize)]
struct BoundFile<'a> {
    version: &'static str,
    command: &'static str,
    config: &'a CliConfig,
    seed: u64,
    all_hold: bool,
    rows: &'a [BoundReport],
}

pub fn bound_check(cfg: &CliConfig, args: &BoundArgs, out: &Path) -> Result<(), Failure> {
    let specs = args.specs()?;
    let n = args.samples.unwrap_or(cfg.analysis.bound_samples);
    if n < 1000 {
        return Err(Failure::Config("--samples must be >= 1000".into()));
    }
    let rows = run_bound_suite(&specs, n, cfg.train.seed)?;
    let all_hold = rows.iter().all(|r| r.holds);
    write_csv(&out.join("bound.csv"), &rows)?;
    write_json(
        &out.join("bound.json"),
        &BoundFile {
            version: VERSION,
            command: "bound-check",
            config: cfg,
            seed: cfg.train.seed,
            all_hold,
            rows: &rows,
        },
    )?;
    for r in &rows {
        println!(
            "{:<28} [{}, {}] std {:.6} < {} : {}",
            r.distribution, r.a, r.b, r.empirical_std, r.bound, r.holds
        );
    }
    if all_hold {
        Ok(())
    } else {
        Err(Failure::Check("a distribution reached std >= b - a".into()))
    }
}

/// The micro model audited by `grad-check` before flag overrides.
pub fn micro_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        vocab_size: vocab,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

#[derive(Serialize)]
struct GradFile<'a> {
    version: &'static str,
    command: &'static str,
    model: &'a ModelConfig,
    seed: u64,
    tolerance: f64,
    passed: bool,
    corrupted: bool,
    #[serde(flatten)]
    report: &'a GradCheckReport,
}

pub fn grad_check(o: &Overrides, vocab: usize, corrupt: bool, out: &Path) -> Result<(), Failure> {
    let mut cfg = micro_config(vocab);
    let seed = o.seed.unwrap_or(1);
    cfg.norm_order = o.order.unwrap_or(cfg.norm_order);
    cfg.init_family = o.init.unwrap_or(cfg.init_family);
    cfg.enc_layers = o.enc.unwrap_or(cfg.enc_layers);
    cfg.dec_layers = o.dec.unwrap_or(cfg.dec_layers);
    cfg.d_model = o.d_model.unwrap_or(cfg.d_model);
    cfg.n_heads = o.heads.unwrap_or(cfg.n_heads);
    cfg.validate()?;
    let mut model = TransformerModel::build(cfg.clone(), &model_rng(seed))?;
    let batch = random_probe_batch(vocab, 6, 24, seed)?;
    let loss: LossFn = &|g, logits, b| g.cross_entropy(logits, &b.tgt_out.ids, PAD, 0.1);
    let corruption = corrupt.then(|| GradCorruption {
        param: model.params.len() - 1,
        index: 0,
        delta: 1e-2,
    });
    let report = finite_difference_check(&mut model, &batch, loss, FD_STEP, corruption)?;
    let passed = report.max_rel_error <= GRAD_TOLERANCE;
    write_csv::<ParamCheck>(&out.join("gradcheck.csv"), &report.per_param)?;
    write_json(
        &out.join("gradcheck.json"),
        &GradFile {
            version: VERSION,
            command: "grad-check",
            model: &cfg,
            seed,
            tolerance: GRAD_TOLERANCE,
            passed,
            corrupted: corrupt,
            report: &report,
        },
    )?;
    let worst = report.worst.as_ref().map_or("none".to_string(), |w| format!("{}[{}]", w.param, w.index));
    println!(
        "checked {} gradients, max relative error {:.3e} at {worst}",
        report.n_checked, report.max_rel_error
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:.3e} > {GRAD_TOLERANCE:e} (worst: {worst})",
            report.max_rel_error
        )))
    }
}

pub fn train(cfg: &CliConfig, out: &Path, verbose: bool) -> Result<(), Failure> {
    let mut progress = |r: &EvalRecord| {
        if verbose {
            eprintln!(
                "step {:>6}  train {:.4}  eval {:.4}  acc {:.4}  lr {:.3e}",
                r.step, r.train_loss, r.eval_loss, r.eval_accuracy, r.lr
            );
        }
    };
    let hooks = TrainHooks {
        out_dir: Some(out),
        on_eval: Some(&mut progress),
        ..TrainHooks::default()
    };
    let outcome = train_loop_with(&cfg.model, &cfg.train, &cfg.task, None, hooks)?;
    let r = &outcome.report;
    println!(
        "{} after {} steps ({}); final accuracy {}",
        r.verdict.name(),
        r.steps_run,
        r.reason,
        r.final_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    if let Some(e) = outcome.persist_error {
        return Err(Failure::Runtime(format!("could not persist reports: {e}")));
    }
    match r.verdict {
        Verdict::Converged => Ok(()),
        v => Err(Failure::Check(format!("verdict {}", v.name()))),
    }
}

pub fn grid(cfg: &CliConfig, out: &Path) -> Result<(), Failure> {
    let report = run_grid(&cfg.grid, &cfg.model, &cfg.train, &cfg.task, Some(out))?;
    print!("{:>6}", "depth");
    for c in &report.columns {
        print!(" {c:>16}");
    }
    println!();
    for (d, row) in report.rows.iter().zip(&report.verdicts) {
        print!("{d:>6}");
        for v in row {
            print!(" {:>16}", v.name());
        }
        println!();
    }
    Ok(())
}

#[derive(Serialize)]
struct DecodeFile<'a> {
    version: &'static str,
    command: &'static str,
    model: &'a ModelConfig,
    max_len: usize,
    inputs: &'a [Vec<usize>],
    outputs: &'a [Vec<usize>],
}

pub fn decode(ckpt: &Path, src: &[String], max_len: Option<usize>, out: &Path) -> Result<(), Failure> {
    let model = checkpoint::load(ckpt)?;
    let inputs = src
        .iter()
        .map(|s| parse_ids(s, model.cfg.vocab_size))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Config)?;
    if inputs.iter().any(Vec::is_empty) {
        return Err(Failure::Config("empty --src sequence".into()));
    }
    let max_len = max_len.unwrap_or(model.cfg.max_seq_len);
    let outputs = model.decode_greedy_batch(&inputs, max_len)?;
    for o in &outputs {
        println!("{}", o.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
    }
    write_json(
        &out.join("decode.json"),
        &DecodeFile {
            version: VERSION,
            command: "decode",
            model: &model.cfg,
            max_len,
            inputs: &inputs,
            outputs: &outputs,
        },
    )?;
    Ok(())
}
