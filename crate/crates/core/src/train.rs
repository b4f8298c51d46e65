//! Training harness: inverse-square-root warmup schedule, Adam, convergence
//! verdicts, and the depth x order x init comparison grid.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{grad_norm_profile, LayerStats, LossFn, MIN_PROBE_TOKENS};
use crate::checkpoint;
use crate::data::{batch_iter, generate_task, Batch, Dataset, Example, TaskSpec};
use crate::error::{Error, Result};
use crate::init::InitFamily;
use crate::layers::NormOrder;
use crate::model::{argmax, ForwardCtx, ModelConfig, TransformerModel, PAD};
use crate::report::{write_csv, write_json};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    /// Upper bound on non-pad target tokens per step.
    pub batch_tokens: usize,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Held-out token accuracy that counts as converged.
    pub convergence_threshold: f64,
    /// Diverged once a post-warmup loss exceeds this multiple of the first loss.
    pub divergence_factor: f64,
    pub eval_every: usize,
    /// Stop at the first evaluation that meets the threshold.
    pub stop_on_converge: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            warmup: 400,
            batch_tokens: 2048,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.0,
            convergence_threshold: 0.99,
            divergence_factor: 1.5,
            eval_every: 100,
            stop_on_converge: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(Error::config("warmup", "must be >= 1"));
        }
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens", "must be >= 1"));
        }
        if !(self.lr_scale.is_finite() && self.lr_scale >= 0.0) {
            return Err(Error::config("lr_scale", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must be in [0, 1)"));
        }
        if !(self.convergence_threshold > 0.0 && self.convergence_threshold <= 1.0) {
            return Err(Error::config("convergence_threshold", "must be in (0, 1]"));
        }
        if !(self.divergence_factor > 1.0 && self.divergence_factor.is_finite()) {
            return Err(Error::config("divergence_factor", "must be > 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5) * lr_scale`.
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize, lr_scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("lr_schedule is defined for step >= 1"));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::contract("lr_schedule needs warmup >= 1 and d_model >= 1"));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup as f64).powf(-1.5);
    Ok((d_model as f64).powf(-0.5) * decay.min(ramp) * lr_scale)
}

/// Mean cross entropy over non-pad targets with uniform label smoothing.
/// `logits` is `[..., vocab]`; `targets` has one id per logits row.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize], pad_id: usize, label_smoothing: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(logits.shape.clone(), logits.data.clone())?;
    let l = g.cross_entropy(x, targets, pad_id, label_smoothing)?;
    Tensor::new(vec![1], g.value(l).to_vec())
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update using each tensor's `grad` slot (absent means zero).
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, lr: f64, betas: (f64, f64), eps: f64) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::contract("Adam state does not match the parameter list"));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::contract("Adam moment buffer has the wrong length"));
        }
        let Tensor { data, grad, .. } = p;
        let zeros;
        let grad = match grad {
            Some(g) => g.as_slice(),
            None => {
                zeros = vec![0.0; data.len()];
                &zeros
            }
        };
        for i in 0..data.len() {
            let gi = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Converged,
    Diverged,
    Undetermined,
    /// The run itself failed (grid cells only).
    Error,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::Diverged => "diverged",
            Verdict::Undetermined => "undetermined",
            Verdict::Error => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
}

/// Everything a run produced. Wall-clock time is kept out of the serialized
/// form so repeated runs give byte-identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub verdict: Verdict,
    /// Why the verdict was reached, in words.
    pub reason: String,
    /// Step at which the verdict fired, if it did.
    pub verdict_step: Option<usize>,
    pub steps_run: usize,
    /// False while the run is in progress or after an interruption.
    pub complete: bool,
    pub initial_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub evals: Vec<EvalRecord>,
    pub trace: Vec<StepRecord>,
    pub final_stats: Vec<LayerStats>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
    pub steps_run: usize,
}

/// Optional run-time hooks. All default to off.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Checked before every step; when set the run stops and stays undetermined.
    pub stop: Option<&'a AtomicBool>,
    /// Directory for `run.json`, `evals.csv`, `timing.json` and `model.ckpt`.
    pub out_dir: Option<&'a Path>,
    pub on_eval: Option<&'a mut dyn FnMut(&EvalRecord)>,
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: TransformerModel,
    /// First failure to persist a report; the in-memory run is unaffected.
    pub persist_error: Option<Error>,
}

/// Trains a freshly built model on `task` and returns the report and final model.
pub fn train_loop(model_cfg: &ModelConfig, train_cfg: &TrainConfig, task: &TaskSpec) -> Result<TrainOutcome> {
    train_loop_with(model_cfg, train_cfg, task, None, TrainHooks::default())
}

/// As [`train_loop`], optionally reusing pre-generated `(train, eval)` data.
pub fn train_loop_with(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    task: &TaskSpec,
    data: Option<&(Dataset, Dataset)>,
    mut hooks: TrainHooks,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    task.validate(model_cfg.max_seq_len)?;
    if task.vocab_size > model_cfg.vocab_size {
        return Err(Error::config(
            "vocab_size",
            format!("task vocab {} exceeds model vocab {}", task.vocab_size, model_cfg.vocab_size),
        ));
    }
    let generated;
    let (train_set, eval_set) = match data {
        Some((t, e)) => (t, e),
        None => {
            generated = generate_task(task)?;
            (&generated.0, &generated.1)
        }
    };

    let start = Instant::now();
    let root = Rng::new(train_cfg.seed);
    let mut model = TransformerModel::build(model_cfg.clone(), &root.split("model"))?;
    let mut dropout_rng = root.split("dropout");
    let mut batches = batch_iter(train_set, train_cfg.batch_tokens, root.split("batches").next_u64())?;
    let mut adam = AdamState::new(model.params.tensors_mut());
    let eval_batches = eval_batches(eval_set)?;

    let mut report = RunReport {
        version: crate::VERSION.to_string(),
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        task: task.clone(),
        verdict: Verdict::Undetermined,
        reason: "step budget exhausted".into(),
        verdict_step: None,
        steps_run: 0,
        complete: false,
        initial_loss: None,
        final_accuracy: None,
        evals: Vec::new(),
        trace: Vec::new(),
        final_stats: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let mut persist_error = None;
    let mut since_eval = (0.0, 0usize);

    for step in 1..=train_cfg.steps {
        if hooks.stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            report.reason = format!("interrupted before step {step}");
            break;
        }
        let batch = batches
            .next()
            .ok_or_else(|| Error::contract("batch iterator ended"))?;
        let lr = lr_schedule(step, model_cfg.d_model, train_cfg.warmup, train_cfg.lr_scale)?;
        let loss = train_step(&mut model, &batch, train_cfg, &mut adam, lr, &mut dropout_rng)?;
        report.steps_run = step;
        report.trace.push(StepRecord {
            step,
            loss,
            lr,
            tokens: batch.target_tokens(),
        });
        since_eval.0 += loss;
        since_eval.1 += 1;
        let initial = *report.initial_loss.get_or_insert(loss);

        if !loss.is_finite() {
            finish(&mut report, Verdict::Diverged, step, format!("non-finite loss at step {step}"));
            break;
        }
        if step > train_cfg.warmup && loss > train_cfg.divergence_factor * initial {
            let why = format!(
                "loss {loss:.4} exceeds {} x initial {initial:.4} after warmup",
                train_cfg.divergence_factor
            );
            finish(&mut report, Verdict::Diverged, step, why);
            break;
        }

        if step % train_cfg.eval_every == 0 || step == train_cfg.steps {
            let (eval_loss, acc) = evaluate(&model, &eval_batches)?;
            let rec = EvalRecord {
                step,
                train_loss: since_eval.0 / since_eval.1 as f64,
                eval_loss,
                eval_accuracy: acc,
                lr,
            };
            since_eval = (0.0, 0);
            report.final_accuracy = Some(acc);
            if let Some(cb) = hooks.on_eval.as_mut() {
                cb(&rec);
            }
            report.evals.push(rec);
            if acc >= train_cfg.convergence_threshold && report.verdict_step.is_none() {
                let why = format!("eval accuracy {acc:.4} >= {}", train_cfg.convergence_threshold);
                finish(&mut report, Verdict::Converged, step, why);
                if train_cfg.stop_on_converge {
                    break;
                }
            }
            if let Some(dir) = hooks.out_dir {
                keep_first(&mut persist_error, write_json(&dir.join("run.json"), &report));
            }
        }
    }

    let interrupted = hooks.stop.is_some_and(|s| s.load(Ordering::Relaxed));
    if interrupted && report.verdict_step.is_none() {
        report.reason = format!("interrupted after step {}", report.steps_run);
    }
    report.complete = !interrupted;
    if report.steps_run > 0 && report.verdict != Verdict::Diverged {
        report.final_stats = final_stats(&model, &eval_batches, train_cfg)?;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();

    if let Some(dir) = hooks.out_dir {
        keep_first(&mut persist_error, persist(dir, &report, &model));
    }
    Ok(TrainOutcome {
        report,
        model,
        persist_error,
    })
}

fn finish(report: &mut RunReport, verdict: Verdict, step: usize, reason: String) {
    report.verdict = verdict;
    report.verdict_step = Some(step);
    report.reason = reason;
}

fn keep_first(slot: &mut Option<Error>, r: Result<()>) {
    if let Err(e) = r {
        slot.get_or_insert(e);
    }
}

fn persist(dir: &Path, report: &RunReport, model: &TransformerModel) -> Result<()> {
    write_json(&dir.join("run.json"), report)?;
    write_csv(&dir.join("evals.csv"), &report.evals)?;
    write_json(
        &dir.join("timing.json"),
        &Timing {
            wall_clock_secs: report.wall_clock_secs,
            steps_run: report.steps_run,
        },
    )?;
    checkpoint::save(model, &dir.join("model.ckpt"))
}

fn train_step(
    model: &mut TransformerModel,
    batch: &Batch,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut ctx = ForwardCtx {
        trace: None,
        dropout_rng: (model.cfg.dropout > 0.0).then_some(dropout_rng),
    };
    let logits = model.forward_graph(&mut g, &vars, &batch.src, &batch.tgt_in, &mut ctx)?;
    let loss = g.cross_entropy(logits, &batch.tgt_out.ids, PAD, cfg.label_smoothing)?;
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    model.params.zero_grads();
    model.accumulate_grads(&grads, &vars);
    adam_step(model.params.tensors_mut(), adam, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        .map(|_| value)
}

const EVAL_BATCH: usize = 64;

fn eval_batches(eval: &Dataset) -> Result<Vec<Batch>> {
    eval.examples
        .chunks(EVAL_BATCH)
        .map(|c| Batch::from_examples(&c.iter().collect::<Vec<_>>()))
        .collect()
}

/// Teacher-forced `(mean token NLL, token accuracy)` over non-pad targets.
pub fn evaluate(model: &TransformerModel, batches: &[Batch]) -> Result<(f64, f64)> {
    let v = model.cfg.vocab_size;
    let (mut nll, mut correct, mut total) = (0.0, 0usize, 0usize);
    for b in batches {
        let logits = model.forward(&b.src, &b.tgt_in)?;
        for (row, &t) in logits.data.chunks(v).zip(&b.tgt_out.ids) {
            if t == PAD {
                continue;
            }
            total += 1;
            if argmax(row) == t {
                correct += 1;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            nll += lse - row[t];
        }
    }
    if total == 0 {
        return Err(Error::contract("evaluation over zero target tokens"));
    }
    Ok((nll / total as f64, correct as f64 / total as f64))
}

/// Greedy-decoding exact-match rate over `examples`.
pub fn sequence_accuracy(model: &TransformerModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("sequence accuracy over no examples"));
    }
    let mut hits = 0;
    for chunk in examples.chunks(EVAL_BATCH) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|e| e.src.clone()).collect();
        let max_len = chunk.iter().map(|e| e.tgt.len()).max().unwrap_or(0) + 1;
        let out = model.decode_greedy_batch(&srcs, max_len)?;
        hits += out.iter().zip(chunk).filter(|(o, e)| **o == e.tgt).count();
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn final_stats(model: &TransformerModel, eval_batches: &[Batch], cfg: &TrainConfig) -> Result<Vec<LayerStats>> {
    // Grow the probe until it has enough source tokens.
    let mut examples = Vec::new();
    let mut tokens = 0;
    for b in eval_batches {
        for e in b.unpad() {
            tokens += e.src.len();
            examples.push(e);
        }
        if tokens >= MIN_PROBE_TOKENS {
            break;
        }
    }
    let probe = Batch::from_examples(&examples.iter().collect::<Vec<_>>())?;
    let smoothing = cfg.label_smoothing;
    let loss: LossFn = &|g, logits, b| g.cross_entropy(logits, &b.tgt_out.ids, PAD, smoothing);
    Ok(grad_norm_profile(model, &probe, loss)?.stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub depths: Vec<usize>,
    pub orders: Vec<NormOrder>,
    pub inits: Vec<InitFamily>,
    /// Run cells on separate threads.
    pub parallel: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            depths: vec![2, 6, 12],
            orders: vec![NormOrder::V1, NormOrder::V2],
            inits: vec![InitFamily::Glorot, InitFamily::Lipschitz],
            parallel: false,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::config("depths", "grid needs at least one depth"));
        }
        if self.depths.contains(&0) {
            return Err(Error::config("depths", "depths must be >= 1"));
        }
        if self.orders.is_empty() {
            return Err(Error::config("orders", "grid needs at least one order"));
        }
        if self.inits.is_empty() {
            return Err(Error::config("inits", "grid needs at least one init family"));
        }
        Ok(())
    }

    /// Column labels, order-major: `v1-glorot`, `v1-lipschitz`, ...
    pub fn columns(&self) -> Vec<String> {
        self.orders
            .iter()
            .flat_map(|o| self.inits.iter().map(move |i| format!("{}-{}", o.name(), i.name())))
            .collect()
    }

    fn cells(&self) -> Vec<(usize, NormOrder, InitFamily)> {
        let mut out = Vec::new();
        for &d in &self.depths {
            for &o in &self.orders {
                for &i in &self.inits {
                    out.push((d, o, i));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub depth: usize,
    pub order: NormOrder,
    pub init: InitFamily,
    pub seed: u64,
    pub verdict: Verdict,
    pub verdict_step: Option<usize>,
    pub steps_run: usize,
    pub final_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub version: String,
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    /// Row labels (one per depth).
    pub rows: Vec<usize>,
    pub columns: Vec<String>,
    /// `verdicts[row][col]`.
    pub verdicts: Vec<Vec<Verdict>>,
    pub accuracies: Vec<Vec<Option<f64>>>,
    pub cells: Vec<GridCell>,
}

/// Directory name for one grid cell's reports.
pub fn cell_dir_name(depth: usize, order: NormOrder, init: InitFamily) -> String {
    format!("d{depth}-{}-{}", order.name(), init.name())
}

/// Trains every cell of the grid. Cell `i` (row-major over depth, order, init)
/// uses seed `train.seed + i` and depth for both stacks. Failed cells get the
/// `error` verdict and the grid carries on.
pub fn run_grid(
    grid: &GridSpec,
    model: &ModelConfig,
    train: &TrainConfig,
    task: &TaskSpec,
    out_dir: Option<&Path>,
) -> Result<GridReport> {
    grid.validate()?;
    train.validate()?;
    let data = generate_task(task)?;
    let cells = grid.cells();
    let run_cell = |i: usize| -> GridCell {
        let (depth, order, init) = cells[i];
        let seed = train.seed.wrapping_add(i as u64);
        let cfg = ModelConfig {
            enc_layers: depth,
            dec_layers: depth,
            norm_order: order,
            init_family: init,
            ..model.clone()
        };
        let tcfg = TrainConfig { seed, ..train.clone() };
        let dir: Option<PathBuf> = out_dir.map(|d| d.join("cells").join(cell_dir_name(depth, order, init)));
        let hooks = TrainHooks {
            out_dir: dir.as_deref(),
            ..TrainHooks::default()
        };
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            train_loop_with(&cfg, &tcfg, task, Some(&data), hooks)
        }));
        let mut cell = GridCell {
            depth,
            order,
            init,
            seed,
            verdict: Verdict::Error,
            verdict_step: None,
            steps_run: 0,
            final_accuracy: None,
            error: None,
        };
        match result {
            Ok(Ok(o)) => {
                cell.verdict = o.report.verdict;
                cell.verdict_step = o.report.verdict_step;
                cell.steps_run = o.report.steps_run;
                cell.final_accuracy = o.report.final_accuracy;
                cell.error = o.persist_error.map(|e| format!("persistence: {e}"));
            }
            Ok(Err(e)) => cell.error = Some(e.to_string()),
            Err(_) => cell.error = Some("cell panicked".into()),
        }
        cell
    };

    let results: Vec<GridCell> = if grid.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..cells.len()).map(|i| s.spawn(move || run_cell(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("cell panics are caught inside the cell"))
                .collect()
        })
    } else {
        (0..cells.len()).map(run_cell).collect()
    };

    let ncol = grid.orders.len() * grid.inits.len();
    let report = GridReport {
        version: crate::VERSION.to_string(),
        grid: grid.clone(),
        model: model.clone(),
        train: train.clone(),
        task: task.clone(),
        rows: grid.depths.clone(),
        columns: grid.columns(),
        verdicts: results.chunks(ncol).map(|r| r.iter().map(|c| c.verdict).collect()).collect(),
        accuracies: results.chunks(ncol).map(|r| r.iter().map(|c| c.final_accuracy).collect()).collect(),
        cells: results,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("grid.json"), &report)?;
        write_csv(&dir.join("grid.csv"), &report.cells.iter().map(GridCsvRow::from).collect::<Vec<_>>())?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct GridCsvRow {
    depth: usize,
    order: &'static str,
    init: &'static str,
    seed: u64,
    verdict: &'static str,
    verdict_step: Option<usize>,
    steps_run: usize,
    final_accuracy: Option<f64>,
}

impl From<&GridCell> for GridCsvRow {
    fn from(c: &GridCell) -> Self {
        GridCsvRow {
            depth: c.depth,
            order: c.order.name(),
            init: c.init.name(),
            seed: c.seed,
            verdict: c.verdict.name(),
            verdict_step: c.verdict_step,
            steps_run: c.steps_run,
            final_accuracy: c.final_accuracy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peak_and_decay() {
        let peak = lr_schedule(8000, 512, 8000, 1.0).unwrap();
        assert!((peak - 4.941e-4).abs() < 1e-6);
        let half = lr_schedule(16000, 512, 8000, 1.0).unwrap();
        assert!((half / peak - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(lr_schedule(0, 512, 8000, 1.0), Err(Error::Contract(_))));
        for s in [1, 100, 7999, 8001, 20000] {
            assert!(lr_schedule(s, 512, 8000, 1.0).unwrap() <= peak);
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad()];
        let mut st = AdamState::new(&p);
        st.m[0] = vec![0.5, 0.5];
        st.v[0] = vec![0.25, 0.25];
        p[0].grad = Some(vec![0.0, 0.0]);
        adam_step(&mut p, &mut st, 0.0, (0.9, 0.98), 1e-9).unwrap();
        assert_eq!(p[0].data, vec![1.0, -2.0]);
        assert_eq!(st.m[0], vec![0.45, 0.45]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let logits = Tensor::zeros(&[3, 7]);
        let l = cross_entropy_loss(&logits, &[3, 4, 5], PAD, 0.0).unwrap();
        assert!((l.data[0] - 7f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(&logits, &[0, 0, 0], PAD, 0.0).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            warmup: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "warmup", .. })));
        let bad = TrainConfig {
            convergence_threshold: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "convergence_threshold", .. })));
    }

    #[test]
    fn grid_columns_are_order_major() {
        let g = GridSpec::default();
        assert_eq!(g.columns(), ["v1-glorot", "v1-lipschitz", "v2-glorot", "v2-lipschitz"]);
        assert_eq!(g.cells().len(), 12);
        assert!(GridSpec { depths: vec![], ..g }.validate().is_err());
    }
}
