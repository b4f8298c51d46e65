//! Residual-stream diagnostics, the bounded-support standard-deviation check,
//! linear Lipschitz estimates, and gradient-norm profiles.

use rand_distr::{Beta, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Stack, SublayerId, SublayerKind, SublayerTrace, TransformerModel, FIRST_CONTENT, PAD};
use crate::rng::Rng;
use crate::tensor::{mean_var, Gradients, Graph, Tensor, Var};

/// Residual-stream statistics for one sublayer.
///
/// `mu` and `sigma` are the per-position feature mean and population std of
/// `in_model + in_res`, averaged over non-pad positions. `w_over_sigma` averages
/// `mean(w) / sqrt(var + eps)` over positions, i.e. the factor post-norm
/// applies to the residual sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub stack: Stack,
    pub layer_index: usize,
    pub sublayer_kind: SublayerKind,
    pub mu: f64,
    pub sigma: f64,
    pub w_over_sigma: f64,
    pub grad_norm: f64,
}

/// Raw values captured around one sublayer during an instrumented forward.
#[derive(Clone, Debug)]
pub struct SublayerSnapshot {
    pub id: SublayerId,
    pub d_model: usize,
    pub sum: Vec<f64>,
    pub out_res: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
    /// Positions holding real tokens; padding rows are left out of the statistics.
    pub valid: Vec<bool>,
}

impl SublayerSnapshot {
    fn from_trace(g: &Graph, model: &TransformerModel, t: &SublayerTrace, probe: &Batch) -> Self {
        let tokens = match t.id.stack {
            Stack::Encoder => &probe.src,
            Stack::Decoder => &probe.tgt_in,
        };
        SublayerSnapshot {
            valid: tokens.ids.iter().map(|&id| id != PAD).collect(),
            id: t.id,
            d_model: model.cfg.d_model,
            sum: g.value(t.io.sum).to_vec(),
            out_res: g.value(t.io.out_res).to_vec(),
            w: model.params.get(t.ln_w).data.clone(),
            b: model.params.get(t.ln_b).data.clone(),
            eps: model.cfg.ln_eps,
        }
    }

    pub fn stats(&self) -> LayerStats {
        let d = self.d_model;
        let w_mean = self.w.iter().sum::<f64>() / d as f64;
        let (mut mu, mut sigma, mut ratio) = (0.0, 0.0, 0.0);
        let rows = self.valid.iter().filter(|&&v| v).count();
        for row in self.rows(&self.sum) {
            let (m, v) = mean_var(row);
            mu += m;
            sigma += v.sqrt();
            ratio += w_mean / (v + self.eps).sqrt();
        }
        let n = rows as f64;
        LayerStats {
            stack: self.id.stack,
            layer_index: self.id.layer,
            sublayer_kind: self.id.kind,
            mu: mu / n,
            sigma: sigma / n,
            w_over_sigma: ratio / n,
            grad_norm: 0.0,
        }
    }

    fn rows<'a>(&'a self, data: &'a [f64]) -> impl Iterator<Item = &'a [f64]> + 'a {
        data.chunks(self.d_model).zip(&self.valid).filter(|(_, &v)| v).map(|(r, _)| r)
    }

    /// Largest elementwise gap between the recorded post-norm output and
    /// `(w / sigma) * sum - (w / sigma) * mu + b` rebuilt from recorded statistics.
    pub fn post_norm_identity_error(&self) -> f64 {
        let d = self.d_model;
        let mut worst: f64 = 0.0;
        for (row, out) in self.rows(&self.sum).zip(self.rows(&self.out_res)) {
            let (mu, var) = mean_var(row);
            let sigma = (var + self.eps).sqrt();
            for j in 0..d {
                let scale = self.w[j] / sigma;
                let rebuilt = scale * row[j] - scale * mu + self.b[j];
                worst = worst.max((rebuilt - out[j]).abs());
            }
        }
        worst
    }
}

/// Runs one instrumented forward pass and returns the raw per-sublayer values.
pub fn probe_sublayers(model: &TransformerModel, probe: &Batch) -> Result<Vec<SublayerSnapshot>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut trace = Vec::new();
    let mut ctx = ForwardCtx {
        trace: Some(&mut trace),
        dropout_rng: None,
    };
    model.forward_graph(&mut g, &vars, &probe.src, &probe.tgt_in, &mut ctx)?;
    Ok(trace.iter().map(|t| SublayerSnapshot::from_trace(&g, model, t, probe)).collect())
}

/// One [`LayerStats`] per sublayer, from a single forward pass.
pub fn residual_stream_stats(model: &TransformerModel, probe: &Batch) -> Result<Vec<LayerStats>> {
    Ok(probe_sublayers(model, probe)?.iter().map(SublayerSnapshot::stats).collect())
}

/// Minimum number of source tokens in a probe batch.
pub const MIN_PROBE_TOKENS: usize = 256;

/// Seeded random copy-style batch with at least `min_tokens` source tokens and
/// lengths drawn from `3..=max_len`.
pub fn random_probe_batch(vocab_size: usize, max_len: usize, min_tokens: usize, seed: u64) -> Result<Batch> {
    probe_batch(vocab_size, 3, max_len, min_tokens, seed)
}

/// As [`random_probe_batch`] but every sequence has length `len`, so no
/// position is padding.
pub fn fixed_len_probe_batch(vocab_size: usize, len: usize, min_tokens: usize, seed: u64) -> Result<Batch> {
    probe_batch(vocab_size, len, len, min_tokens, seed)
}

fn probe_batch(vocab_size: usize, min_len: usize, max_len: usize, min_tokens: usize, seed: u64) -> Result<Batch> {
    if vocab_size <= FIRST_CONTENT || min_len < 3 || max_len < min_len {
        return Err(Error::contract("probe batch needs content ids and lengths >= 3"));
    }
    let mut rng = Rng::new(seed).split("probe");
    let mut examples = Vec::new();
    let mut tokens = 0;
    while tokens < min_tokens {
        let len = min_len + rng.below(max_len - min_len + 1);
        let src: Vec<usize> = (0..len).map(|_| FIRST_CONTENT + rng.below(vocab_size - FIRST_CONTENT)).collect();
        tokens += len;
        examples.push(Example { tgt: src.clone(), src });
    }
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs)
}

/// Bounded distributions on `[a, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistKind {
    Uniform,
    /// `a + (b - a) * Beta(alpha, beta)`.
    Beta { alpha: f64, beta: f64 },
    /// Mass `p` at `b`, `1 - p` at `a`.
    TwoPoint { p: f64 },
    /// Normal restricted to `[a, b]`; `std = 0` is a point mass at `clamp(mean)`.
    TruncatedNormal { mean: f64, std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedDistributionSpec {
    #[serde(flatten)]
    pub kind: DistKind,
    pub a: f64,
    pub b: f64,
}

impl BoundedDistributionSpec {
    pub fn new(kind: DistKind, a: f64, b: f64) -> Self {
        BoundedDistributionSpec { kind, a, b }
    }

    pub fn label(&self) -> String {
        match self.kind {
            DistKind::Uniform => "uniform".into(),
            DistKind::Beta { alpha, beta } => format!("beta({alpha},{beta})"),
            DistKind::TwoPoint { p } => format!("two_point(p={p})"),
            DistKind::TruncatedNormal { mean, std } => format!("trunc_normal({mean},{std})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.a < self.b) {
            return Err(Error::contract(format!("support [{}, {}] needs a < b", self.a, self.b)));
        }
        match self.kind {
            DistKind::Uniform => Ok(()),
            DistKind::Beta { alpha, beta } if alpha > 0.0 && beta > 0.0 => Ok(()),
            DistKind::TwoPoint { p } if (0.0..=1.0).contains(&p) => Ok(()),
            DistKind::TruncatedNormal { mean, std } if mean.is_finite() && std >= 0.0 && std.is_finite() => Ok(()),
            _ => Err(Error::contract(format!("invalid shape parameters for {}", self.label()))),
        }
    }

    /// Exact standard deviation where a closed form is at hand.
    pub fn exact_std(&self) -> Option<f64> {
        let w = self.b - self.a;
        match self.kind {
            DistKind::Uniform => Some(w / 12f64.sqrt()),
            DistKind::TwoPoint { p } => Some(w * (p * (1.0 - p)).sqrt()),
            DistKind::Beta { alpha, beta } => {
                let s = alpha + beta;
                Some(w * (alpha * beta / (s * s * (s + 1.0))).sqrt())
            }
            DistKind::TruncatedNormal { std, .. } if std == 0.0 => Some(0.0),
            DistKind::TruncatedNormal { .. } => None,
        }
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let (a, b) = (self.a, self.b);
        let w = b - a;
        Ok(match self.kind {
            DistKind::Uniform => (0..n).map(|_| a + w * rng.open01()).collect(),
            DistKind::Beta { alpha, beta } => {
                let d = Beta::new(alpha, beta).map_err(|e| Error::contract(e.to_string()))?;
                (0..n).map(|_| a + w * rng.sample(&d)).collect()
            }
            DistKind::TwoPoint { p } => (0..n).map(|_| if rng.open01() < p { b } else { a }).collect(),
            DistKind::TruncatedNormal { mean, std } if std == 0.0 => vec![mean.clamp(a, b); n],
            DistKind::TruncatedNormal { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| Error::contract(e.to_string()))?;
                let mut out = Vec::with_capacity(n);
                let mut tries = 0usize;
                while out.len() < n {
                    tries += 1;
                    if tries > n.saturating_mul(1000) {
                        return Err(Error::contract(format!(
                            "{} puts too little mass on [{a}, {b}] for rejection sampling",
                            self.label()
                        )));
                    }
                    let x: f64 = rng.sample(&d);
                    if (a..=b).contains(&x) {
                        out.push(x);
                    }
                }
                out
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub distribution: String,
    pub a: f64,
    pub b: f64,
    pub n_samples: usize,
    pub empirical_std: f64,
    pub exact_std: Option<f64>,
    /// `b - a`.
    pub bound: f64,
    pub margin: f64,
    pub holds: bool,
}

/// Draws `n_samples` values and checks that their std stays strictly below `b - a`.
pub fn verify_std_bound(spec: &BoundedDistributionSpec, n_samples: usize, rng: &mut Rng) -> Result<BoundReport> {
    if n_samples < 1000 {
        return Err(Error::contract(format!("need at least 1000 samples, got {n_samples}")));
    }
    let xs = spec.sample(rng, n_samples)?;
    if let Some(x) = xs.iter().find(|x| !(spec.a..=spec.b).contains(*x)) {
        return Err(Error::contract(format!("sample {x} escaped [{}, {}]", spec.a, spec.b)));
    }
    // Shifting by the first draw keeps a point mass at exactly zero spread.
    let shifted: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
    let std = mean_var(&shifted).1.sqrt();
    let bound = spec.b - spec.a;
    Ok(BoundReport {
        distribution: spec.label(),
        a: spec.a,
        b: spec.b,
        n_samples,
        empirical_std: std,
        exact_std: spec.exact_std(),
        bound,
        margin: bound - std,
        holds: std < bound,
    })
}

/// Thirty specs over the supports `[0, 1]`, `[-1, 1]` and `[-0.5, 2]`, including
/// the balanced two-point worst case and a point mass.
pub fn default_bound_suite() -> Vec<BoundedDistributionSpec> {
    let mut out = Vec::new();
    for (a, b) in [(0.0, 1.0), (-1.0, 1.0), (-0.5, 2.0)] {
        let w = b - a;
        let mid = a + w / 2.0;
        let kinds = [
            DistKind::Uniform,
            DistKind::Beta { alpha: 2.0, beta: 2.0 },
            DistKind::Beta { alpha: 0.5, beta: 0.5 },
            DistKind::Beta { alpha: 2.0, beta: 5.0 },
            DistKind::Beta { alpha: 0.1, beta: 0.1 },
            DistKind::TwoPoint { p: 0.5 },
            DistKind::TwoPoint { p: 0.1 },
            DistKind::TruncatedNormal { mean: mid, std: 0.1 * w },
            DistKind::TruncatedNormal { mean: a, std: w },
            DistKind::TruncatedNormal { mean: mid, std: 0.0 },
        ];
        out.extend(kinds.into_iter().map(|k| BoundedDistributionSpec::new(k, a, b)));
    }
    out
}

/// Runs every spec with its own stream derived from `seed`.
pub fn run_bound_suite(specs: &[BoundedDistributionSpec], n_samples: usize, seed: u64) -> Result<Vec<BoundReport>> {
    let root = Rng::new(seed);
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| verify_std_bound(s, n_samples, &mut root.split_index(i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub k_hat: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const POWER_ITER_TOL: f64 = 1e-8;
pub const POWER_ITER_MAX: usize = 1000;

/// Largest singular value of a 2-D `W` by power iteration on `W^T W`; this is the
/// Euclidean Lipschitz constant of `x -> x W`.
pub fn estimate_lipschitz_linear(w: &Tensor) -> Result<LipschitzEstimate> {
    if w.shape.len() != 2 {
        return Err(Error::contract(format!("expected a 2-D weight, got {:?}", w.shape)));
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    let mut rng = Rng::new(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.symmetric(1.0) + 2.0).collect();
    normalize(&mut v);
    let mut k = 0.0;
    for it in 1..=POWER_ITER_MAX {
        // u = W v, z = W^T u
        let u: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| w.data[r * cols + c] * v[c]).sum())
            .collect();
        let mut z = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                z[c] += w.data[r * cols + c] * u[r];
            }
        }
        let norm = normalize(&mut z);
        let k_new = norm.sqrt();
        if norm == 0.0 {
            return Ok(LipschitzEstimate {
                k_hat: 0.0,
                iterations: it,
                converged: true,
            });
        }
        let done = (k_new - k).abs() <= POWER_ITER_TOL * k_new.max(1.0);
        k = k_new;
        v = z;
        if done {
            return Ok(LipschitzEstimate {
                k_hat: k,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(LipschitzEstimate {
        k_hat: k,
        iterations: POWER_ITER_MAX,
        converged: false,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Per-sublayer stats with gradient norms, plus the deepest/shallowest encoder ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradProfile {
    pub stats: Vec<LayerStats>,
    pub encoder_depth_ratio: Option<f64>,
}

/// Loss built from the logits of a teacher-forced forward pass.
pub type LossFn<'a> = &'a dyn Fn(&mut Graph, Var, &Batch) -> Result<Var>;

/// Forward + backward once; fills `grad_norm` with the L2 norm over every
/// parameter owned by each sublayer (projections and its layer norm).
pub fn grad_norm_profile(model: &TransformerModel, batch: &Batch, loss_fn: LossFn) -> Result<GradProfile> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut trace = Vec::new();
    let mut ctx = ForwardCtx {
        trace: Some(&mut trace),
        dropout_rng: None,
    };
    let logits = model.forward_graph(&mut g, &vars, &batch.src, &batch.tgt_in, &mut ctx)?;
    let loss = loss_fn(&mut g, logits, batch)?;
    let grads = g.backward(loss)?;
    let stats = trace
        .iter()
        .map(|t| {
            let mut s = SublayerSnapshot::from_trace(&g, model, t, batch).stats();
            s.grad_norm = sublayer_grad_norm(model, &grads, &vars, t.id);
            s
        })
        .collect::<Vec<_>>();
    let enc: Vec<&LayerStats> = stats.iter().filter(|s| s.stack == Stack::Encoder).collect();
    let encoder_depth_ratio = match (enc.first(), enc.last()) {
        (Some(first), Some(last)) if first.grad_norm > 0.0 => Some(last.grad_norm / first.grad_norm),
        _ => None,
    };
    Ok(GradProfile {
        stats,
        encoder_depth_ratio,
    })
}

fn sublayer_grad_norm(model: &TransformerModel, grads: &Gradients, vars: &[Var], id: SublayerId) -> f64 {
    model
        .sublayer_params(id)
        .into_iter()
        .filter_map(|p| grads.get(vars[p.0]))
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so gradients that are zero up to
/// roundoff do not blow the ratio up.
pub const FD_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub param: String,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub rel_floor: f64,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub per_param: Vec<ParamCheck>,
}

/// Perturbation applied to one analytic gradient element before comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCorruption {
    pub param: usize,
    pub index: usize,
    pub delta: f64,
}

/// Compares every analytic parameter gradient of `loss_fn` against central
/// differences with step `h`. The model is restored bitwise afterwards.
pub fn finite_difference_check(
    model: &mut TransformerModel,
    batch: &Batch,
    loss_fn: LossFn,
    h: f64,
    corrupt: Option<GradCorruption>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let logits = model.forward_graph(&mut g, &vars, &batch.src, &batch.tgt_in, &mut ForwardCtx::default())?;
    let loss = loss_fn(&mut g, logits, batch)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(model.params.tensors_mut())
        .map(|(v, t)| grads.get_or_zeros(*v, t.numel()))
        .collect();
    if let Some(c) = corrupt {
        let slot = analytic
            .get_mut(c.param)
            .and_then(|a| a.get_mut(c.index))
            .ok_or_else(|| Error::contract("corruption target out of range"))?;
        *slot += c.delta;
    }

    let eval = |m: &TransformerModel| -> Result<f64> {
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let logits = m.forward_graph(&mut g, &vars, &batch.src, &batch.tgt_in, &mut ForwardCtx::default())?;
        let l = loss_fn(&mut g, logits, batch)?;
        Ok(g.value(l)[0])
    };

    let mut report = GradCheckReport {
        h,
        rel_floor: FD_REL_FLOOR,
        n_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::new(),
    };
    let ids: Vec<_> = model.params.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        let name = model.params.name(id).to_string();
        let mut pc = ParamCheck {
            param: name.clone(),
            n_checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..model.params.get(id).numel() {
            let orig = model.params.get(id).data[i];
            model.params.get_mut(id).data[i] = orig + h;
            let plus = eval(model);
            model.params.get_mut(id).data[i] = orig - h;
            let minus = eval(model);
            model.params.get_mut(id).data[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[p][i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            pc.n_checked += 1;
            pc.max_abs_error = pc.max_abs_error.max(abs);
            pc.max_rel_error = pc.max_rel_error.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some(GradCheckEntry {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.n_checked += pc.n_checked;
        report.per_param.push(pc);
    }
    Ok(report)
}
