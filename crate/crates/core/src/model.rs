//! Encoder-decoder transformer assembled from [`crate::layers`] blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{init_model_params, InitFamily, ParamId, ParamRole, ParamSet};
use crate::layers::{self, AttentionParams, AttnMask, FfnParams, LayerNormParams, NormOrder, SublayerIO};
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available for content tokens.
pub const FIRST_CONTENT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub norm_order: NormOrder,
    pub init_family: InitFamily,
    /// Reuse the target embedding as the output projection.
    pub tie_embeddings: bool,
    /// Multiply embeddings by `sqrt(d_model)`.
    pub scale_embedding: bool,
    /// Extra layer normalization after the last pre-norm sublayer of each stack.
    pub final_ln_v2: bool,
    pub ln_eps: f64,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size: 64,
            norm_order: NormOrder::V2,
            init_family: InitFamily::Glorot,
            tie_embeddings: false,
            scale_embedding: true,
            final_ln_v2: true,
            ln_eps: layers::DEFAULT_LN_EPS,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.vocab_size <= FIRST_CONTENT {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed the {FIRST_CONTENT} reserved ids"),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("ln_eps", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn has_final_ln(&self) -> bool {
        self.final_ln_v2 && self.norm_order == NormOrder::V2
    }

    /// Names and roles of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(String, ParamRole)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("src_embed".to_string(), ParamRole::Embedding { vsize: v, esize: d }),
            ("tgt_embed".to_string(), ParamRole::Embedding { vsize: v, esize: d }),
        ];
        let attn = |out: &mut Vec<(String, ParamRole)>, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{prefix}.{w}"), ParamRole::Linear { isize: d, osize: d }));
            }
            push_ln(out, prefix, d);
        };
        let ffn = |out: &mut Vec<(String, ParamRole)>, prefix: &str| {
            out.push((format!("{prefix}.w1"), ParamRole::Linear { isize: d, osize: f }));
            out.push((format!("{prefix}.b1"), ParamRole::Bias(f)));
            out.push((format!("{prefix}.w2"), ParamRole::Linear { isize: f, osize: d }));
            out.push((format!("{prefix}.b2"), ParamRole::Bias(d)));
            push_ln(out, prefix, d);
        };
        for i in 0..self.enc_layers {
            attn(&mut out, &format!("enc.{i}.self_attn"));
            ffn(&mut out, &format!("enc.{i}.ffn"));
        }
        for i in 0..self.dec_layers {
            attn(&mut out, &format!("dec.{i}.self_attn"));
            attn(&mut out, &format!("dec.{i}.cross_attn"));
            ffn(&mut out, &format!("dec.{i}.ffn"));
        }
        if self.has_final_ln() {
            push_ln(&mut out, "enc.final", d);
            push_ln(&mut out, "dec.final", d);
        }
        if !self.tie_embeddings {
            out.push(("out_proj".to_string(), ParamRole::Linear { isize: d, osize: v }));
        }
        out
    }
}

fn push_ln(out: &mut Vec<(String, ParamRole)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.ln.w"), ParamRole::LnGain(d)));
    out.push((format!("{prefix}.ln.b"), ParamRole::LnBias(d)));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    SelfAttn,
    CrossAttn,
    Ffn,
}

impl SublayerKind {
    fn prefix(self) -> &'static str {
        match self {
            SublayerKind::SelfAttn => "self_attn",
            SublayerKind::CrossAttn => "cross_attn",
            SublayerKind::Ffn => "ffn",
        }
    }
}

/// Location of one residual sublayer inside the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SublayerId {
    pub stack: Stack,
    pub layer: usize,
    pub kind: SublayerKind,
}

impl SublayerId {
    pub fn prefix(&self) -> String {
        let s = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        format!("{s}.{}.{}", self.layer, self.kind.prefix())
    }
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln: LnIds,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln: LnIds,
}

#[derive(Clone, Debug)]
struct EncLayer {
    self_attn: AttnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: AttnIds,
    cross_attn: AttnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    finals: Option<(LnIds, LnIds)>,
    out_proj: Option<ParamId>,
}

impl Layout {
    fn resolve(cfg: &ModelConfig, params: &ParamSet) -> Result<Self> {
        let id = |name: String| {
            params
                .find(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
        };
        let ln = |p: &str| -> Result<LnIds> {
            Ok(LnIds {
                w: id(format!("{p}.ln.w"))?,
                b: id(format!("{p}.ln.b"))?,
            })
        };
        let attn = |p: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                wq: id(format!("{p}.wq"))?,
                wk: id(format!("{p}.wk"))?,
                wv: id(format!("{p}.wv"))?,
                wo: id(format!("{p}.wo"))?,
                ln: ln(p)?,
            })
        };
        let ffn = |p: &str| -> Result<FfnIds> {
            Ok(FfnIds {
                w1: id(format!("{p}.w1"))?,
                b1: id(format!("{p}.b1"))?,
                w2: id(format!("{p}.w2"))?,
                b2: id(format!("{p}.b2"))?,
                ln: ln(p)?,
            })
        };
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                Ok(EncLayer {
                    self_attn: attn(&format!("enc.{i}.self_attn"))?,
                    ffn: ffn(&format!("enc.{i}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                Ok(DecLayer {
                    self_attn: attn(&format!("dec.{i}.self_attn"))?,
                    cross_attn: attn(&format!("dec.{i}.cross_attn"))?,
                    ffn: ffn(&format!("dec.{i}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        let finals = if cfg.has_final_ln() {
            Some((ln("enc.final")?, ln("dec.final")?))
        } else {
            None
        };
        let out_proj = if cfg.tie_embeddings {
            None
        } else {
            Some(id("out_proj".to_string())?)
        };
        Ok(Layout {
            src_embed: id("src_embed".to_string())?,
            tgt_embed: id("tgt_embed".to_string())?,
            enc,
            dec,
            finals,
            out_proj,
        })
    }
}

/// A batch of equal-length (padded) token rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::Shape {
                op: "token batch",
                lhs: vec![batch, len],
                rhs: vec![ids.len()],
            });
        }
        Ok(TokenBatch { batch, len, ids })
    }

    /// Right-pads rows with [`PAD`] to the longest row.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        }
        Self::new(rows.len(), len, ids)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t == PAD).collect()
    }
}

/// One recorded sublayer evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SublayerTrace {
    pub id: SublayerId,
    pub io: SublayerIO,
    pub ln_w: ParamId,
    pub ln_b: ParamId,
}

/// Per-call forward options. Hooks live here, never in the model.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    pub trace: Option<&'a mut Vec<SublayerTrace>>,
    pub dropout_rng: Option<&'a mut Rng>,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl PartialEq for TransformerModel {
    fn eq(&self, other: &Self) -> bool {
        // The layout is a pure function of the config and parameter names.
        self.cfg == other.cfg && self.params == other.params
    }
}

/// Sinusoidal position encoding `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl TransformerModel {
    pub fn build(cfg: ModelConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let params = init_model_params(&cfg.param_layout(), cfg.init_family, rng)?;
        Self::from_params(cfg, params)
    }

    /// Wraps an existing parameter set, checking names and shapes against `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.param_layout();
        if expected.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, role) in &expected {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))?;
            if params.get(id).shape != role.shape() {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: role.shape(),
                    rhs: params.get(id).shape.clone(),
                });
            }
        }
        let layout = Layout::resolve(&cfg, &params)?;
        Ok(TransformerModel { cfg, params, layout })
    }

    /// Sublayer identifiers in evaluation order.
    pub fn sublayers(&self) -> Vec<SublayerId> {
        let mut out = Vec::new();
        for layer in 0..self.cfg.enc_layers {
            for kind in [SublayerKind::SelfAttn, SublayerKind::Ffn] {
                out.push(SublayerId {
                    stack: Stack::Encoder,
                    layer,
                    kind,
                });
            }
        }
        for layer in 0..self.cfg.dec_layers {
            for kind in [SublayerKind::SelfAttn, SublayerKind::CrossAttn, SublayerKind::Ffn] {
                out.push(SublayerId {
                    stack: Stack::Decoder,
                    layer,
                    kind,
                });
            }
        }
        out
    }

    /// Parameters owned by a sublayer (projections plus its layer norm).
    pub fn sublayer_params(&self, id: SublayerId) -> Vec<ParamId> {
        let prefix = format!("{}.", id.prefix());
        self.params
            .ids()
            .filter(|p| self.params.name(*p).starts_with(&prefix))
            .collect()
    }

    /// Registers every parameter as a graph leaf, in [`ParamSet`] order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.ids().map(|id| g.leaf(self.params.get(id))).collect()
    }

    /// Adds the gradients of a backward sweep into the parameters' grad slots.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) {
        for (t, v) in self.params.tensors_mut().iter_mut().zip(vars) {
            let g = grads.get_or_zeros(*v, t.numel());
            t.accumulate_grad(&g);
        }
    }

    fn check_tokens(&self, t: &TokenBatch, what: &str) -> Result<()> {
        if let Some(bad) = t.ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Data(format!(
                "{what} token id {bad} out of range for vocab {}",
                self.cfg.vocab_size
            )));
        }
        if t.len > self.cfg.max_seq_len {
            return Err(Error::Data(format!(
                "{what} length {} exceeds max_seq_len {}",
                t.len, self.cfg.max_seq_len
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, vars: &[Var], table: ParamId, t: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Var> {
        let d = self.cfg.d_model;
        let mut x = g.gather(vars[table.0], &t.ids, &[t.batch, t.len])?;
        if self.cfg.scale_embedding {
            x = g.scale(x, (d as f64).sqrt());
        }
        let pe = positional_encoding(t.len, d);
        let tiled: Vec<f64> = (0..t.batch).flat_map(|_| pe.iter().copied()).collect();
        let pe = g.constant(vec![t.batch, t.len, d], tiled)?;
        let x = g.add(x, pe)?;
        Ok(self.dropout(g, x, ctx))
    }

    fn dropout(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        match ctx.dropout_rng.as_deref_mut() {
            Some(rng) if self.cfg.dropout > 0.0 => g.dropout(x, self.cfg.dropout, rng),
            _ => x,
        }
    }

    fn ln(&self, vars: &[Var], ids: LnIds) -> LayerNormParams {
        LayerNormParams {
            w: vars[ids.w.0],
            b: vars[ids.b.0],
            eps: self.cfg.ln_eps,
        }
    }

    fn attn(vars: &[Var], ids: &AttnIds) -> AttentionParams {
        AttentionParams {
            wq: vars[ids.wq.0],
            wk: vars[ids.wk.0],
            wv: vars[ids.wv.0],
            wo: vars[ids.wo.0],
        }
    }

    fn ffn(vars: &[Var], ids: &FfnIds) -> FfnParams {
        FfnParams {
            w1: vars[ids.w1.0],
            b1: vars[ids.b1.0],
            w2: vars[ids.w2.0],
            b2: vars[ids.b2.0],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_sublayer<F>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        id: SublayerId,
        ln: LnIds,
        x: Var,
        f: F,
        ctx: &mut ForwardCtx,
    ) -> Result<Var>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        let p = self.ln(vars, ln);
        let rate = self.cfg.dropout;
        let mut drop_rng = ctx.dropout_rng.as_deref_mut();
        let io = layers::sublayer(
            g,
            self.cfg.norm_order,
            x,
            |g, x| {
                let y = f(g, x)?;
                Ok(match drop_rng.as_deref_mut() {
                    Some(rng) if rate > 0.0 => g.dropout(y, rate, rng),
                    _ => y,
                })
            },
            &p,
        )?;
        if let Some(trace) = ctx.trace.as_deref_mut() {
            trace.push(SublayerTrace {
                id,
                io,
                ln_w: ln.w,
                ln_b: ln.b,
            });
        }
        Ok(io.out_res)
    }

    /// Encoder stack output `[batch, src_len, d_model]`.
    pub fn encode(&self, g: &mut Graph, vars: &[Var], src: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_tokens(src, "source")?;
        let heads = self.cfg.n_heads;
        let mask = AttnMask::key_padding(&src.pad_mask(), src.batch, src.len);
        let mut x = self.embed(g, vars, self.layout.src_embed, src, ctx)?;
        for (layer, l) in self.layout.enc.iter().enumerate() {
            let id = |kind| SublayerId {
                stack: Stack::Encoder,
                layer,
                kind,
            };
            let ap = Self::attn(vars, &l.self_attn);
            x = self.run_sublayer(
                g,
                vars,
                id(SublayerKind::SelfAttn),
                l.self_attn.ln,
                x,
                |g, x| Ok(layers::multi_head_attention(g, x, x, &mask, heads, &ap)?.out),
                ctx,
            )?;
            let fp = Self::ffn(vars, &l.ffn);
            x = self.run_sublayer(g, vars, id(SublayerKind::Ffn), l.ffn.ln, x, |g, x| layers::ffn(g, x, &fp), ctx)?;
        }
        if let Some((enc_ln, _)) = self.layout.finals {
            x = layers::layer_norm(g, x, &self.ln(vars, enc_ln))?;
        }
        Ok(x)
    }

    /// Decoder logits `[batch, tgt_len, vocab]` given encoder memory.
    pub fn decode(
        &self,
        g: &mut Graph,
        vars: &[Var],
        memory: Var,
        src: &TokenBatch,
        tgt_in: &TokenBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check_tokens(tgt_in, "target")?;
        if tgt_in.batch != src.batch {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![src.batch, src.len],
                rhs: vec![tgt_in.batch, tgt_in.len],
            });
        }
        let heads = self.cfg.n_heads;
        // Causal masking alone keeps every row nonempty (position 0 sees itself).
        let self_mask = AttnMask::causal(&vec![false; tgt_in.ids.len()], tgt_in.batch, tgt_in.len);
        let cross_mask = AttnMask::key_padding(&src.pad_mask(), src.batch, tgt_in.len);
        let mut x = self.embed(g, vars, self.layout.tgt_embed, tgt_in, ctx)?;
        for (layer, l) in self.layout.dec.iter().enumerate() {
            let id = |kind| SublayerId {
                stack: Stack::Decoder,
                layer,
                kind,
            };
            let sp = Self::attn(vars, &l.self_attn);
            x = self.run_sublayer(
                g,
                vars,
                id(SublayerKind::SelfAttn),
                l.self_attn.ln,
                x,
                |g, x| Ok(layers::multi_head_attention(g, x, x, &self_mask, heads, &sp)?.out),
                ctx,
            )?;
            let cp = Self::attn(vars, &l.cross_attn);
            x = self.run_sublayer(
                g,
                vars,
                id(SublayerKind::CrossAttn),
                l.cross_attn.ln,
                x,
                |g, x| Ok(layers::multi_head_attention(g, x, memory, &cross_mask, heads, &cp)?.out),
                ctx,
            )?;
            let fp = Self::ffn(vars, &l.ffn);
            x = self.run_sublayer(g, vars, id(SublayerKind::Ffn), l.ffn.ln, x, |g, x| layers::ffn(g, x, &fp), ctx)?;
        }
        if let Some((_, dec_ln)) = self.layout.finals {
            x = layers::layer_norm(g, x, &self.ln(vars, dec_ln))?;
        }
        let proj = match self.layout.out_proj {
            Some(id) => vars[id.0],
            None => g.transpose(vars[self.layout.tgt_embed.0])?,
        };
        g.matmul(x, proj)
    }

    /// Teacher-forced forward pass on an existing graph.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        src: &TokenBatch,
        tgt_in: &TokenBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let memory = self.encode(g, vars, src, ctx)?;
        self.decode(g, vars, memory, src, tgt_in, ctx)
    }

    /// Logits `[batch, tgt_len, vocab]` for teacher-forced targets.
    pub fn forward(&self, src: &TokenBatch, tgt_in: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let logits = self.forward_graph(&mut g, &vars, src, tgt_in, &mut ForwardCtx::default())?;
        Ok(g.to_tensor(logits))
    }

    /// Greedy decoding of one source sequence (no BOS/EOS in input or output).
    pub fn decode_greedy(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        Ok(self.decode_greedy_batch(&[src.to_vec()], max_len)?.remove(0))
    }

    /// Greedy decoding of several sources at once. Each output stops at EOS or
    /// `max_len` tokens; argmax ties resolve to the lowest id.
    pub fn decode_greedy_batch(&self, srcs: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        Self::validate_sources(srcs)?;
        let src = TokenBatch::from_rows(srcs)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let memory = self.encode(&mut g, &vars, &src, &mut ForwardCtx::default())?;
        let n = srcs.len();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let limit = max_len.min(self.cfg.max_seq_len.saturating_sub(1));
        for _ in 0..limit {
            if done.iter().all(|&d| d) {
                break;
            }
            let tgt = TokenBatch::from_rows(&prefixes)?;
            let logits = self.decode(&mut g, &vars, memory, &src, &tgt, &mut ForwardCtx::default())?;
            let v = self.cfg.vocab_size;
            let lv = g.value(logits);
            for b in 0..n {
                let pos = tgt.len - 1;
                let row = &lv[(b * tgt.len + pos) * v..(b * tgt.len + pos + 1) * v];
                let next = argmax(row);
                prefixes[b].push(next);
                if done[b] {
                    continue;
                }
                if next == EOS {
                    done[b] = true;
                } else {
                    outputs[b].push(next);
                }
            }
        }
        Ok(outputs)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl TransformerModel {
    /// Zeroes every sublayer output projection so each `F` is identically zero.
    pub fn zero_sublayer_outputs(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id);
            if name.ends_with(".wo") || name.ends_with(".w2") || name.ends_with(".b2") {
                self.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Source rows must be nonempty for attention to have a visible key.
    pub fn validate_sources(srcs: &[Vec<usize>]) -> Result<()> {
        if srcs.iter().any(|s| s.is_empty() || s.iter().all(|&t| t == PAD)) {
            return Err(Error::Data("empty source sequence".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validation_names_offending_field() {
        let cfg = ModelConfig {
            enc_layers: 0,
            ..micro()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config { field: "enc_layers", .. }));
        let cfg = ModelConfig { n_heads: 3, ..micro() };
        assert!(matches!(cfg.validate(), Err(Error::Config { field: "n_heads", .. })));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = TransformerModel::build(micro(), &Rng::new(5)).unwrap();
        let b = TransformerModel::build(micro(), &Rng::new(5)).unwrap();
        assert_eq!(a.params, b.params);
        let c = TransformerModel::build(micro(), &Rng::new(6)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn sublayer_structure() {
        let m = TransformerModel::build(micro(), &Rng::new(1)).unwrap();
        let subs = m.sublayers();
        assert_eq!(subs.len(), 2 * 2 + 2 * 3);
        for s in subs {
            let ps = m.sublayer_params(s);
            let lns = ps.iter().filter(|p| m.params.name(**p).contains(".ln.")).count();
            assert_eq!(lns, 2, "{s:?}");
        }
    }

    #[test]
    fn out_of_range_token_is_data_error() {
        let m = TransformerModel::build(micro(), &Rng::new(1)).unwrap();
        let src = TokenBatch::from_rows(&[vec![3, 4, 11]]).unwrap();
        let tgt = TokenBatch::from_rows(&[vec![BOS, 3]]).unwrap();
        assert!(matches!(m.forward(&src, &tgt), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn untrained_decode_respects_max_len_and_is_deterministic() {
        let m = TransformerModel::build(micro(), &Rng::new(2)).unwrap();
        let a = m.decode_greedy(&[3, 4, 5, 6], 7).unwrap();
        let b = m.decode_greedy(&[3, 4, 5, 6], 7).unwrap();
        assert!(a.len() <= 7);
        assert_eq!(a, b);
    }

    #[test]
    fn tied_embeddings_drop_output_projection() {
        let cfg = ModelConfig {
            tie_embeddings: true,
            ..micro()
        };
        let m = TransformerModel::build(cfg.clone(), &Rng::new(3)).unwrap();
        assert!(m.params.find("out_proj").is_none());
        let src = TokenBatch::from_rows(&[vec![3, 4, 5]]).unwrap();
        let tgt = TokenBatch::from_rows(&[vec![BOS, 3, 4]]).unwrap();
        let logits = m.forward(&src, &tgt).unwrap();
        assert_eq!(logits.shape, vec![1, 3, 11]);
        assert!(logits.is_finite());
    }
}
