//! Synthetic sequence-to-sequence tasks and length-bucketed batching.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenBatch, BOS, EOS, FIRST_CONTENT, PAD};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        }
    }

    pub fn target(self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::Sort => t.sort_unstable(),
        }
        t
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(format!("unknown task `{other}` (expected copy|reverse|sort)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 64,
            min_len: 3,
            max_len: 16,
            train_size: 20_000,
            eval_size: 256,
            seed: 17,
        }
    }
}

impl TaskSpec {
    /// `max_seq_len` is the model's limit; targets need one extra slot for BOS/EOS.
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config("vocab_size", "task vocabulary must be >= 8"));
        }
        if self.min_len < 3 {
            return Err(Error::config("min_len", "must be >= 3"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("max_len", "must be >= min_len"));
        }
        if self.max_len.saturating_add(1) > max_seq_len {
            return Err(Error::config(
                "max_len",
                format!("sequences of {} plus BOS/EOS exceed max_seq_len {max_seq_len}", self.max_len),
            ));
        }
        if self.train_size == 0 {
            return Err(Error::config("train_size", "must be >= 1"));
        }
        if self.eval_size == 0 {
            return Err(Error::config("eval_size", "must be >= 1"));
        }
        Ok(())
    }

    fn distinct_sequences(&self) -> f64 {
        let symbols = (self.vocab_size - FIRST_CONTENT) as f64;
        (self.min_len..=self.max_len).map(|l| symbols.powi(l as i32)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Writes one example per line: source ids, a tab, target ids.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            writeln!(w, "{}\t{}", join(&ex.src), join(&ex.tgt))?;
        }
        Ok(())
    }

    /// Reads the line format produced by [`Dataset::write_text`]. Blank lines are skipped.
    pub fn read_text<R: BufRead>(r: R, vocab_size: usize) -> Result<Self> {
        let mut examples = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Format {
                what: "dataset line",
                reason: format!("line {}: missing tab separator", n + 1),
            })?;
            if tgt.contains('\t') {
                return Err(line_err(n, "more than one tab separator".into()));
            }
            let src = parse_ids(src, vocab_size).map_err(|e| line_err(n, e))?;
            let tgt = parse_ids(tgt, vocab_size).map_err(|e| line_err(n, e))?;
            if src.is_empty() || tgt.is_empty() {
                return Err(line_err(n, "empty sequence".into()));
            }
            examples.push(Example { src, tgt });
        }
        Ok(Dataset { examples })
    }
}

fn line_err(n: usize, reason: String) -> Error {
    Error::Format {
        what: "dataset line",
        reason: format!("line {}: {reason}", n + 1),
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Parses space-separated content ids; reserved ids and ids `>= vocab_size` are rejected.
pub fn parse_ids(s: &str, vocab_size: usize) -> std::result::Result<Vec<usize>, String> {
    s.split_ascii_whitespace()
        .map(|tok| {
            let id: usize = tok.parse().map_err(|_| format!("`{tok}` is not a token id"))?;
            if id < FIRST_CONTENT || id >= vocab_size {
                return Err(format!("token id {id} outside content range [{FIRST_CONTENT}, {vocab_size})"));
            }
            Ok(id)
        })
        .collect()
}

/// Samples disjoint train and eval sets for `spec`.
pub fn generate_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate(usize::MAX)?;
    if spec.distinct_sequences() < (spec.eval_size + 1) as f64 {
        return Err(Error::config(
            "vocab_size",
            format!(
                "vocabulary {} with lengths {}..={} cannot produce {} distinct eval sequences",
                spec.vocab_size, spec.min_len, spec.max_len, spec.eval_size
            ),
        ));
    }
    let root = Rng::new(spec.seed);
    let symbols = spec.vocab_size - FIRST_CONTENT;
    let sample = |rng: &mut Rng| -> Vec<usize> {
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        (0..len).map(|_| FIRST_CONTENT + rng.below(symbols)).collect()
    };

    let mut eval_rng = root.split("eval");
    let mut seen = HashSet::new();
    let mut eval = Vec::with_capacity(spec.eval_size);
    while eval.len() < spec.eval_size {
        let s = sample(&mut eval_rng);
        if seen.insert(s.clone()) {
            eval.push(Example {
                tgt: spec.kind.target(&s),
                src: s,
            });
        }
    }

    let mut train_rng = root.split("train");
    let mut train = Vec::with_capacity(spec.train_size);
    let mut attempts = 0usize;
    while train.len() < spec.train_size {
        attempts += 1;
        if attempts > spec.train_size.saturating_mul(100).max(10_000) {
            return Err(Error::config(
                "train_size",
                "could not draw enough training sequences disjoint from the eval set",
            ));
        }
        let s = sample(&mut train_rng);
        if seen.contains(&s) {
            continue;
        }
        train.push(Example {
            tgt: spec.kind.target(&s),
            src: s,
        });
    }
    Ok((Dataset { examples: train }, Dataset { examples: eval }))
}

/// A padded minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenBatch,
    /// BOS followed by the target.
    pub tgt_in: TokenBatch,
    /// The target followed by EOS.
    pub tgt_out: TokenBatch,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("batch needs at least one example"));
        }
        let src: Vec<Vec<usize>> = examples.iter().map(|e| e.src.clone()).collect();
        let tin: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.tgt.iter().copied()).collect())
            .collect();
        let tout: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| e.tgt.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        Ok(Batch {
            src: TokenBatch::from_rows(&src)?,
            tgt_in: TokenBatch::from_rows(&tin)?,
            tgt_out: TokenBatch::from_rows(&tout)?,
        })
    }

    pub fn size(&self) -> usize {
        self.src.batch
    }

    /// Non-pad target tokens (the count the loss averages over).
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.ids.iter().filter(|&&t| t != PAD).count()
    }

    /// Recovers the original `(src, tgt)` pairs by stripping padding and markers.
    pub fn unpad(&self) -> Vec<Example> {
        (0..self.size())
            .map(|b| {
                let src = self.src.row(b).iter().copied().filter(|&t| t != PAD).collect();
                let mut tgt: Vec<usize> = self.tgt_out.row(b).iter().copied().filter(|&t| t != PAD).collect();
                tgt.pop();
                Example { src, tgt }
            })
            .collect()
    }
}

/// Window size for shuffle-then-sort length bucketing.
pub const BUCKET_WINDOW: usize = 1024;

/// Endless stream of batches over `dataset`.
///
/// Each epoch shuffles with a stream keyed on `(seed, epoch)`, sorts each
/// window of [`BUCKET_WINDOW`] examples by length, packs consecutive examples
/// while the non-pad target tokens stay within `batch_tokens`, then shuffles
/// the batch order.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    batch_tokens: usize,
    rng: Rng,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

pub fn batch_iter(dataset: &Dataset, batch_tokens: usize, seed: u64) -> Result<BatchIter<'_>> {
    if dataset.is_empty() {
        return Err(Error::contract("batch_iter over an empty dataset"));
    }
    if batch_tokens == 0 {
        return Err(Error::config("batch_tokens", "must be >= 1"));
    }
    Ok(BatchIter {
        dataset,
        batch_tokens,
        rng: Rng::new(seed),
        epoch: 0,
        queue: Vec::new().into_iter(),
    })
}

impl BatchIter<'_> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn plan_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut rng = self.rng.split_index(self.epoch);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        rng.shuffle(&mut order);
        let ex = &self.dataset.examples;
        let mut batches = Vec::new();
        for window in order.chunks_mut(BUCKET_WINDOW) {
            window.sort_by_key(|&i| (ex[i].tgt.len(), ex[i].src.len()));
            let mut cur: Vec<usize> = Vec::new();
            let mut tokens = 0;
            for &i in window.iter() {
                let t = ex[i].tgt.len() + 1;
                if !cur.is_empty() && tokens + t > self.batch_tokens {
                    batches.push(std::mem::take(&mut cur));
                    tokens = 0;
                }
                cur.push(i);
                tokens += t;
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
        }
        rng.shuffle(&mut batches);
        batches
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = match self.queue.next() {
            Some(b) => b,
            None => {
                let plan = self.plan_epoch();
                self.epoch += 1;
                self.queue = plan.into_iter();
                self.queue.next()?
            }
        };
        let refs: Vec<&Example> = idx.iter().map(|&i| &self.dataset.examples[i]).collect();
        Batch::from_examples(&refs).ok()
    }
}
