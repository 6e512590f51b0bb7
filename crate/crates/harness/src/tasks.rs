//! Synthetic sequence tasks. Every sample is a pure function of its spec.
//!
//! All tasks are next-token prediction: `targets[t]` is the token after
//! `inputs[t]`, and `mask[t]` is 1 only where the loss is scored.

use jamba_core::numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Key/value pairs followed by repeats of the keys; score the values.
    Induction,
    /// Content tokens scattered in noise, then a separator; reproduce the content in order.
    SelectiveCopy,
    /// One marked key/value statement in random filler, queried at the end.
    Needle,
    /// Raw bytes of the embedded text corpus.
    LmBytes,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "induction" => Some(TaskKind::Induction),
            "selective-copy" => Some(TaskKind::SelectiveCopy),
            "needle" => Some(TaskKind::Needle),
            "lm-bytes" => Some(TaskKind::LmBytes),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Length of `inputs` (and of `targets` and `mask`).
    pub seq_len: usize,
    /// Induction pairs, or content tokens for selective copy.
    pub n_pairs: usize,
    /// Needle: fraction of the haystack before the statement; uniform when absent.
    pub needle_depth: Option<f64>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn induction(vocab_size: usize, seq_len: usize, n_pairs: usize, seed: u64) -> Self {
        TaskSpec { kind: TaskKind::Induction, vocab_size, seq_len, n_pairs, needle_depth: None, seed }
    }

    pub fn selective_copy(vocab_size: usize, seq_len: usize, n_tokens: usize, seed: u64) -> Self {
        TaskSpec { kind: TaskKind::SelectiveCopy, vocab_size, seq_len, n_pairs: n_tokens, needle_depth: None, seed }
    }

    pub fn needle(vocab_size: usize, seq_len: usize, depth: Option<f64>, seed: u64) -> Self {
        TaskSpec { kind: TaskKind::Needle, vocab_size, seq_len, n_pairs: 1, needle_depth: depth, seed }
    }

    pub fn lm_bytes(seq_len: usize, seed: u64) -> Self {
        TaskSpec { kind: TaskKind::LmBytes, vocab_size: 256, seq_len, n_pairs: 0, needle_depth: None, seed }
    }

    /// Same task with a different sample seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        TaskSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(HarnessError::ImpossibleTask(why));
        let (v, l, p) = (self.vocab_size, self.seq_len, self.n_pairs);
        if l == 0 {
            return bad("seq_len must be positive".into());
        }
        match self.kind {
            TaskKind::Induction => {
                if p == 0 {
                    return bad("induction needs at least one pair".into());
                }
                if v < 4 || p > v / 2 - 1 {
                    return bad(format!("{p} distinct keys do not fit in the key half of vocab {v}"));
                }
                if l < 2 * p + 1 {
                    return bad(format!("seq_len {l} cannot hold {p} pairs and a query"));
                }
            }
            TaskKind::SelectiveCopy => {
                if v < 3 || p == 0 {
                    return bad("selective copy needs vocab >= 3 and at least one content token".into());
                }
                if l < 2 * p + 1 {
                    return bad(format!("seq_len {l} cannot hold {p} content tokens, a separator and the copy"));
                }
            }
            TaskKind::Needle => {
                if v < 6 {
                    return bad("needle needs vocab >= 6".into());
                }
                if l < 5 {
                    return bad("needle needs seq_len >= 5".into());
                }
                if let Some(d) = self.needle_depth {
                    if !(0.0..=1.0).contains(&d) {
                        return bad(format!("needle depth {d} outside [0, 1]"));
                    }
                }
            }
            TaskKind::LmBytes => {
                if v != 256 {
                    return bad("lm-bytes uses the 256-symbol byte vocabulary".into());
                }
                if l + 1 > CORPUS.len() {
                    return bad(format!("seq_len {l} exceeds the corpus"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

/// `batch` rows stacked row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

fn from_stream(stream: Vec<usize>, scored: &[usize]) -> Sample {
    let n = stream.len() - 1;
    let mut mask = vec![0.0; n];
    for &t in scored {
        mask[t] = 1.0;
    }
    Sample { inputs: stream[..n].to_vec(), targets: stream[1..].to_vec(), mask }
}

/// Needle token layout: `0` marks the statement and the query, keys come
/// from `[1, 1 + span)`, values from `[1 + span, 1 + 2 span)`, filler from the rest.
pub fn needle_ranges(vocab: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let span = (vocab - 1) / 3;
    (1..1 + span, 1 + span..1 + 2 * span, 1 + 2 * span..vocab)
}

/// Start of the 3-token statement inside a haystack of `haystack` tokens:
/// at the requested depth, or uniform over every start that fits.
fn needle_start(spec: &TaskSpec, haystack: usize, rng: &mut Rng) -> usize {
    let slots = haystack - 2;
    match spec.needle_depth {
        Some(d) => ((d * (slots - 1) as f64).round() as usize).min(slots - 1),
        None => rng.below(slots),
    }
}

pub fn gen_task(spec: &TaskSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (v, l, p) = (spec.vocab_size, spec.seq_len, spec.n_pairs);
    Ok(match spec.kind {
        TaskKind::Induction => {
            // keys in [1, v/2), values in [v/2, v); 0 is unused
            let half = v / 2;
            let keys: Vec<usize> = rng.sample_distinct(half - 1, p).into_iter().map(|k| k + 1).collect();
            let values: Vec<usize> = (0..p).map(|_| half + rng.below(v - half)).collect();
            let mut stream = Vec::with_capacity(l + 1);
            for i in 0..p {
                stream.extend([keys[i], values[i]]);
            }
            let mut scored = Vec::new();
            while stream.len() < l + 1 {
                let q = rng.below(p);
                scored.push(stream.len());
                stream.push(keys[q]);
                if stream.len() < l + 1 {
                    stream.push(values[q]);
                }
            }
            // a query in the last input slot has its answer as the final target
            scored.retain(|&t| t < l);
            from_stream(stream, &scored)
        }
        TaskKind::SelectiveCopy => {
            // 0 separator, 1 noise, content from [2, v)
            let haystack = l - p;
            let content: Vec<usize> = (0..p).map(|_| 2 + rng.below(v - 2)).collect();
            let mut slots = rng.sample_distinct(haystack, p);
            slots.sort_unstable();
            let mut stream = vec![1; haystack];
            for (&s, &c) in slots.iter().zip(&content) {
                stream[s] = c;
            }
            stream.push(0);
            stream.extend(&content);
            // the separator input predicts content[0], content[i] predicts content[i + 1]
            let scored: Vec<usize> = (haystack..haystack + p).collect();
            from_stream(stream, &scored)
        }
        TaskKind::Needle => {
            let (keys, values, filler) = needle_ranges(v);
            let haystack = l - 2;
            let mut stream: Vec<usize> = (0..haystack).map(|_| filler.start + rng.below(filler.len())).collect();
            let key = keys.start + rng.below(keys.len());
            let value = values.start + rng.below(values.len());
            let at = needle_start(spec, haystack, &mut rng);
            stream[at..at + 3].copy_from_slice(&[0, key, value]);
            stream.extend([0, key, value]);
            from_stream(stream, &[l - 1])
        }
        TaskKind::LmBytes => {
            let bytes = CORPUS.as_bytes();
            let start = rng.below(bytes.len() - l);
            let stream: Vec<usize> = bytes[start..start + l + 1].iter().map(|&b| b as usize).collect();
            let all: Vec<usize> = (0..l).collect();
            from_stream(stream, &all)
        }
    })
}

/// Where the needle statement starts in a sample, or `None` for other tasks.
pub fn needle_position(spec: &TaskSpec) -> Option<usize> {
    if spec.kind != TaskKind::Needle || spec.validate().is_err() {
        return None;
    }
    let s = gen_task(spec).ok()?;
    // the statement is the first marker in the haystack
    s.inputs.iter().position(|&t| t == 0)
}

/// Row `r` of batch `index` uses the sample seed derived from `(spec.seed, index, r)`.
pub fn gen_batch(spec: &TaskSpec, batch: usize, index: u64) -> Result<Batch> {
    let root = Rng::new(spec.seed).fork(index);
    let mut out = Batch {
        batch,
        seq_len: spec.seq_len,
        inputs: Vec::with_capacity(batch * spec.seq_len),
        targets: Vec::with_capacity(batch * spec.seq_len),
        mask: Vec::with_capacity(batch * spec.seq_len),
    };
    for r in 0..batch {
        let s = gen_task(&spec.with_seed(root.fork(r as u64).seed()))?;
        out.inputs.extend(s.inputs);
        out.targets.extend(s.targets);
        out.mask.extend(s.mask);
    }
    Ok(out)
}

/// Original prose used as the byte-level language-modeling corpus.
pub const CORPUS: &str = include_str!("corpus.txt");
