//! Per-head attention matrices and induction scores.

use std::path::{Path, PathBuf};

use jamba_core::model::JambaModel;
use jamba_core::numerics::{Real, Tape};
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadProbe {
    pub layer: usize,
    pub head: usize,
    /// `[seq][seq]` row-stochastic attention weights (zeros above the diagonal).
    #[serde(skip)]
    pub matrix: Vec<Vec<f64>>,
    /// `None` when no query position has an earlier occurrence of its token.
    pub induction_score: Option<f64>,
}

/// Key positions an induction head at query `t` should read: the successor
/// `j + 1 <= t` of every earlier occurrence `j < t` of `tokens[t]`.
pub fn induction_targets(tokens: &[usize], t: usize) -> Vec<usize> {
    (0..t).filter(|&j| tokens[j] == tokens[t]).map(|j| j + 1).collect()
}

/// Mean, over query positions with at least one target, of the attention
/// mass the row puts on its induction targets. `queries` restricts the
/// positions (e.g. to a task's answer positions); `None` means all of them.
pub fn induction_score(matrix: &[Vec<f64>], tokens: &[usize], queries: Option<&[usize]>) -> Option<f64> {
    let all: Vec<usize>;
    let queries = match queries {
        Some(q) => q,
        None => {
            all = (0..matrix.len()).collect();
            &all
        }
    };
    let mut total = 0.0;
    let mut n = 0usize;
    for &t in queries {
        let row = &matrix[t];
        let targets = induction_targets(tokens, t);
        if targets.is_empty() {
            continue;
        }
        total += targets.iter().map(|&k| row[k]).sum::<f64>();
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

/// Score a head that spreads its mass evenly over visible keys would get.
pub fn uniform_base_rate(tokens: &[usize], queries: Option<&[usize]>) -> Option<f64> {
    let l = tokens.len();
    let uniform: Vec<Vec<f64>> = (0..l)
        .map(|t| (0..l).map(|k| if k <= t { 1.0 / (t + 1) as f64 } else { 0.0 }).collect())
        .collect();
    induction_score(&uniform, tokens, queries)
}

/// Runs `tokens` as one sequence and returns every attention head's weights,
/// scoring induction at `queries` (every position when `None`).
pub fn probe_attention<T: Real>(
    model: &JambaModel<T>,
    tokens: &[usize],
    queries: Option<&[usize]>,
) -> Result<Vec<HeadProbe>> {
    if let Some(&bad) = queries.and_then(|q| q.iter().find(|&&t| t >= tokens.len())) {
        return Err(HarnessError::ImpossibleTask(format!("query position {bad} is outside the {}-token input", tokens.len())));
    }
    let tape = Tape::new();
    let w = model.bind_constants(&tape)?;
    let out = model.forward_with(&tape, &w, tokens, 1, None)?;
    if out.attention.is_empty() {
        return Err(HarnessError::NoAttentionLayers);
    }
    let mut probes = Vec::new();
    for (layer, core) in out.attention {
        let (dims, probs) = tape.attention_probs(core).expect("attention node keeps its probabilities");
        let (q, k) = (dims.q_len, dims.kv_len);
        for head in 0..dims.n_heads {
            let base = head * q * k;
            let matrix: Vec<Vec<f64>> = (0..q)
                .map(|i| probs[base + i * k..base + (i + 1) * k].iter().map(|p| p.f64()).collect())
                .collect();
            let induction_score = induction_score(&matrix, tokens, queries);
            probes.push(HeadProbe { layer, head, matrix, induction_score });
        }
    }
    Ok(probes)
}

/// Writes `layer{L}_head{H}.txt` (one space-separated row per query) and a
/// `layer{L}_head{H}.json` sidecar per head; returns the matrix paths.
pub fn export_probes(probes: &[HeadProbe], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(probes.len());
    for p in probes {
        let stem = format!("layer{}_head{}", p.layer, p.head);
        let text: String = p
            .matrix
            .iter()
            .map(|row| row.iter().map(|x| format!("{x:.12}")).collect::<Vec<_>>().join(" ") + "\n")
            .collect();
        let matrix_path = dir.join(format!("{stem}.txt"));
        write_atomic(&matrix_path, text.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(p)?.as_bytes())?;
        paths.push(matrix_path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_follow_earlier_occurrences() {
        let tokens = [5, 7, 5, 9, 5];
        assert_eq!(induction_targets(&tokens, 0), Vec::<usize>::new());
        assert_eq!(induction_targets(&tokens, 2), vec![1]);
        assert_eq!(induction_targets(&tokens, 4), vec![1, 3]);
    }

    #[test]
    fn perfect_head_scores_one() {
        // a b a b: position 2 reads 1, position 3 reads 2
        let tokens = [1, 2, 1, 2];
        let mut m = vec![vec![0.0; 4]; 4];
        m[0][0] = 1.0;
        m[1][1] = 1.0;
        m[2][1] = 1.0;
        m[3][2] = 1.0;
        assert_eq!(induction_score(&m, &tokens, None), Some(1.0));
        assert_eq!(induction_score(&m, &tokens, Some(&[3])), Some(1.0));
        assert_eq!(induction_score(&m, &tokens, Some(&[0, 1])), None);
        // uniform rows: 1/3 at t=2 and 1/4 at t=3
        let base = uniform_base_rate(&tokens, None).unwrap();
        assert!((base - (1.0 / 3.0 + 0.25) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn no_repeats_has_no_score() {
        assert_eq!(uniform_base_rate(&[1, 2, 3], None), None);
    }
}
