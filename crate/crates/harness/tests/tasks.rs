use jamba_harness::tasks::{gen_batch, gen_task, needle_position, needle_ranges, TaskKind, TaskSpec, CORPUS};
use jamba_harness::HarnessError;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn single_pair_answers_are_the_paired_token() {
    let s = gen_task(&TaskSpec::induction(16, 12, 1, 3)).unwrap();
    let (key, value) = (s.inputs[0], s.inputs[1]);
    let scored: Vec<usize> = (0..12).filter(|&t| s.mask[t] == 1.0).collect();
    assert!(!scored.is_empty());
    for t in scored {
        assert_eq!(s.inputs[t], key);
        assert_eq!(s.targets[t], value);
    }
}

#[test]
fn induction_queries_repeat_earlier_pairs() {
    let s = gen_task(&TaskSpec::induction(64, 40, 6, 9)).unwrap();
    for t in 12..40 {
        if s.mask[t] == 1.0 {
            let first = (0..12).step_by(2).find(|&j| s.inputs[j] == s.inputs[t]).expect("query is a known key");
            assert_eq!(s.targets[t], s.inputs[first + 1]);
        }
    }
    assert_eq!(s.mask.iter().filter(|&&m| m == 1.0).count(), 14);
}

#[test]
fn regeneration_is_bitwise_identical() {
    for spec in [
        TaskSpec::induction(32, 32, 8, 5),
        TaskSpec::selective_copy(16, 40, 6, 5),
        TaskSpec::needle(30, 64, None, 5),
        TaskSpec::lm_bytes(48, 5),
    ] {
        assert_eq!(gen_task(&spec).unwrap(), gen_task(&spec).unwrap());
        assert_eq!(gen_batch(&spec, 4, 7).unwrap(), gen_batch(&spec, 4, 7).unwrap());
        assert_ne!(gen_batch(&spec, 4, 7).unwrap(), gen_batch(&spec, 4, 8).unwrap());
    }
}

#[test]
fn impossible_specs_are_rejected() {
    let cases = [
        TaskSpec::induction(8, 64, 9, 0),
        TaskSpec::induction(32, 10, 8, 0),
        TaskSpec::induction(32, 32, 0, 0),
        TaskSpec::selective_copy(2, 16, 3, 0),
        TaskSpec::selective_copy(16, 6, 3, 0),
        TaskSpec::needle(5, 64, None, 0),
        TaskSpec::needle(30, 4, None, 0),
        TaskSpec::needle(30, 64, Some(1.5), 0),
        TaskSpec::lm_bytes(CORPUS.len(), 0),
        TaskSpec { vocab_size: 128, ..TaskSpec::lm_bytes(16, 0) },
    ];
    for spec in cases {
        assert!(matches!(gen_task(&spec), Err(HarnessError::ImpossibleTask(_))), "{spec:?}");
    }
}

#[test]
fn selective_copy_scores_the_content_in_order() {
    let (l, p) = (30, 5);
    let s = gen_task(&TaskSpec::selective_copy(12, l, p, 11)).unwrap();
    let haystack = l - p;
    let content: Vec<usize> = s.inputs[..haystack].iter().copied().filter(|&t| t != 1).collect();
    assert_eq!(content.len(), p);
    assert_eq!(s.inputs[haystack], 0);
    let answers: Vec<usize> = (0..l).filter(|&t| s.mask[t] == 1.0).map(|t| s.targets[t]).collect();
    assert_eq!(answers, content);
}

#[test]
fn needle_query_asks_for_the_planted_value() {
    let v = 40;
    let (keys, values, filler) = needle_ranges(v);
    let s = gen_task(&TaskSpec::needle(v, 50, None, 2)).unwrap();
    let at = needle_position(&TaskSpec::needle(v, 50, None, 2)).unwrap();
    assert!(keys.contains(&s.inputs[at + 1]) && values.contains(&s.inputs[at + 2]));
    assert_eq!(&s.inputs[48..], &[0, s.inputs[at + 1]]);
    assert_eq!(s.targets[49], s.inputs[at + 2]);
    assert_eq!(s.mask.iter().sum::<f64>(), 1.0);
    let outside = (0..48).filter(|&t| t < at || t > at + 2);
    assert!(outside.into_iter().all(|t| filler.contains(&s.inputs[t])));
}

#[test]
fn needle_depth_endpoints() {
    let haystack = 100;
    let spec = |d| TaskSpec::needle(30, haystack + 2, Some(d), 4);
    assert_eq!(needle_position(&spec(0.0)), Some(0));
    assert_eq!(needle_position(&spec(1.0)), Some(haystack - 3));
    assert_eq!(needle_position(&spec(0.5)), Some(((haystack - 3) as f64 * 0.5).round() as usize));
}

#[test]
fn needle_positions_are_uniform_over_depths() {
    let haystack = 512;
    let slots = haystack - 2;
    let n = 10_000;
    let base = TaskSpec::needle(64, haystack + 2, None, 0);
    let mut counts = vec![0usize; slots];
    for i in 0..n {
        counts[needle_position(&base.with_seed(i)).unwrap()] += 1;
    }
    let expected = n as f64 / slots as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((slots - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat} p {p}");
}

#[test]
fn lm_bytes_windows_come_from_the_corpus() {
    let s = gen_task(&TaskSpec::lm_bytes(64, 17)).unwrap();
    let text: Vec<u8> = s.inputs.iter().map(|&b| b as u8).collect();
    assert!(CORPUS.as_bytes().windows(64).any(|w| w == text.as_slice()));
    assert_eq!(&s.inputs[1..], &s.targets[..63]);
    assert!(s.mask.iter().all(|&m| m == 1.0));
}

#[test]
fn kinds_parse() {
    assert_eq!(TaskKind::parse("selective-copy"), Some(TaskKind::SelectiveCopy));
    assert_eq!(TaskKind::parse("lm-bytes"), Some(TaskKind::LmBytes));
    assert_eq!(TaskKind::parse("copy"), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn targets_are_inputs_shifted(kind in 0usize..4, seed in any::<u64>(), l in 24usize..80) {
        let spec = match kind {
            0 => TaskSpec::induction(32, l, 6, seed),
            1 => TaskSpec::selective_copy(16, l, 6, seed),
            2 => TaskSpec::needle(32, l, None, seed),
            _ => TaskSpec::lm_bytes(l, seed),
        };
        let s = gen_task(&spec).unwrap();
        prop_assert_eq!(s.inputs.len(), l);
        prop_assert_eq!(s.targets.len(), l);
        prop_assert_eq!(&s.inputs[1..], &s.targets[..l - 1]);
        prop_assert!(s.mask.contains(&1.0));
        prop_assert!(s.inputs.iter().chain(&s.targets).all(|&t| t < spec.vocab_size));
    }
}
