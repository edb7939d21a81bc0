//! Answer metrics: UUID containment, ROUGE-L and SQuAD-style EM/F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    AccuracyContains,
    RougeL,
    Em,
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub kind: MetricKind,
    pub value: f64,
}

pub fn score(pred: &str, gold: &str, kind: MetricKind) -> MetricResult {
    let value = match kind {
        MetricKind::AccuracyContains => accuracy_contains(pred, gold),
        MetricKind::RougeL => rouge_l(pred, gold),
        MetricKind::Em => em(pred, gold),
        MetricKind::F1 => f1(pred, gold),
    };
    MetricResult { kind, value }
}

/// 1 if `gold` occurs verbatim in `pred`.
pub fn accuracy_contains(pred: &str, gold: &str) -> f64 {
    if pred.contains(gold) {
        1.0
    } else {
        0.0
    }
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure (beta = 1) over lowercased whitespace tokens.
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let p: Vec<String> = pred.split_whitespace().map(str::to_lowercase).collect();
    let g: Vec<String> = gold.split_whitespace().map(str::to_lowercase).collect();
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / p.len() as f64;
    let recall = lcs / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Lowercase, drop ASCII punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lower
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn em(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// Token-overlap F1 on normalised answers.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt == gt { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let s = "the magic word is 42";
        assert_eq!(rouge_l(s, s), 1.0);
        assert_eq!(f1("the cat sat", "cat sat"), 1.0);
        assert_eq!(em("The Cat, sat!", "cat sat"), 1.0);
        let uuid = "1b4e28ba-2fa1-11d2-883f-0016d3cca427";
        let altered = "1b4e28ba-2fa1-11d2-883f-0016d3cca428";
        assert_eq!(accuracy_contains(&format!("It is {altered}."), uuid), 0.0);
        assert_eq!(accuracy_contains(&format!("It is {uuid}."), uuid), 1.0);
        assert_eq!(rouge_l("a b c", "x y"), 0.0);
    }

    #[test]
    fn rouge_hand_computed() {
        // LCS("a b c d", "a c e") = 2; P = 2/4, R = 2/3, F = 4/7.
        assert!((rouge_l("a b c d", "a c e") - 4.0 / 7.0).abs() < 1e-15);
        // Common tokens {cat}: P = 1/2, R = 1/1, F = 2/3.
        assert!((f1("black cat", "cat") - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metric_invariants(pred in "[a-c ,.]{0,20}", gold in "[a-c ,.]{0,20}") {
            for kind in [MetricKind::AccuracyContains, MetricKind::RougeL, MetricKind::Em, MetricKind::F1] {
                let v = score(&pred, &gold, kind).value;
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if em(&pred, &gold) == 1.0 {
                prop_assert_eq!(f1(&pred, &gold), 1.0);
            }
            if accuracy_contains(&pred, &gold) == 1.0 {
                prop_assert!(pred.contains(&gold));
            }
            prop_assert_eq!(rouge_l(&pred, &gold), rouge_l(&format!("{pred}  \n"), &gold));
        }
    }
}
