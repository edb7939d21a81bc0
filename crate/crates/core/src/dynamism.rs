//! Head dynamism statistics: static rankings, Jaccard turnover, activation
//! entropy and per-head score variance.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::{HeadId, HeadLayout};
use crate::score::{DynamicHeadSet, HeadScoreFrame};
use crate::{Error, Result};

/// Size of the static head set compared against in the dynamism statistics.
pub const STATIC_TOP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticRanking {
    /// Heads by mean score, descending; ties by (layer, head).
    pub entries: Vec<(HeadId, f64)>,
    pub corpus: String,
    pub n_frames: usize,
}

impl StaticRanking {
    pub fn ordered(&self, k: usize) -> Vec<HeadId> {
        self.entries.iter().take(k).map(|&(h, _)| h).collect()
    }

    pub fn top_k(&self, k: usize) -> BTreeSet<HeadId> {
        self.ordered(k).into_iter().collect()
    }

    pub fn rank_of(&self, h: HeadId) -> Option<usize> {
        self.entries.iter().position(|&(x, _)| x == h)
    }
}

fn check_layout(frames: &[&HeadScoreFrame]) -> Result<HeadLayout> {
    let first = frames.first().ok_or(Error::Empty("score frame corpus"))?;
    let layout = first.layout;
    for f in frames {
        if f.layout != layout || f.scores.len() != layout.total() {
            return Err(Error::InvalidInput("score frames have differing head counts".into()));
        }
    }
    Ok(layout)
}

/// Ranks heads by their mean score over every frame of the corpus.
pub fn rank_static<'a>(
    frames: impl IntoIterator<Item = &'a HeadScoreFrame>,
    corpus: impl Into<String>,
) -> Result<StaticRanking> {
    let frames: Vec<&HeadScoreFrame> = frames.into_iter().collect();
    let layout = check_layout(&frames)?;
    let mut sums = vec![0.0f64; layout.total()];
    for f in &frames {
        for (s, &x) in sums.iter_mut().zip(&f.scores) {
            *s += x;
        }
    }
    let n = frames.len() as f64;
    let mut entries: Vec<(HeadId, f64)> = sums
        .into_iter()
        .enumerate()
        .map(|(i, s)| (layout.head(i), s / n))
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(StaticRanking {
        entries,
        corpus: corpus.into(),
        n_frames: frames.len(),
    })
}

/// |a ∩ b| / |a ∪ b|, or `None` when both sets are empty.
pub fn jaccard(a: &BTreeSet<HeadId>, b: &BTreeSet<HeadId>) -> Option<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(b).count() as f64 / union as f64)
}

/// Shannon entropy (nats) of a count vector normalised to a distribution.
/// Returns `None` when every count is zero.
pub fn activation_entropy(counts: &[u64]) -> Option<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let total = total as f64;
    Some(
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamismReport {
    /// Mean over steps with a non-empty dynamic set; `None` if there were none.
    pub jaccard_with_static: Option<f64>,
    /// Mean over consecutive step pairs within a sample, both-empty pairs excluded.
    pub adjacent_jaccard: Option<f64>,
    pub entropy: f64,
    /// No head was ever active, so `entropy` is reported as 0.
    pub empty_distribution: bool,
    /// Heads ordered by variance of their binary activation series, descending.
    pub variance_ranking: Vec<(HeadId, f64)>,
    pub steps: usize,
    pub empty_steps: usize,
    pub adjacent_pairs: usize,
    pub excluded_pairs: usize,
    pub activation_counts: Vec<u64>,
}

/// Dynamism statistics over per-sample sequences of dynamic head sets.
pub fn dynamism_report(
    series: &[Vec<DynamicHeadSet>],
    static_top: &BTreeSet<HeadId>,
    layout: HeadLayout,
) -> Result<DynamismReport> {
    let steps: usize = series.iter().map(Vec::len).sum();
    if steps == 0 {
        return Err(Error::Empty("dynamic head series"));
    }
    let mut counts = vec![0u64; layout.total()];
    let mut with_static = Vec::new();
    let mut adjacent = Vec::new();
    let mut excluded_pairs = 0;
    let mut empty_steps = 0;
    for sample in series {
        for (t, set) in sample.iter().enumerate() {
            for &h in &set.heads {
                if !layout.contains(h) {
                    return Err(Error::InvalidInput(format!("head {h} outside model layout")));
                }
                counts[layout.index(h)] += 1;
            }
            if set.heads.is_empty() {
                empty_steps += 1;
            } else {
                with_static.push(jaccard(&set.heads, static_top).unwrap_or(0.0));
            }
            if t > 0 {
                match jaccard(&sample[t - 1].heads, &set.heads) {
                    Some(j) => adjacent.push(j),
                    None => excluded_pairs += 1,
                }
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let entropy = activation_entropy(&counts);
    let n = steps as f64;
    let mut variance_ranking: Vec<(HeadId, f64)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let p = c as f64 / n;
            (layout.head(i), p * (1.0 - p))
        })
        .collect();
    variance_ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(DynamismReport {
        jaccard_with_static: mean(&with_static),
        adjacent_jaccard: mean(&adjacent),
        entropy: entropy.unwrap_or(0.0),
        empty_distribution: entropy.is_none(),
        variance_ranking,
        steps,
        empty_steps,
        adjacent_pairs: adjacent.len(),
        excluded_pairs,
        activation_counts: counts,
    })
}

/// Heads ordered by the population variance of their real-valued score series.
pub fn variance_ranking<'a>(frames: impl IntoIterator<Item = &'a HeadScoreFrame>) -> Result<Vec<(HeadId, f64)>> {
    let frames: Vec<&HeadScoreFrame> = frames.into_iter().collect();
    let layout = check_layout(&frames)?;
    let n = frames.len() as f64;
    let mut out: Vec<(HeadId, f64)> = (0..layout.total())
        .map(|i| {
            let mean = frames.iter().map(|f| f.scores[i]).sum::<f64>() / n;
            let var = frames.iter().map(|f| (f.scores[i] - mean).powi(2)).sum::<f64>() / n;
            (layout.head(i), var)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Writes a heads × steps score matrix for the given heads (rows) and frames (columns).
pub fn write_heatmap<W: Write>(out: W, heads: &[HeadId], frames: &[HeadScoreFrame]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["head".to_string()];
    header.extend((0..frames.len()).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    for &h in heads {
        let mut row = vec![h.to_string()];
        row.extend(frames.iter().map(|f| f.get(h).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreKind;
    use proptest::prelude::*;

    fn set(ids: &[(usize, usize)]) -> BTreeSet<HeadId> {
        ids.iter().map(|&(l, h)| HeadId::new(l, h)).collect()
    }

    fn dyn_set(step: usize, ids: &[(usize, usize)]) -> DynamicHeadSet {
        DynamicHeadSet { step, heads: set(ids) }
    }

    const LAYOUT: HeadLayout = HeadLayout { n_layers: 2, n_heads: 16 };

    #[test]
    fn jaccard_examples() {
        let a = set(&[(0, 1), (0, 2)]);
        let b = set(&[(0, 2), (0, 3)]);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a), Some(1.0));
        assert_eq!(jaccard(&a, &BTreeSet::new()), Some(0.0));
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), None);
    }

    #[test]
    fn uniform_over_twenty_heads_gives_ln_20() {
        let series: Vec<DynamicHeadSet> =
            (0..40).map(|t| dyn_set(t, &[(t % 2, (t / 2) % 10)])).collect();
        let r = dynamism_report(&[series], &BTreeSet::new(), LAYOUT).unwrap();
        assert!((r.entropy - 2.9957).abs() < 1e-3);
        assert!((r.entropy - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_head_every_step() {
        let series: Vec<DynamicHeadSet> = (0..5).map(|t| dyn_set(t, &[(1, 3)])).collect();
        let r = dynamism_report(&[series], &set(&[(1, 3)]), LAYOUT).unwrap();
        assert_eq!(r.entropy, 0.0);
        assert_eq!(r.adjacent_jaccard, Some(1.0));
        assert_eq!(r.jaccard_with_static, Some(1.0));
        assert_eq!(r.variance_ranking[0].1, 0.0);
    }

    #[test]
    fn empty_steps_are_excluded() {
        let series = vec![dyn_set(0, &[]), dyn_set(1, &[]), dyn_set(2, &[(0, 0)]), dyn_set(3, &[(0, 1)])];
        let r = dynamism_report(&[series], &set(&[(0, 0)]), LAYOUT).unwrap();
        assert_eq!(r.excluded_pairs, 1);
        assert_eq!(r.adjacent_pairs, 2);
        assert_eq!(r.adjacent_jaccard, Some(0.0));
        assert_eq!(r.jaccard_with_static, Some(0.5));
        assert_eq!(r.empty_steps, 2);
        let silent = vec![dyn_set(0, &[]), dyn_set(1, &[])];
        let r = dynamism_report(&[silent], &BTreeSet::new(), LAYOUT).unwrap();
        assert!(r.empty_distribution);
        assert_eq!(r.entropy, 0.0);
        assert!(r.adjacent_jaccard.is_none());
        assert!(dynamism_report(&[], &BTreeSet::new(), LAYOUT).is_err());
    }

    fn frame(scores: Vec<f64>) -> HeadScoreFrame {
        HeadScoreFrame {
            step: 0,
            kind: ScoreKind::CopyPaste,
            layout: HeadLayout { n_layers: 1, n_heads: scores.len() },
            scores,
        }
    }

    #[test]
    fn rank_static_examples() {
        let frames = vec![frame(vec![0.0, 1.0, 0.0]), frame(vec![0.0, 0.0, 0.0]), frame(vec![0.0, 1.0, 0.0]), frame(vec![0.0, 1.0, 0.0])];
        let r = rank_static(&frames, "t").unwrap();
        assert_eq!(r.entries[0], (HeadId::new(0, 1), 0.75));
        assert_eq!(r.ordered(3), vec![HeadId::new(0, 1), HeadId::new(0, 0), HeadId::new(0, 2)]);
        assert!(rank_static(&[] as &[HeadScoreFrame], "t").is_err());
    }

    #[test]
    fn heatmap_shape() {
        let frames = vec![frame(vec![0.0, 1.0]), frame(vec![1.0, 0.5])];
        let mut buf = Vec::new();
        write_heatmap(&mut buf, &[HeadId::new(0, 1)], &frames).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "head,t0,t1\nL0-H1,1,0.5\n");
    }

    fn arb_set() -> impl Strategy<Value = BTreeSet<HeadId>> {
        proptest::collection::btree_set((0usize..2, 0usize..16).prop_map(|(l, h)| HeadId::new(l, h)), 0..8)
    }

    proptest! {
        #[test]
        fn jaccard_symmetric_and_identity(a in arb_set(), b in arb_set()) {
            prop_assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
            if let Some(j) = jaccard(&a, &b) {
                prop_assert!((0.0..=1.0).contains(&j));
                prop_assert_eq!(j == 1.0, a == b);
            }
        }

        #[test]
        fn entropy_bounded_and_label_invariant(counts in proptest::collection::vec(0u64..50, 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let n = counts.len();
            if let Some(h) = activation_entropy(&counts) {
                prop_assert!(h >= 0.0 && h <= (n as f64).ln() + 1e-12);
                let mut shuffled = counts.clone();
                shuffled.shuffle(&mut crate::seed::rng(seed));
                prop_assert!((activation_entropy(&shuffled).unwrap() - h).abs() < 1e-12);
            }
            let uniform = vec![7u64; n];
            prop_assert!((activation_entropy(&uniform).unwrap() - (n as f64).ln()).abs() < 1e-12);
        }

        #[test]
        fn repeating_a_step_never_lowers_adjacent_mean(sets in proptest::collection::vec(arb_set(), 1..10)) {
            let series: Vec<DynamicHeadSet> = sets.iter().enumerate().map(|(t, s)| DynamicHeadSet { step: t, heads: s.clone() }).collect();
            let before = dynamism_report(&[series.clone()], &BTreeSet::new(), LAYOUT).unwrap();
            let mut longer = series.clone();
            let last = longer.last().unwrap().clone();
            longer.push(DynamicHeadSet { step: last.step + 1, ..last });
            let after = dynamism_report(&[longer], &BTreeSet::new(), LAYOUT).unwrap();
            match (before.adjacent_jaccard, after.adjacent_jaccard) {
                (Some(b), Some(a)) => prop_assert!(a >= b - 1e-12),
                (_, _) => {}
            }
        }

        #[test]
        fn rank_static_is_order_invariant(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 6), 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let frames: Vec<HeadScoreFrame> = rows.into_iter().map(frame).collect();
            let mut shuffled = frames.clone();
            shuffled.shuffle(&mut crate::seed::rng(seed));
            let a = rank_static(&frames, "x").unwrap();
            let b = rank_static(&shuffled, "x").unwrap();
            let ha: Vec<HeadId> = a.entries.iter().map(|e| e.0).collect();
            let hb: Vec<HeadId> = b.entries.iter().map(|e| e.0).collect();
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert!((x.1 - y.1).abs() < 1e-12);
            }
            // Means may differ in the last ulp between orders; rankings agree
            // wherever the means are separated.
            for (i, (x, y)) in ha.iter().zip(&hb).enumerate() {
                if x != y {
                    prop_assert!((a.entries[i].1 - b.entries[i].1).abs() < 1e-12);
                }
            }
        }
    }
}
