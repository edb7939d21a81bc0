//! Head-driven retrieval: averaged attention, top-k, clustering and windows.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, HeadId, HeadLayout, Result, StepOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalParams {
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    /// Sorted indices at most this far apart share a cluster.
    #[serde(default = "d_gap")]
    pub cluster_gap: usize,
    #[serde(default = "d_window")]
    pub window: usize,
}

fn d_top_k() -> usize {
    10
}
fn d_gap() -> usize {
    8
}
fn d_window() -> usize {
    64
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            top_k: d_top_k(),
            cluster_gap: d_gap(),
            window: d_window(),
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.cluster_gap == 0 || self.window == 0 {
            return Err(Error::Config("retrieval top_k, cluster_gap and window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub heads: Vec<HeadId>,
    /// Averaged attention over context positions.
    pub scores: Vec<f64>,
    pub top_k: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub representatives: Vec<usize>,
    pub windows: Vec<Range<usize>>,
    /// Sorted, disjoint, within the context.
    pub merged: Vec<Range<usize>>,
}

impl Retrieval {
    pub fn visible(&self) -> Vec<usize> {
        self.merged.iter().flat_map(|r| r.clone()).collect()
    }
}

/// Mean of the heads' attention rows over the first `context_len` positions.
pub fn average_attention(output: &StepOutput, layout: HeadLayout, heads: &[HeadId], context_len: usize) -> Vec<f64> {
    let mut avg = vec![0.0; context_len];
    if heads.is_empty() {
        return avg;
    }
    for &h in heads {
        for (a, w) in avg.iter_mut().zip(output.row(layout, h)) {
            *a += w;
        }
    }
    avg.iter_mut().for_each(|a| *a /= heads.len() as f64);
    avg
}

/// Indices of the `k` largest scores, ascending; ties favour lower indices.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Splits sorted indices wherever consecutive entries differ by more than `gap`.
pub fn cluster_indices(sorted: &[usize], gap: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &i in sorted {
        match out.last_mut() {
            Some(c) if i - c[c.len() - 1] <= gap => c.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

/// Highest-scoring member; the lowest index wins ties.
pub fn representative(cluster: &[usize], scores: &[f64]) -> usize {
    let mut best = cluster[0];
    for &i in &cluster[1..] {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// A window of `size` positions centred on `rep`, clipped to `0..len` and
/// widened to cover `cluster` entirely.
pub fn expand_window(rep: usize, size: usize, len: usize, cluster: &[usize]) -> Range<usize> {
    let start = rep.saturating_sub(size / 2);
    let end = (start + size).min(len);
    let lo = cluster.iter().copied().min().unwrap_or(rep).min(start);
    let hi = cluster.iter().map(|&i| i + 1).max().unwrap_or(rep + 1).max(end);
    lo..hi.min(len)
}

/// Merges overlapping or touching windows into sorted disjoint ranges.
pub fn merge_windows(windows: &[Range<usize>]) -> Vec<Range<usize>> {
    let mut sorted: Vec<Range<usize>> = windows.iter().filter(|w| !w.is_empty()).cloned().collect();
    sorted.sort_by_key(|w| (w.start, w.end));
    let mut out: Vec<Range<usize>> = Vec::new();
    for w in sorted {
        match out.last_mut() {
            Some(last) if w.start <= last.end => last.end = last.end.max(w.end),
            _ => out.push(w),
        }
    }
    out
}

/// Runs the retrieval steps on a forward pass made with the context visible.
pub fn select_windows(
    output: &StepOutput,
    layout: HeadLayout,
    heads: Vec<HeadId>,
    context_len: usize,
    params: &RetrievalParams,
) -> Result<Retrieval> {
    if context_len == 0 {
        return Err(Error::Empty("context"));
    }
    let scores = average_attention(output, layout, &heads, context_len);
    let top_k = top_k_indices(&scores, params.top_k);
    let clusters = cluster_indices(&top_k, params.cluster_gap);
    let representatives: Vec<usize> = clusters.iter().map(|c| representative(c, &scores)).collect();
    let windows: Vec<Range<usize>> = clusters
        .iter()
        .zip(&representatives)
        .map(|(c, &r)| expand_window(r, params.window, context_len, c))
        .collect();
    let merged = merge_windows(&windows);
    Ok(Retrieval {
        heads,
        scores,
        top_k,
        clusters,
        representatives,
        windows,
        merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn overlapping_windows_merge() {
        assert_eq!(merge_windows(&[10..21, 5..16]), vec![5..21]);
        assert_eq!(merge_windows(&[0..3, 5..8, 3..4]), vec![0..4, 5..8]);
    }

    #[test]
    fn close_indices_form_one_cluster() {
        assert_eq!(cluster_indices(&[3, 9, 17, 20], 8), vec![vec![3, 9, 17, 20]]);
        assert_eq!(cluster_indices(&[3, 12], 8), vec![vec![3], vec![12]]);
    }

    #[test]
    fn window_is_clipped_and_covers_cluster() {
        assert_eq!(expand_window(2, 8, 100, &[2]), 0..8);
        assert_eq!(expand_window(98, 8, 100, &[98]), 94..100);
        assert_eq!(expand_window(50, 4, 100, &[30, 50, 70]), 30..71);
    }

    #[test]
    fn top_k_prefers_low_index_on_ties() {
        assert_eq!(top_k_indices(&[0.1, 0.5, 0.1, 0.5, 0.1], 3), vec![0, 1, 3]);
    }

    proptest! {
        #[test]
        fn windows_cover_top_k(scores in prop::collection::vec(0.0f64..1.0, 1..300), k in 1usize..20, gap in 1usize..12, size in 1usize..40) {
            let idx = top_k_indices(&scores, k);
            let clusters = cluster_indices(&idx, gap);
            prop_assert!(clusters.len() <= k);
            let windows: Vec<_> = clusters.iter().map(|c| expand_window(representative(c, &scores), size, scores.len(), c)).collect();
            let merged = merge_windows(&windows);
            for w in merged.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
            prop_assert!(merged.iter().all(|w| w.start < w.end && w.end <= scores.len()));
            for i in idx {
                prop_assert!(merged.iter().any(|w| w.contains(&i)));
            }
        }
    }
}
