//! (hidden state at n, head scores at n + k) pairs.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{GenerationTrace, HeadLayout};
use crate::score::Scoring;
use crate::{seed, Error, Result};

/// Per-step features of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFeatures {
    pub sample_id: String,
    pub hidden: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

impl TraceFeatures {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

/// Final hidden states and head scores for every step of a trace.
pub fn features_from_trace(
    trace: &GenerationTrace,
    needle: &BTreeSet<usize>,
    scoring: &Scoring,
    layout: HeadLayout,
) -> Result<TraceFeatures> {
    let mut hidden = Vec::with_capacity(trace.len());
    let mut scores = Vec::with_capacity(trace.len());
    for (t, step) in trace.steps.iter().enumerate() {
        let input = trace.input_at(t);
        let frame = scoring.frame(t, &step.output, &input, needle, layout)?;
        hidden.push(step.output.final_hidden.iter().map(|&x| x as f64).collect());
        scores.push(frame.scores);
    }
    Ok(TraceFeatures {
        sample_id: trace.sample_id.clone(),
        hidden,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDataset {
    pub offset: usize,
    pub hidden: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// (trace index, step n) of each row.
    pub origin: Vec<(usize, usize)>,
    pub split: Vec<Split>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn rows(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    /// Builds a dataset from raw rows with a seeded 70/20/10 split.
    pub fn from_rows(offset: usize, hidden: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if hidden.len() != targets.len() {
            return Err(Error::InvalidInput("hidden and target row counts differ".into()));
        }
        let origin = (0..hidden.len()).map(|i| (0, i)).collect();
        let mut d = Self {
            offset,
            hidden,
            targets,
            origin,
            split: Vec::new(),
        };
        d.assign_splits(seed);
        Ok(d)
    }

    /// Targets replaced by `score >= threshold` indicators.
    pub fn binarized(&self, threshold: f64) -> Self {
        let mut d = self.clone();
        for row in &mut d.targets {
            row.iter_mut().for_each(|y| *y = if *y >= threshold { 1.0 } else { 0.0 });
        }
        d
    }

    fn assign_splits(&mut self, seed: u64) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed));
        let n_train = (n as f64 * 0.7).round() as usize;
        let n_val = ((n as f64 * 0.2).round() as usize).min(n - n_train);
        self.split = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            self.split[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
}

/// Pairs the hidden state at n with the scores at n + k for every valid n.
pub fn collect_pairs(traces: &[TraceFeatures], k: usize, seed: u64) -> PairDataset {
    let mut d = PairDataset {
        offset: k,
        hidden: Vec::new(),
        targets: Vec::new(),
        origin: Vec::new(),
        split: Vec::new(),
    };
    for (ti, tr) in traces.iter().enumerate() {
        for n in 0..tr.len().saturating_sub(k) {
            d.hidden.push(tr.hidden[n].clone());
            d.targets.push(tr.scores[n + k].clone());
            d.origin.push((ti, n));
        }
    }
    d.assign_splits(seed);
    d
}
