//! Combination of per-model segment predictions into the ensemble output.
//!
//! Blocks for a segment are folded into `Y` in model order. A block that
//! arrives ahead of its turn waits until the lower models of that segment
//! have been folded, so the result is bit-identical whatever order the
//! workers finish in.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{num_segments, segment_bounds, Segment};

use super::store::Predictions;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationRule {
    #[default]
    Averaging,
    MajorityVote,
    /// One nonnegative weight per model, summing to 1.
    WeightedAveraging(Vec<f32>),
}

impl CombinationRule {
    pub fn name(&self) -> &'static str {
        match self {
            CombinationRule::Averaging => "avg",
            CombinationRule::MajorityVote => "vote",
            CombinationRule::WeightedAveraging(_) => "wavg",
        }
    }

    pub fn check(&self, models: usize) -> Result<()> {
        if let CombinationRule::WeightedAveraging(w) = self {
            if w.len() != models {
                return Err(Error::Precondition(format!("{} weights for {models} models", w.len())));
            }
            if w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Precondition("weights must be nonnegative".into()));
            }
            let sum: f32 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Precondition(format!("weights sum to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// `Y[start..end] += P / models` (or `w * P`), the raw combination step.
pub fn accumulate(
    y: &mut Predictions,
    segment: &Segment,
    block: &[f32],
    model: usize,
    models: usize,
    rule: &CombinationRule,
) {
    let rows = &mut y.data[segment.start * y.width..segment.end * y.width];
    match rule {
        CombinationRule::WeightedAveraging(w) => {
            let weight = w[model];
            rows.iter_mut().zip(block).for_each(|(acc, p)| *acc += weight * p);
        }
        _ => {
            let m = models as f32;
            rows.iter_mut().zip(block).for_each(|(acc, p)| *acc += p / m);
        }
    }
}

/// Index of the largest value, lowest index on ties.
fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub predictions: Predictions,
    /// Per-sample vote counts (`rows * width`), majority vote only.
    pub votes: Option<Vec<u32>>,
}

impl Combined {
    /// Winning class per sample for a majority vote.
    pub fn winners(&self) -> Option<Vec<usize>> {
        let votes = self.votes.as_ref()?;
        let w = self.predictions.width;
        Some(
            votes
                .chunks(w)
                .map(argmax)
                .collect(),
        )
    }
}

#[derive(Debug)]
pub struct Accumulator {
    y: Predictions,
    votes: Option<Vec<u32>>,
    rule: CombinationRule,
    models: usize,
    segment_size: usize,
    segments: usize,
    /// Next model to fold, per segment.
    next_model: Vec<usize>,
    seen: Vec<bool>,
    pending: HashMap<(usize, usize), Vec<f32>>,
    received: usize,
}

impl Accumulator {
    /// Zeroed buffer for `nb_samples` rows of `width` predictions.
    pub fn new(
        nb_samples: usize,
        width: usize,
        models: usize,
        segment_size: usize,
        rule: CombinationRule,
    ) -> Result<Self> {
        rule.check(models)?;
        let segments = num_segments(nb_samples, segment_size);
        let votes = matches!(rule, CombinationRule::MajorityVote).then(|| vec![0; nb_samples * width]);
        Ok(Self {
            y: Predictions::zeros(nb_samples, width),
            votes,
            rule,
            models,
            segment_size,
            segments,
            next_model: vec![0; segments],
            seen: vec![false; segments * models],
            pending: HashMap::new(),
            received: 0,
        })
    }

    pub fn expected(&self) -> usize {
        self.segments * self.models
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn is_complete(&self) -> bool {
        self.received == self.expected()
    }

    /// Accepts the block of `model` for `segment`. Each (segment, model) pair
    /// may arrive once.
    pub fn accept(&mut self, segment: usize, model: usize, block: Vec<f32>) -> Result<()> {
        if model >= self.models || segment >= self.segments {
            return Err(Error::Protocol(format!("unknown segment {segment} / model {model}")));
        }
        let bounds = segment_bounds(segment, self.segment_size, self.y.rows)?;
        if block.len() != bounds.len() * self.y.width {
            return Err(Error::Protocol(format!(
                "segment {segment} from model {model}: {} values, expected {}x{}",
                block.len(),
                bounds.len(),
                self.y.width
            )));
        }
        let slot = segment * self.models + model;
        if self.seen[slot] {
            return Err(Error::Protocol(format!("duplicate segment {segment} from model {model}")));
        }
        self.seen[slot] = true;
        self.received += 1;
        self.pending.insert((segment, model), block);
        while let Some(block) = self.pending.remove(&(segment, self.next_model[segment])) {
            let m = self.next_model[segment];
            self.fold(&bounds, m, &block);
            self.next_model[segment] += 1;
        }
        Ok(())
    }

    fn fold(&mut self, bounds: &Segment, model: usize, block: &[f32]) {
        match &mut self.votes {
            Some(votes) => {
                let w = self.y.width;
                for (i, row) in block.chunks(w).enumerate() {
                    votes[(bounds.start + i) * w + argmax(row)] += 1;
                }
            }
            None => accumulate(&mut self.y, bounds, block, model, self.models, &self.rule),
        }
    }

    /// Final output. Majority votes become one-hot rows of the winning class.
    pub fn finish(mut self) -> Result<Combined> {
        if !self.is_complete() {
            return Err(Error::Protocol(format!(
                "combination incomplete: {} of {} blocks",
                self.received,
                self.expected()
            )));
        }
        if let Some(votes) = &self.votes {
            let w = self.y.width;
            for (i, row) in votes.chunks(w).enumerate() {
                self.y.data[i * w + argmax(row)] = 1.0;
            }
        }
        Ok(Combined {
            predictions: self.y,
            votes: self.votes,
        })
    }
}
