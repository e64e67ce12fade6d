//! Testing-dashboard semantics, accuracy and balance statistics, and the
//! timed evaluation game.

mod game;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{LabelId, ProjectState, SampleId, Split};
use crate::training::{BlobSource, ClassifyError, ConfidenceVector, TrainError, TrainedModel};

pub use game::{
    play, run_game, GameError, GameExport, GameRound, GameRunner, GameSession, GAME_TIME_LIMIT_MS,
    MAX_ROUNDS, POINTS_PER_CONFIDENCE, ROUND_LENGTH_MS,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("no test images with a label")]
    EmptyTestSet,
}

/// The current verdict of the local model on one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub sample_id: SampleId,
    pub model_version: u64,
    /// The sample's label at evaluation time.
    pub actual: LabelId,
    pub predicted: LabelId,
    pub confidence: ConfidenceVector,
    pub correct: bool,
    pub user_corrected_label: Option<LabelId>,
    pub recorded_at: u64,
}

/// Classifies every live test sample. An empty result means there is no
/// test data yet; it is not an error.
pub fn evaluate_all(
    state: &ProjectState,
    model: &TrainedModel,
    blobs: &dyn BlobSource,
    recorded_at: u64,
) -> Result<Vec<ClassificationRecord>, EvalError> {
    state
        .live_samples()
        .filter(|s| s.split == Split::Testing)
        .map(|s| {
            let image = blobs
                .blob(&s.blob)
                .ok_or(TrainError::MissingBlob(s.blob))?;
            let confidence = model.classify(image)?;
            let predicted = model.label_at(confidence.top1());
            Ok(ClassificationRecord {
                sample_id: s.id,
                model_version: model.version,
                actual: s.label,
                predicted,
                confidence,
                correct: predicted == s.label,
                user_corrected_label: None,
                recorded_at,
            })
        })
        .collect()
}

fn dashboard_cmp(a: &ClassificationRecord, b: &ClassificationRecord) -> Ordering {
    a.correct
        .cmp(&b.correct)
        .then_with(|| b.recorded_at.cmp(&a.recorded_at))
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Testing-dashboard order: misclassified first, then most recent, then by
/// sample id.
pub fn dashboard_order(records: &[ClassificationRecord]) -> Vec<ClassificationRecord> {
    let mut out = records.to_vec();
    out.sort_by(dashboard_cmp);
    out
}

/// Per-label accuracy weighted by the label's share of test images, summed.
///
/// `test_counts` are live per-label test totals; labels with no test images
/// are ignored.
pub fn weighted_accuracy(
    records: &[ClassificationRecord],
    test_counts: &BTreeMap<LabelId, usize>,
) -> Result<f64, EvalError> {
    let total: usize = test_counts.values().sum();
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    let mut correct: BTreeMap<LabelId, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.correct) {
        *correct.entry(r.actual).or_default() += 1;
    }
    let n = total as f64;
    Ok(test_counts
        .iter()
        .filter(|(_, &count)| count > 0)
        .map(|(label, &count)| {
            let label_accuracy = correct.get(label).copied().unwrap_or(0) as f64 / count as f64;
            (count as f64 / n) * label_accuracy
        })
        .sum())
}

/// Fraction of all test images classified correctly.
pub fn micro_accuracy(
    records: &[ClassificationRecord],
    test_counts: &BTreeMap<LabelId, usize>,
) -> Result<f64, EvalError> {
    let total: usize = test_counts.values().sum();
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    let correct = records
        .iter()
        .filter(|r| r.correct && test_counts.get(&r.actual).is_some_and(|&c| c > 0))
        .count();
    Ok(correct as f64 / total as f64)
}

/// Live test-image count per live label.
pub fn test_counts(state: &ProjectState) -> BTreeMap<LabelId, usize> {
    state
        .live_counts()
        .into_iter()
        .map(|(id, (_, test))| (id, test))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub train_pct: f64,
    pub test_pct: f64,
}

/// Each label's share (in percent) of the live training and testing images.
/// A split with no images reports 0 for every label.
pub fn balance_stats(state: &ProjectState) -> BTreeMap<LabelId, Balance> {
    let counts = state.live_counts();
    let train_total: usize = counts.values().map(|c| c.0).sum();
    let test_total: usize = counts.values().map(|c| c.1).sum();
    let pct = |n: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * n as f64 / total as f64
        }
    };
    counts
        .into_iter()
        .map(|(id, (train, test))| {
            (
                id,
                Balance {
                    train_pct: pct(train, train_total),
                    test_pct: pct(test, test_total),
                },
            )
        })
        .collect()
}
