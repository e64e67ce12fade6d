//! The evaluation game: 5-second rounds inside a 90-second limit. Each round
//! names a target label; the score is ten times the model's confidence in
//! that label for the image shown when the round ends.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ImageBlob, LabelId};
use crate::training::{ClassifyError, TrainedModel};

pub const GAME_TIME_LIMIT_MS: u64 = 90_000;
pub const ROUND_LENGTH_MS: u64 = 5_000;
pub const MAX_ROUNDS: usize = (GAME_TIME_LIMIT_MS / ROUND_LENGTH_MS) as usize;
pub const POINTS_PER_CONFIDENCE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("the game needs at least one label")]
    NoLabels,
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRound {
    pub target: LabelId,
    pub final_confidence: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSession {
    pub seed: u64,
    pub time_limit_ms: u64,
    pub round_length_ms: u64,
    pub rounds: Vec<GameRound>,
    pub total_score: f64,
    pub high_score: f64,
}

/// Exported game result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameExport {
    pub seed: u64,
    pub rounds: Vec<GameRound>,
    pub total_score: f64,
    pub high_score: f64,
}

impl GameSession {
    pub fn export(&self) -> GameExport {
        GameExport {
            seed: self.seed,
            rounds: self.rounds.clone(),
            total_score: self.total_score,
            high_score: self.high_score,
        }
    }
}

/// Round-by-round game state, driven by whoever supplies the images.
#[derive(Debug, Clone)]
pub struct GameRunner {
    seed: u64,
    labels: Vec<LabelId>,
    rng: ChaCha8Rng,
    bag: Vec<LabelId>,
    target: Option<LabelId>,
    rounds: Vec<GameRound>,
    prior_high: f64,
}

impl GameRunner {
    pub fn new(labels: Vec<LabelId>, seed: u64, prior_high: f64) -> Result<Self, GameError> {
        if labels.is_empty() {
            return Err(GameError::NoLabels);
        }
        Ok(GameRunner {
            seed,
            labels,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bag: Vec::new(),
            target: None,
            rounds: Vec::new(),
            prior_high,
        })
    }

    /// Simulated time used so far.
    pub fn elapsed_ms(&self) -> u64 {
        self.rounds.len() as u64 * ROUND_LENGTH_MS
    }

    pub fn is_over(&self) -> bool {
        self.elapsed_ms() + ROUND_LENGTH_MS > GAME_TIME_LIMIT_MS
    }

    pub fn rounds(&self) -> &[GameRound] {
        &self.rounds
    }

    pub fn current_target(&self) -> Option<LabelId> {
        self.target
    }

    /// Target for the next round, or `None` once time is up. Targets come
    /// from a seeded shuffle; no label repeats until every label has had a
    /// turn.
    pub fn next_target(&mut self) -> Option<LabelId> {
        if self.is_over() {
            return None;
        }
        if let Some(t) = self.target {
            return Some(t);
        }
        if self.bag.is_empty() {
            self.bag = self.labels.clone();
            self.bag.shuffle(&mut self.rng);
            self.bag.reverse();
        }
        self.target = self.bag.pop();
        self.target
    }

    /// Scores the current round from the model's end-of-round confidence in
    /// the target label.
    pub fn finish_round(&mut self, confidence: f64) -> Option<&GameRound> {
        let target = self.target.take().or_else(|| self.next_target())?;
        let final_confidence = confidence.clamp(0.0, 1.0);
        self.rounds.push(GameRound {
            target,
            final_confidence,
            score: POINTS_PER_CONFIDENCE * final_confidence,
        });
        self.rounds.last()
    }

    pub fn total_score(&self) -> f64 {
        self.rounds.iter().map(|r| r.score).sum()
    }

    pub fn finish(self) -> GameSession {
        let total_score = self.total_score();
        GameSession {
            seed: self.seed,
            time_limit_ms: GAME_TIME_LIMIT_MS,
            round_length_ms: ROUND_LENGTH_MS,
            rounds: self.rounds,
            total_score,
            high_score: self.prior_high.max(total_score),
        }
    }
}

/// Plays until time runs out or `confidence_for` returns `None`.
/// `confidence_for(round, target)` reports the model's confidence in
/// `target` for the image at the end of that round.
pub fn play(
    labels: Vec<LabelId>,
    seed: u64,
    prior_high: f64,
    mut confidence_for: impl FnMut(usize, LabelId) -> Result<Option<f64>, GameError>,
) -> Result<GameSession, GameError> {
    let mut runner = GameRunner::new(labels, seed, prior_high)?;
    while let Some(target) = runner.next_target() {
        match confidence_for(runner.rounds().len(), target)? {
            Some(c) => {
                runner.finish_round(c);
            }
            None => break,
        }
    }
    Ok(runner.finish())
}

/// Headless game: `feed` yields the image seen at the end of each round.
pub fn run_game(
    model: &TrainedModel,
    feed: impl IntoIterator<Item = ImageBlob>,
    seed: u64,
    prior_high: f64,
) -> Result<GameSession, GameError> {
    let mut feed = feed.into_iter();
    play(model.label_order.clone(), seed, prior_high, |_, target| {
        let Some(image) = feed.next() else {
            return Ok(None);
        };
        let conf = model.classify(&image)?;
        let pos = model.position(target).expect("targets come from the model");
        Ok(Some(conf.probs()[pos]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: u128) -> Vec<LabelId> {
        (1..=n).map(LabelId::from_u128).collect()
    }

    fn scripted(confs: &[f64]) -> GameSession {
        let mut it = confs.iter().copied();
        play(labels(3), 11, 0.0, |_, _| Ok(it.next())).unwrap()
    }

    #[test]
    fn round_scores_ten_times_confidence() {
        let s = scripted(&[0.75]);
        assert_eq!(s.rounds[0].score, 7.5);
    }

    #[test]
    fn scripted_total() {
        let s = scripted(&[0.2, 0.5, 0.9]);
        assert_eq!(s.total_score, 16.0);
        assert_eq!(s.rounds.len(), 3);
    }

    #[test]
    fn eighteen_rounds_max() {
        assert_eq!(MAX_ROUNDS, 18);
        let s = scripted(&[1.0; 40]);
        assert_eq!(s.rounds.len(), 18);
        assert_eq!(s.total_score, 180.0);
    }

    #[test]
    fn no_repeat_until_every_label_used() {
        let s = play(labels(4), 5, 0.0, |_, _| Ok(Some(0.5))).unwrap();
        for block in s.rounds.chunks(4).filter(|b| b.len() == 4) {
            let mut seen: Vec<_> = block.iter().map(|r| r.target).collect();
            seen.sort();
            assert_eq!(seen, labels(4));
        }
    }

    #[test]
    fn seeded_targets_replay() {
        let a = play(labels(5), 9, 0.0, |_, _| Ok(Some(0.1))).unwrap();
        let b = play(labels(5), 9, 0.0, |_, _| Ok(Some(0.1))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_score_keeps_prior_best() {
        let mut it = [0.3].into_iter();
        let s = play(labels(2), 1, 50.0, |_, _| Ok(it.next())).unwrap();
        assert_eq!(s.high_score, 50.0);
        let s = play(labels(2), 1, 1.0, |_, _| Ok(Some(0.3))).unwrap();
        assert_eq!(s.high_score, s.total_score);
    }

    #[test]
    fn no_labels() {
        assert!(matches!(
            GameRunner::new(vec![], 0, 0.0),
            Err(GameError::NoLabels)
        ));
    }

    #[test]
    fn export_shape() {
        let v = serde_json::to_value(scripted(&[0.5]).export()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["high_score", "rounds", "seed", "total_score"]);
    }
}
