use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One challenger/attacker exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameRound {
    /// The challenger's coin: true means a member was drawn.
    pub challenge: bool,
    pub sample_id: usize,
    pub guess: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSummary {
    pub rounds: Vec<GameRound>,
    /// `None` when no rounds were played.
    pub accuracy: Option<f64>,
}

impl GameSummary {
    pub fn member_challenge_fraction(&self) -> Option<f64> {
        if self.rounds.is_empty() {
            return None;
        }
        Some(self.rounds.iter().filter(|r| r.challenge).count() as f64 / self.rounds.len() as f64)
    }
}

/// Plays `num_rounds` games: flip a fair coin, draw a sample uniformly from
/// the matching class, and guess "member" iff its score exceeds `threshold`.
pub fn run_security_game(
    ids: &[usize],
    scores: &[f64],
    is_member: &[bool],
    threshold: f64,
    num_rounds: usize,
    seed: u64,
) -> Result<GameSummary> {
    if ids.len() != scores.len() || ids.len() != is_member.len() {
        return Err(Error::invalid("ids, scores and membership labels differ in length"));
    }
    let members: Vec<usize> = (0..ids.len()).filter(|&i| is_member[i]).collect();
    let nonmembers: Vec<usize> = (0..ids.len()).filter(|&i| !is_member[i]).collect();
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid("the game pool needs both members and non-members"));
    }
    let mut rng = seed::rng(seed);
    let rounds: Vec<GameRound> = (0..num_rounds)
        .map(|_| {
            let challenge = rng.random_bool(0.5);
            let pool = if challenge { &members } else { &nonmembers };
            let pick = pool[rng.random_range(0..pool.len())];
            let guess = scores[pick] > threshold;
            GameRound {
                challenge,
                sample_id: ids[pick],
                guess,
                correct: guess == challenge,
            }
        })
        .collect();
    let accuracy = (!rounds.is_empty())
        .then(|| rounds.iter().filter(|r| r.correct).count() as f64 / rounds.len() as f64);
    Ok(GameSummary { rounds, accuracy })
}
