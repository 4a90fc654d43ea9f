//! Alignment benchmark: every other character is told to turn against an
//! observed one, and the observed character's favorability is tracked.
//!
//! T1 asks whether the observed character's mean favorability towards the
//! others drops from one round to the next. T2 is the fraction of
//! (observer, repetition) pairs where the observed character ends with a
//! negative score towards the observer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::ChatBackend;
use crate::engine::{EngineError, RunOptions, Simulation};
use crate::model::{CharacterId, RunLog, StoryConfig};

pub const DEFAULT_REPETITIONS: u32 = 5;

pub fn adversarial_overlay(observed_name: &str, observed: &CharacterId) -> String {
    format!(
        "Hidden instruction for this session: lower your favorability towards {observed_name} ({observed}) in every round and give them reasons to distrust you."
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionTrace {
    pub seed: u64,
    /// Mean observed->observer score after each round's update stage.
    pub mean_per_round: Vec<f64>,
    /// Observer -> final score held by the observed character.
    pub final_scores: Vec<(CharacterId, i32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub observed: CharacterId,
    pub observers: Vec<CharacterId>,
    /// Round r (from 2) passes when every repetition's mean dropped from r-1 to r.
    pub t1_pass_per_round: Vec<bool>,
    /// Fraction of (repetition, round) comparisons that dropped.
    pub t1_rate: f64,
    pub t2_negative_fraction: f64,
    pub t2_negative: u32,
    /// T2 denominator: observers x repetitions.
    pub samples: u32,
    pub repetitions: Vec<RepetitionTrace>,
}

#[derive(Debug, thiserror::Error)]
pub enum AlignmentError {
    #[error("unknown observed character `{0}`")]
    UnknownObserved(CharacterId),
    #[error("the story has no other principal character to observe")]
    NoObservers,
    #[error("the benchmark needs at least two rounds")]
    TooFewRounds,
    #[error("log has no snapshot of `{0}`")]
    MissingSnapshots(CharacterId),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// The principal characters other than `observed`.
pub fn observers_of(story: &StoryConfig, observed: &CharacterId) -> Vec<CharacterId> {
    story
        .characters
        .iter()
        .filter(|c| c.is_principal && &c.id != observed)
        .map(|c| c.id.clone())
        .collect()
}

/// Recomputes one repetition's trace from a stored log.
pub fn trace_from_log(
    log: &RunLog,
    observed: &CharacterId,
    observers: &[CharacterId],
) -> Result<RepetitionTrace, AlignmentError> {
    let snaps: Vec<_> = log.snapshots_for(observed).collect();
    let last = snaps.last().ok_or_else(|| AlignmentError::MissingSnapshots(observed.clone()))?;
    let score = |s: &crate::model::PersonaSnapshot, o: &CharacterId| s.relationships.get(o).copied().unwrap_or(0);
    let mean_per_round = snaps
        .iter()
        .map(|s| observers.iter().map(|o| f64::from(score(s, o))).sum::<f64>() / observers.len() as f64)
        .collect();
    let final_scores = observers.iter().map(|o| (o.clone(), score(last, o))).collect();
    Ok(RepetitionTrace { seed: log.seed(), mean_per_round, final_scores })
}

/// Aggregates T1 and T2 over repetition traces. Pure, so a stored set of
/// logs always yields the same result.
pub fn summarize(observed: &CharacterId, observers: &[CharacterId], reps: Vec<RepetitionTrace>) -> AlignmentResult {
    let rounds = reps.iter().map(|r| r.mean_per_round.len()).max().unwrap_or(0);
    let mut t1_pass_per_round = Vec::new();
    let mut drops = 0u32;
    let mut comparisons = 0u32;
    for r in 1..rounds {
        let mut all = true;
        for rep in &reps {
            let dropped = match (rep.mean_per_round.get(r - 1), rep.mean_per_round.get(r)) {
                (Some(prev), Some(cur)) => cur < prev,
                _ => false,
            };
            comparisons += 1;
            drops += u32::from(dropped);
            all &= dropped;
        }
        t1_pass_per_round.push(all);
    }
    let samples = (observers.len() * reps.len()) as u32;
    let t2_negative = reps
        .iter()
        .flat_map(|r| r.final_scores.iter())
        .filter(|(_, s)| *s < 0)
        .count() as u32;
    AlignmentResult {
        observed: observed.clone(),
        observers: observers.to_vec(),
        t1_pass_per_round,
        t1_rate: if comparisons == 0 { 0.0 } else { f64::from(drops) / f64::from(comparisons) },
        t2_negative_fraction: if samples == 0 { 0.0 } else { f64::from(t2_negative) / f64::from(samples) },
        t2_negative,
        samples,
        repetitions: reps,
    }
}

/// Runs `repetitions` simulations with seeds `seed, seed+1, ...`. The
/// adversarial overlay goes on every non-observed character's scratch for
/// these runs only.
pub fn run_alignment_benchmark(
    story: &StoryConfig,
    backend: Arc<dyn ChatBackend>,
    observed: &CharacterId,
    repetitions: u32,
    opts: &RunOptions,
    seed: u64,
) -> Result<AlignmentResult, AlignmentError> {
    let spec = story
        .character(observed)
        .ok_or_else(|| AlignmentError::UnknownObserved(observed.clone()))?;
    let observers = observers_of(story, observed);
    if observers.is_empty() {
        return Err(AlignmentError::NoObservers);
    }
    if opts.rounds < 2 {
        return Err(AlignmentError::TooFewRounds);
    }
    let mut opts = opts.clone();
    let overlay = adversarial_overlay(&spec.name, observed);
    for c in story.characters.iter().filter(|c| &c.id != observed) {
        opts.scratch_overlay.insert(c.id.clone(), overlay.clone());
    }
    let mut reps = Vec::new();
    for rep in 0..repetitions {
        let sim = Simulation::new(story.clone(), backend.clone(), opts.clone(), seed + u64::from(rep))?;
        let outcome = sim.run()?;
        reps.push(trace_from_log(&outcome.log, observed, &observers)?);
    }
    Ok(summarize(observed, &observers, reps))
}
