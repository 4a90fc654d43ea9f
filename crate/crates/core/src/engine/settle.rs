//! Vote tally and the winner rules.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{CharacterId, VictoryKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreakMethod {
    /// Highest camp influence among the tied candidates.
    Influence,
    /// Influence also tied; a seeded draw decided.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieBreak {
    pub tied: Vec<CharacterId>,
    pub method: TieBreakMethod,
}

/// Outcome of the story's victory predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateOutcome {
    pub kind: VictoryKind,
    pub decider: CharacterId,
    /// Whether the predicate holds: the defense conceded, or the defendant
    /// was acquitted.
    pub held: bool,
    /// Who the decider named, if anyone.
    pub pick: Option<CharacterId>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementResult {
    /// Each voter's choice; `None` is an abstention.
    pub votes: BTreeMap<CharacterId, Option<CharacterId>>,
    pub tally: BTreeMap<CharacterId, u32>,
    pub vote_winner: Option<CharacterId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_break: Option<TieBreak>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<PredicateOutcome>,
    /// Forced choice by the decider when the predicate did not hold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_winner: Option<CharacterId>,
    pub no_winner: bool,
}

/// Plurality over the votes cast. Ties go to the higher camp influence,
/// then to a draw from `rng`. Returns tally, winner and how a tie was broken.
pub fn tally_votes<R: Rng>(
    votes: &BTreeMap<CharacterId, Option<CharacterId>>,
    influence: impl Fn(&CharacterId) -> u32,
    rng: &mut R,
) -> (BTreeMap<CharacterId, u32>, Option<CharacterId>, Option<TieBreak>) {
    let mut tally: BTreeMap<CharacterId, u32> = BTreeMap::new();
    for target in votes.values().flatten() {
        *tally.entry(target.clone()).or_default() += 1;
    }
    let Some(top) = tally.values().copied().max() else {
        return (tally, None, None);
    };
    let leaders: Vec<CharacterId> = tally
        .iter()
        .filter(|(_, n)| **n == top)
        .map(|(id, _)| id.clone())
        .collect();
    if let [only] = leaders.as_slice() {
        return (tally.clone(), Some(only.clone()), None);
    }
    let best = leaders.iter().map(&influence).max().unwrap_or(0);
    let strongest: Vec<CharacterId> = leaders.iter().filter(|id| influence(id) == best).cloned().collect();
    let (winner, method) = match strongest.as_slice() {
        [only] => (only.clone(), TieBreakMethod::Influence),
        many => (many.choose(rng).expect("non-empty").clone(), TieBreakMethod::Random),
    };
    (tally, Some(winner), Some(TieBreak { tied: leaders, method }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn votes(v: &[(&str, Option<&str>)]) -> BTreeMap<CharacterId, Option<CharacterId>> {
        v.iter().map(|(a, b)| ((*a).into(), b.map(CharacterId::from))).collect()
    }

    #[test]
    fn plurality() {
        let v = votes(&[("a", Some("kendall")), ("b", Some("kendall")), ("c", Some("kendall")), ("d", Some("shiv"))]);
        let (tally, winner, tie) = tally_votes(&v, |_| 0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(winner, Some("kendall".into()));
        assert_eq!(tally[&CharacterId::from("kendall")], 3);
        assert!(tie.is_none());
    }

    #[test]
    fn influence_breaks_ties() {
        let v = votes(&[("a", Some("kendall")), ("b", Some("kendall")), ("c", Some("shiv")), ("d", Some("shiv"))]);
        let inf = |id: &CharacterId| if id.as_str() == "kendall" { 8 } else { 5 };
        let (_, winner, tie) = tally_votes(&v, inf, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(winner, Some("kendall".into()));
        assert_eq!(tie.unwrap().method, TieBreakMethod::Influence);
    }

    #[test]
    fn seeded_draw_when_influence_ties_too() {
        let v = votes(&[("a", Some("kendall")), ("b", Some("shiv"))]);
        let first = tally_votes(&v, |_| 3, &mut ChaCha8Rng::seed_from_u64(9)).1;
        let again = tally_votes(&v, |_| 3, &mut ChaCha8Rng::seed_from_u64(9)).1;
        assert_eq!(first, again);
    }

    #[test]
    fn all_abstain_is_no_winner() {
        let v = votes(&[("a", None), ("b", None)]);
        let (tally, winner, _) = tally_votes(&v, |_| 0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(tally.is_empty());
        assert!(winner.is_none());
    }
}
