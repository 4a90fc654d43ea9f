//! Turn order: influence descending, ties shuffled by a seeded draw.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{CharacterId, ScheduleEntry, StageId, WorldState};

/// RNG for one (round, stage) slice of a run. Streams keep slices independent.
pub fn stage_rng(seed: u64, round: u32, stage: StageId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(round) << 8) | stage.index());
    rng
}

fn by_influence(world: &WorldState, ids: &[CharacterId]) -> Vec<(u32, CharacterId)> {
    let mut scored: Vec<(u32, CharacterId)> = ids
        .iter()
        .map(|id| (world.compute_influence(id).unwrap_or(0), id.clone()))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored
}

/// Orders `ids` by influence, shuffling each group of equal influence.
/// Returns the order and the tie groups that were shuffled.
pub fn influence_order(
    world: &WorldState,
    ids: &[CharacterId],
    seed: u64,
    round: u32,
    stage: StageId,
) -> (Vec<CharacterId>, Vec<Vec<CharacterId>>) {
    let scored = by_influence(world, ids);
    let mut rng = stage_rng(seed, round, stage);
    let mut order = Vec::with_capacity(scored.len());
    let mut ties = Vec::new();
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let mut group: Vec<CharacterId> = scored[i..j].iter().map(|(_, id)| id.clone()).collect();
        if group.len() > 1 {
            ties.push(group.clone());
            group.shuffle(&mut rng);
        }
        order.extend(group);
        i = j;
    }
    (order, ties)
}

/// PCs in shuffled influence order for the given stage.
pub fn pc_schedule(world: &WorldState, seed: u64, round: u32, stage: StageId) -> ScheduleEntry {
    let pcs: Vec<CharacterId> = world.principals().cloned().collect();
    let (order, tie_groups) = influence_order(world, &pcs, seed, round, stage);
    ScheduleEntry { round, stage, order, tie_groups }
}

/// PCs first (shuffled influence order), then NPCs by influence then id.
pub fn full_schedule(world: &WorldState, seed: u64, round: u32, stage: StageId) -> ScheduleEntry {
    let mut entry = pc_schedule(world, seed, round, stage);
    let npcs: Vec<CharacterId> = world.ids().filter(|id| !world.is_principal(id)).cloned().collect();
    entry.order.extend(by_influence(world, &npcs).into_iter().map(|(_, id)| id));
    entry
}
