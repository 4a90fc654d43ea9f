//! Randomized checks of the visibility rules against a direct oracle.

use groupchat_core::model::{
    action_visible_to, redact_for, ActionKind, ActionRecord, CharacterId, Payload, SimTime, StageId, Visibility,
    VisibilityKind, VisibilityScope,
};
use proptest::prelude::*;

const IDS: [&str; 5] = ["a", "b", "c", "d", "e"];
const SECRET: &str = "SECRET-CONTENT-7f3a";

fn stage() -> impl Strategy<Value = StageId> {
    prop::sample::select(StageId::ALL.to_vec())
}

fn record() -> impl Strategy<Value = ActionRecord> {
    (
        prop::sample::select(vec![
            VisibilityKind::ParticipantsOnly,
            VisibilityKind::MetadataPublic,
            VisibilityKind::GroupLagged,
            VisibilityKind::Public,
        ]),
        prop::sample::subsequence(IDS.to_vec(), 1..=3),
        1u32..4,
        stage(),
        1u32..5,
    )
        .prop_map(|(kind, who, round, stage, posted)| {
            let actor = CharacterId::from(who[0]);
            let visibility = match kind {
                VisibilityKind::ParticipantsOnly => VisibilityScope::participants_only(who.iter().map(|w| CharacterId::from(*w))),
                VisibilityKind::MetadataPublic => VisibilityScope::metadata_public(who.iter().map(|w| CharacterId::from(*w))),
                VisibilityKind::GroupLagged => VisibilityScope::group_lagged(actor.clone(), posted),
                VisibilityKind::Public => VisibilityScope::public(),
            };
            let stage = if kind == VisibilityKind::GroupLagged { StageId::GroupChat } else { stage };
            ActionRecord {
                sequence_no: 1,
                round,
                stage,
                actor,
                actor_kind: Default::default(),
                action_kind: ActionKind::Speak,
                payload: Payload::text(SECRET),
                visibility,
            }
        })
}

fn now() -> impl Strategy<Value = SimTime> {
    (1u32..5, stage(), 0u32..6).prop_map(|(round, stage, sub)| SimTime {
        round,
        stage,
        sub_round: if stage == StageId::GroupChat { sub } else { 0 },
    })
}

fn oracle(r: &ActionRecord, viewer: &CharacterId, now: SimTime, lag: u32) -> Visibility {
    if r.visibility.participants.contains(viewer) {
        return Visibility::Full;
    }
    match r.visibility.kind {
        VisibilityKind::ParticipantsOnly => Visibility::Hidden,
        VisibilityKind::MetadataPublic => Visibility::MetadataOnly,
        VisibilityKind::Public => Visibility::Full,
        VisibilityKind::GroupLagged => {
            let slice_now = (now.round, now.stage.index());
            let slice_rec = (r.round, r.stage.index());
            let posted = r.visibility.round_posted.unwrap();
            if slice_now > slice_rec || (slice_now == slice_rec && now.sub_round >= posted + lag) {
                Visibility::Full
            } else {
                Visibility::Hidden
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4000))]

    #[test]
    fn matches_oracle_and_never_leaks(
        r in record(),
        viewer in prop::sample::select(IDS.to_vec()),
        now in now(),
        lag in 1u32..3,
    ) {
        let viewer = CharacterId::from(viewer);
        let got = action_visible_to(&r, &viewer, now, lag);
        prop_assert_eq!(got, oracle(&r, &viewer, now, lag));

        let shown = redact_for(&r, &viewer, now, lag);
        let outsider = !r.visibility.participants.contains(&viewer);
        match r.visibility.kind {
            VisibilityKind::ParticipantsOnly if outsider => prop_assert!(shown.is_none()),
            VisibilityKind::MetadataPublic if outsider => {
                let view = shown.expect("metadata is visible");
                prop_assert!(!view.payload.text.contains(SECRET));
                prop_assert_eq!(view.visibility.participants, r.visibility.participants.clone());
                prop_assert_eq!(view.actor, r.actor.clone());
            }
            _ => {}
        }
        if let Some(view) = redact_for(&r, &viewer, now, lag) {
            if view.payload.text.contains(SECRET) {
                prop_assert_eq!(got, Visibility::Full);
            }
        }
    }
}

#[test]
fn lag_of_one_hides_the_current_sub_round_only() {
    let r = ActionRecord {
        sequence_no: 1,
        round: 2,
        stage: StageId::GroupChat,
        actor: "a".into(),
        actor_kind: Default::default(),
        action_kind: ActionKind::Speak,
        payload: Payload::text("hi"),
        visibility: VisibilityScope::group_lagged("a".into(), 2),
    };
    let b = CharacterId::from("b");
    assert_eq!(action_visible_to(&r, &b, SimTime::group(2, 2), 1), Visibility::Hidden);
    assert_eq!(action_visible_to(&r, &b, SimTime::group(2, 3), 1), Visibility::Full);
    assert_eq!(action_visible_to(&r, &b, SimTime::group(2, 3), 2), Visibility::Hidden);
    assert_eq!(action_visible_to(&r, &b, SimTime::new(3, StageId::Update), 2), Visibility::Full);
    assert_eq!(action_visible_to(&r, &CharacterId::from("a"), SimTime::group(2, 2), 1), Visibility::Full);
}
