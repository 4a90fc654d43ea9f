//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use groupchat_core::backend::{IndexBy, ReplayBackend, ReplayMode, ScriptRule};
use groupchat_core::engine::settle::TieBreakMethod;
use groupchat_core::engine::{RunOptions, RunOutcome, Simulation};
use groupchat_core::eval::ablation::{default_columns, run_ablation_grid, AblationGrid};
use groupchat_core::eval::alignment::run_alignment_benchmark;
use groupchat_core::eval::entropy::{bigram_entropy, WordTokenizer};
use groupchat_core::eval::probes::{run_probes, COMPLIANCE_TASKS, ECHO_TASKS};
use groupchat_core::model::{
    action_visible_to, redact_for, ActionKind, ActionRecord, CharacterId, Payload, RecordStatus, SimTime, StageId,
    Visibility, VisibilityKind, VisibilityScope,
};
use groupchat_core::stories::load_preset;
use groupchat_core::ChatBackend;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // negated so a NaN comparison fails the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn opts(rounds: u32) -> RunOptions {
    RunOptions { rounds, ..RunOptions::default() }
}

fn sim(story: &str, backend: Arc<dyn ChatBackend>, o: RunOptions, seed: u64) -> Result<RunOutcome, String> {
    Simulation::new(load_preset(story).map_err(|e| e.to_string())?, backend, o, seed)
        .and_then(Simulation::run)
        .map_err(|e| e.to_string())
}

fn determinism_and_replay() -> Check {
    let start = Instant::now();
    let a = sim("inheritance", common::scripted("demo"), opts(3), 42)?.log.to_jsonl();
    let b = sim("inheritance", common::scripted("demo"), opts(3), 42)?.log.to_jsonl();
    ensure!(a == b, "two runs with seed 42 differ");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rec = ReplayBackend::open(dir.path(), ReplayMode::Record(common::scripted("demo"))).map_err(|e| e.to_string())?;
    let recorded = sim("inheritance", Arc::new(rec), opts(3), 42)?.log.to_jsonl();
    ensure!(recorded == a, "recording changed the log");
    let replay = Arc::new(ReplayBackend::open(dir.path(), ReplayMode::Strict).map_err(|e| e.to_string())?);
    let replayed = sim("inheritance", replay.clone(), opts(3), 42)?.log.to_jsonl();
    let stats = replay.stats();
    ensure!(replayed == a, "replayed log differs");
    ensure!(stats.inner_calls == 0 && stats.misses == 0, "replay reached a backend: {stats:?}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{} bytes identical, {} cache hits, 0 backend calls, {elapsed:.2?}", a.len(), stats.hits))
}

fn entropy_oracle() -> Check {
    let h = |c: &[&str]| bigram_entropy(c, &WordTokenizer).entropy_bits;
    ensure!(h(&["a a a"]) == 0.0, "[a a a] gave {}", h(&["a a a"]));
    ensure!(h(&["a b a c"]) == 3f64.log2(), "[a b a c] gave {}", h(&["a b a c"]));

    let vocab = ["we", "they", "vote", "deal", "trust", "board", "now", "no", "yes", "shares"];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    for _ in 0..50 {
        let corpus: Vec<String> = (0..rng.random_range(1..10))
            .map(|_| (0..rng.random_range(0..16)).map(|_| *vocab.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "))
            .collect();
        let diff = (bigram_entropy(&corpus, &WordTokenizer).entropy_bits - common::brute_force_entropy(&corpus)).abs();
        worst = worst.max(diff);
    }
    ensure!(worst < 1e-9, "max error {worst:e}");

    let grid = AblationGrid {
        backends: vec![groupchat_core::backend::BackendDescriptor::Scripted { script: common::script_path("demo") }],
        columns: default_columns(),
        seeds: vec![42],
        options: opts(2),
    };
    let cells = run_ablation_grid(&load_preset("inheritance").unwrap(), &grid, &WordTokenizer);
    let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
    ensure!(
        labels == ["baseline", "w/o Planning", "w/o Memory", "w/o Private", "w/o Confidential", "w/o Group"],
        "columns {labels:?}"
    );
    let digests: BTreeSet<&String> = cells.iter().flat_map(|c| &c.context_digests).collect();
    ensure!(digests.len() == cells.len(), "some ablation left the contexts unchanged");
    Ok(format!("50 corpora, max error {worst:.1e} bits; 6 table columns, 6 distinct context hashes"))
}

fn visibility_oracle(r: &ActionRecord, viewer: &CharacterId, now: SimTime, lag: u32) -> Visibility {
    if r.visibility.participants.contains(viewer) {
        return Visibility::Full;
    }
    match r.visibility.kind {
        VisibilityKind::ParticipantsOnly => Visibility::Hidden,
        VisibilityKind::MetadataPublic => Visibility::MetadataOnly,
        VisibilityKind::Public => Visibility::Full,
        VisibilityKind::GroupLagged => {
            let later = (now.round, now.stage.index()) > (r.round, r.stage.index());
            let same = (now.round, now.stage) == (r.round, r.stage);
            if later || (same && now.sub_round >= r.visibility.round_posted.unwrap() + lag) {
                Visibility::Full
            } else {
                Visibility::Hidden
            }
        }
    }
}

fn visibility_suite() -> Check {
    const SECRET: &str = "private-content-91c";
    let ids: Vec<CharacterId> = ["a", "b", "c", "d", "e"].map(CharacterId::from).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let triples = 5000;
    for i in 0..triples {
        let n = rng.random_range(1..=3);
        let who: Vec<CharacterId> = ids.choose_multiple(&mut rng, n).cloned().collect();
        let kind = rng.random_range(0..4);
        let posted = rng.random_range(1..5);
        let (visibility, stage) = match kind {
            0 => (VisibilityScope::participants_only(who.clone()), *StageId::ALL.choose(&mut rng).unwrap()),
            1 => (VisibilityScope::metadata_public(who.clone()), StageId::ConfidentialMeeting),
            2 => (VisibilityScope::group_lagged(who[0].clone(), posted), StageId::GroupChat),
            _ => (VisibilityScope::public(), *StageId::ALL.choose(&mut rng).unwrap()),
        };
        let r = ActionRecord {
            sequence_no: 1,
            round: rng.random_range(1..4),
            stage,
            actor: who[0].clone(),
            actor_kind: Default::default(),
            action_kind: ActionKind::Speak,
            payload: Payload::text(SECRET),
            visibility,
        };
        let viewer = ids.choose(&mut rng).unwrap().clone();
        let now_stage = *StageId::ALL.choose(&mut rng).unwrap();
        let sub = if now_stage == StageId::GroupChat { rng.random_range(0..6) } else { 0 };
        let now = SimTime { round: rng.random_range(1..5), stage: now_stage, sub_round: sub };
        let lag = rng.random_range(1..3);
        let got = action_visible_to(&r, &viewer, now, lag);
        ensure!(got == visibility_oracle(&r, &viewer, now, lag), "triple {i}: {got:?} for {r:?} {viewer} {now:?}");
        let shown = redact_for(&r, &viewer, now, lag);
        let leaked = shown.as_ref().is_some_and(|v| v.payload.text.contains(SECRET));
        ensure!(!leaked || got == Visibility::Full, "triple {i}: content leaked");
        if r.visibility.kind == VisibilityKind::MetadataPublic && !r.visibility.participants.contains(&viewer) {
            let meta = shown.ok_or_else(|| format!("triple {i}: meeting hidden entirely"))?;
            ensure!(meta.visibility.participants == r.visibility.participants, "triple {i}: participants missing");
        }
    }
    let mut requests = 0;
    for story in ["inheritance", "lawcourt", "philosophy", "casting"] {
        let out = sim(story, common::scripted("demo"), opts(3), 42)?;
        ensure!(out.audit.violations.is_empty(), "{story}: {:?}", out.audit.violations);
        requests += out.audit.requests_checked;
    }
    Ok(format!("{triples} random triples match; {requests} assembled requests audited, 0 violations"))
}

fn persona_invariants() -> Check {
    let kinds = [
        ActionKind::Think,
        ActionKind::Perceive,
        ActionKind::Choose,
        ActionKind::Speak,
        ActionKind::Summarize,
        ActionKind::Reflect,
        ActionKind::Vote,
    ];
    let story = load_preset("inheritance").unwrap();
    let bounds = RunOptions::default().bounds;
    let mut s = Simulation::new(story.clone(), common::scripted("demo"), opts(5), 42).map_err(|e| e.to_string())?;
    let capture = |s: &Simulation| {
        let mut m = BTreeMap::new();
        for c in &story.characters {
            let p = s.persona(&c.id).unwrap();
            for k in kinds {
                m.insert((c.id.clone(), k), p.slot(k).map(|x| x.items().to_vec()).unwrap_or_default());
            }
        }
        m
    };
    let mut before = capture(&s);
    while s.step().map_err(|e| e.to_string())? {
        let after = capture(&s);
        for (key, old) in &before {
            ensure!(after[key].starts_with(old), "{key:?} memory was rewritten");
        }
        before = after;
    }
    let out = s.finish();
    let mut pairs = 0;
    for c in &story.characters {
        let snaps: Vec<_> = out.log.snapshots_for(&c.id).collect();
        ensure!(snaps.len() == 5, "{} has {} snapshots", c.id, snaps.len());
        for w in snaps.windows(2) {
            pairs += 1;
            ensure!(w[0].scratch_hash == w[1].scratch_hash, "{} scratch changed", c.id);
            for (x, y) in w[0].beliefs.iter().zip(&w[1].beliefs) {
                ensure!((y - x).abs() <= bounds.belief.max_delta, "{} belief {x}->{y}", c.id);
            }
            for (o, y) in &w[1].relationships {
                let x = w[0].relationships[o];
                ensure!((y - x).abs() <= bounds.relationship.max_delta, "{}->{o} {x}->{y}", c.id);
            }
        }
        let p = &out.personas[&c.id];
        for k in kinds {
            for stage in StageId::ALL {
                let ctx = p.context_for(k, stage, &[], &BTreeSet::new(), true);
                let src = p.flow().upstream(k, stage);
                ensure!(ctx.memory_source == src, "{k:?} read {:?}", ctx.memory_source);
                ensure!((k == ActionKind::Think) == src.is_none(), "{k:?} upstream {src:?}");
                let want = src.and_then(|u| p.slot(u)).map(|x| x.items().to_vec()).unwrap_or_default();
                ensure!(ctx.memory == want, "{k:?} in {stage:?} read outside its upstream slot");
            }
        }
    }
    Ok(format!("{pairs} consecutive snapshot pairs in bounds; append-only over 5 rounds; flow checked for 7 kinds"))
}

fn alignment() -> Check {
    let start = Instant::now();
    let story = load_preset("inheritance").unwrap();
    let h = run_alignment_benchmark(&story, common::scripted("hostile"), &"kendall".into(), 5, &opts(3), 42)
        .map_err(|e| e.to_string())?;
    ensure!(h.samples == 20, "hostile denominator {}", h.samples);
    ensure!(h.t1_rate == 1.0 && h.t1_pass_per_round.iter().all(|p| *p), "hostile T1 {}", h.t1_rate);
    ensure!(h.t2_negative_fraction == 1.0, "hostile T2 {}", h.t2_negative_fraction);
    let s = run_alignment_benchmark(&story, common::scripted("stubborn"), &"kendall".into(), 5, &opts(3), 42)
        .map_err(|e| e.to_string())?;
    ensure!(s.t1_rate == 0.0, "stubborn T1 {}", s.t1_rate);
    ensure!(s.t2_negative_fraction == 0.0, "stubborn T2 {}", s.t2_negative_fraction);
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("hostile T1 100% T2 1.0 (n={}); stubborn T1 0% T2 0.0; {elapsed:.2?}", h.samples))
}

fn probes() -> Check {
    let alternating = |k: ActionKind, good: &str| {
        ScriptRule::new().action(k).replies([good, "unsure", good, "let me think", good], IndexBy::Round)
    };
    let rules = vec![
        alternating(ActionKind::Reflect, "INSIGHT: noted\nREL: {each} | 1 | fine"),
        alternating(ActionKind::Choose, "TARGET: {candidate}\nSTRATEGY: talk"),
        alternating(ActionKind::Vote, "VOTE: {candidate}\nREASON: best"),
    ];
    let r = run_probes(common::layered("demo", rules).as_ref(), 5, 42);
    for t in COMPLIANCE_TASKS {
        ensure!(r.compliance[t].rate == 0.6, "{t} compliance {}", r.compliance[t].rate);
    }
    let e = run_probes(&common::Counter, 20, 42);
    for t in ECHO_TASKS {
        ensure!(e.echo[t].rate == 1.0, "{t} echo {}", e.echo[t].rate);
    }

    let never = ScriptRule::new().action(ActionKind::Choose).reply("no idea");
    let counting = common::Counting::new(common::layered("demo", vec![never]));
    let out = sim("inheritance", counting.clone(), opts(2), 42)?;
    let max_attempt = counting.tags().iter().map(|t| t.attempt).max().unwrap_or(0);
    ensure!(max_attempt <= 5, "attempt {max_attempt}");
    let skipped = out.log.records().iter().filter(|r| r.action_kind == ActionKind::Choose).collect::<Vec<_>>();
    ensure!(
        skipped.iter().all(|r| r.payload.status == RecordStatus::Skipped && r.payload.fields["attempts"] == "5"),
        "exhausted choose was not skipped after 5 calls"
    );
    Ok(format!(
        "compliance 0.60 on {:?}; echo accuracy 1.0; max {max_attempt} calls per action over {} exhausted turns",
        COMPLIANCE_TASKS,
        skipped.len()
    ))
}

fn vote(actor: &str, pick: &str) -> ScriptRule {
    ScriptRule::new()
        .action(ActionKind::Vote)
        .in_stage(StageId::Settlement)
        .by(actor)
        .reply(format!("VOTE: {pick}\nREASON: fixture"))
}

fn settlement() -> Check {
    let run = |rules: Vec<ScriptRule>, script: &str| -> Result<_, String> {
        sim("inheritance", common::layered(script, rules), opts(1), 42)?
            .settlement
            .ok_or_else(|| "no settlement".to_string())
    };
    let fixture = |pairs: [(&str, &str); 5]| pairs.iter().map(|(a, p)| vote(a, p)).collect::<Vec<_>>();

    let s = run(fixture([("logan", "kendall"), ("kendall", "shiv"), ("shiv", "kendall"), ("roman", "kendall"), ("connor", "roman")]), "demo")?;
    ensure!(s.vote_winner.as_ref().map(|w| w.as_str()) == Some("kendall"), "plurality gave {:?}", s.vote_winner);

    let s = run(fixture([("logan", "kendall"), ("kendall", "logan"), ("shiv", "kendall"), ("roman", "logan"), ("connor", "connor")]), "demo")?;
    let method = s.tie_break.as_ref().map(|t| t.method);
    ensure!(method == Some(TieBreakMethod::Influence), "tie-break {method:?}");
    ensure!(s.vote_winner.as_ref().map(|w| w.as_str()) == Some("logan"), "tie gave {:?}", s.vote_winner);

    let s = run(fixture([("logan", "logan"), ("kendall", "shiv"), ("shiv", "shiv"), ("roman", "shiv"), ("connor", "kendall")]), "demo")?;
    ensure!(s.votes[&CharacterId::from("shiv")].is_none(), "self-vote counted");
    ensure!(s.tally.get(&CharacterId::from("shiv")) == Some(&2), "tally {:?}", s.tally);
    ensure!(s.vote_winner.as_ref().map(|w| w.as_str()) == Some("shiv"), "self-vote fixture gave {:?}", s.vote_winner);

    let stubborn = vec![
        ScriptRule::new().action(ActionKind::Vote).by("logan").matching("none is not allowed").reply("VOTE: connor\nREASON: if I must"),
        ScriptRule::new().action(ActionKind::Vote).by("logan").matching("concede").reply("VOTE: none\nREASON: never"),
    ];
    let s = run(stubborn, "stubborn")?;
    let held = s.predicate.as_ref().map(|p| p.held);
    ensure!(held == Some(false), "concession held {held:?}");
    ensure!(s.fallback_winner.as_ref().map(|w| w.as_str()) == Some("connor"), "fallback {:?}", s.fallback_winner);
    Ok("plurality->kendall, influence tie-break->logan, self-votes abstain->shiv, stubborn fallback->connor".into())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("determinism and replay", determinism_and_replay),
        ("entropy oracle and ablation schema", entropy_oracle),
        ("visibility", visibility_suite),
        ("persona invariants", persona_invariants),
        ("alignment benchmark", alignment),
        ("probe harness", probes),
        ("settlement", settlement),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of 7 criteria passed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
