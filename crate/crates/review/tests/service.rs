//! Queue, log replay, export and agreement behaviour of the review store.

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, Barrier};

use convseg_core::synthetic::{write_dataset, SceneSpec};
use convseg_core::{load_manifest, DatasetManifest};
use convseg_review::{
    candidates_from_manifest, prepare_candidates, Candidate, CandidateLine, Decision, ManualClock, ReviewError,
    ReviewStore, DEFAULT_LEASE_MS,
};
use proptest::prelude::*;

fn manifest(dir: &Path, images: usize) -> DatasetManifest {
    let spec = SceneSpec {
        width: 32,
        height: 32,
        objects: 2,
        min_side: 8,
        max_side: 14,
    };
    write_dataset(&dir.join("img"), images, &spec, 7).unwrap().0
}

fn candidates(dir: &Path, images: usize, ai: impl Fn(usize) -> Decision) -> Vec<Candidate> {
    let lines: Vec<CandidateLine> = candidates_from_manifest(&manifest(dir, images))
        .into_iter()
        .enumerate()
        .map(|(i, mut l)| {
            l.ai_suggestion = ai(i);
            l
        })
        .collect();
    prepare_candidates(lines, &dir.join("review")).unwrap()
}

fn open(dir: &Path, cands: Vec<Candidate>, clock: &Arc<ManualClock>) -> ReviewStore {
    ReviewStore::open(cands, &dir.join("review/events.jsonl"), clock.clone(), DEFAULT_LEASE_MS).unwrap()
}

fn take_and_decide(store: &ReviewStore, session: &str, decision: Decision) -> String {
    let a = store.next_candidate(session).unwrap().expect("a pending candidate");
    let id = a.candidate.candidate_id.clone();
    store.record_verdict(&id, decision, session, None).unwrap();
    id
}

#[test]
fn concurrent_sessions_never_share_a_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let cands = candidates(dir.path(), 1, |_| Decision::Accept);
    assert!(cands.len() >= 2);
    let clock = Arc::new(ManualClock::new(1_000));
    for round in 0..1000 {
        let log = dir.path().join(format!("race/{round}.jsonl"));
        let store = Arc::new(ReviewStore::open(cands.clone(), &log, clock.clone(), DEFAULT_LEASE_MS).unwrap());
        let barrier = Arc::new(Barrier::new(2));
        let handles: Vec<_> = ["s1", "s2"]
            .into_iter()
            .map(|session| {
                let store = store.clone();
                let barrier = barrier.clone();
                std::thread::spawn(move || {
                    barrier.wait();
                    store.next_candidate(session).unwrap().map(|a| a.candidate.candidate_id)
                })
            })
            .collect();
        let got: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let ids: Vec<_> = got.iter().flatten().collect();
        assert_eq!(ids.len(), 2, "round {round}: {got:?}");
        assert_ne!(ids[0], ids[1], "round {round}: double assignment");
        let snap = store.snapshot();
        assert_eq!(snap.leases.len(), 2);
        std::fs::remove_file(&log).unwrap();
    }
}

#[test]
fn replaying_the_log_reconstructs_state() {
    let dir = tempfile::tempdir().unwrap();
    let cands = candidates(dir.path(), 3, |i| if i % 3 == 0 { Decision::Reject } else { Decision::Accept });
    let clock = Arc::new(ManualClock::new(5_000));
    let store = open(dir.path(), cands.clone(), &clock);
    take_and_decide(&store, "ann", Decision::Accept);
    clock.advance(10);
    take_and_decide(&store, "bob", Decision::Reject);
    store.next_candidate("ann").unwrap().unwrap();
    let before = store.snapshot();
    let stats = store.stats();
    drop(store);

    let replayed = open(dir.path(), cands.clone(), &clock);
    assert_eq!(replayed.snapshot(), before);
    assert_eq!(replayed.stats(), stats);
    assert_eq!(stats.decided, 2);
    assert_eq!(stats.assigned, 1);

    // a crash in the middle of an append leaves a torn final line
    let log = dir.path().join("review/events.jsonl");
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"event\":\"verdict\",\"candid");
    std::fs::write(&log, &text).unwrap();
    drop(replayed);
    let recovered = open(dir.path(), cands.clone(), &clock);
    assert_eq!(recovered.snapshot(), before);
    take_and_decide(&recovered, "cy", Decision::Accept);
    drop(recovered);
    assert_eq!(open(dir.path(), cands, &clock).stats().decided, 3);
}

#[test]
fn corrupt_lines_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cands = candidates(dir.path(), 1, |_| Decision::Accept);
    let log = dir.path().join("events.jsonl");
    std::fs::write(&log, "not json\n").unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let err = ReviewStore::open(cands.clone(), &log, clock.clone(), 1).err().unwrap();
    assert!(matches!(err, ReviewError::Log { line: 1, .. }), "{err}");
    std::fs::write(
        &log,
        "{\"event\":\"assigned\",\"candidate_id\":\"ghost\",\"session\":\"s\",\"assigned_at\":0,\"expires_at\":1}\n",
    )
    .unwrap();
    assert!(matches!(ReviewStore::open(cands, &log, clock, 1), Err(ReviewError::Log { .. })));
}

#[test]
fn duplicate_verdicts_are_idempotent_and_changes_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let store = open(dir.path(), candidates(dir.path(), 1, |_| Decision::Accept), &clock);
    let id = store.next_candidate("ann").unwrap().unwrap().candidate.candidate_id;
    let first = store.record_verdict(&id, Decision::Accept, "ann", Some("clean".into())).unwrap();
    clock.advance(50);
    let again = store.record_verdict(&id, Decision::Accept, "ann", None).unwrap();
    assert_eq!(first, again);
    assert_eq!(store.snapshot().events, 2);
    let err = store.record_verdict(&id, Decision::Reject, "ann", None).unwrap_err();
    assert!(matches!(err, ReviewError::Conflict { existing: Decision::Accept, .. }), "{err}");
    assert!(matches!(
        store.record_verdict("nope", Decision::Accept, "ann", None),
        Err(ReviewError::UnknownCandidate(_))
    ));
    assert!(matches!(store.next_candidate(" "), Err(ReviewError::EmptySession)));
}

#[test]
fn verdicts_require_the_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let store = open(dir.path(), candidates(dir.path(), 1, |_| Decision::Accept), &clock);
    let id = store.next_candidate("ann").unwrap().unwrap().candidate.candidate_id;
    let err = store.record_verdict(&id, Decision::Accept, "bob", None).unwrap_err();
    assert!(matches!(err, ReviewError::NotAssigned { .. }), "{err}");
    let other = &store.candidates()[1].candidate_id;
    assert!(matches!(
        store.record_verdict(other, Decision::Accept, "ann", None),
        Err(ReviewError::NotAssigned { .. })
    ));
}

#[test]
fn leases_expire_back_to_pending() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let store = open(dir.path(), candidates(dir.path(), 2, |_| Decision::Accept), &clock);
    let first = store.next_candidate("ann").unwrap().unwrap().candidate.candidate_id;
    // asking again returns the held candidate instead of a second one
    assert_eq!(store.next_candidate("ann").unwrap().unwrap().candidate.candidate_id, first);
    let second = store.next_candidate("bob").unwrap().unwrap().candidate.candidate_id;
    assert_ne!(first, second);

    clock.advance(DEFAULT_LEASE_MS - 1);
    let third = store.next_candidate("cy").unwrap().unwrap().candidate.candidate_id;
    assert!(third != first && third != second);
    clock.advance(1);
    // ann's lease is now expired and is the oldest pending candidate
    assert_eq!(store.next_candidate("dee").unwrap().unwrap().candidate.candidate_id, first);
    assert!(matches!(
        store.record_verdict(&first, Decision::Accept, "ann", None),
        Err(ReviewError::NotAssigned { .. })
    ));
    store.record_verdict(&first, Decision::Reject, "dee", None).unwrap();
}

#[test]
fn empty_queue_returns_none() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let store = ReviewStore::open(vec![], &dir.path().join("e.jsonl"), clock, DEFAULT_LEASE_MS).unwrap();
    assert!(store.next_candidate("ann").unwrap().is_none());
    assert!(store.export_accepted(None).unwrap().is_empty());
    assert!(matches!(store.agreement_report(), Err(ReviewError::NoDecisions)));
}

#[test]
fn export_holds_exactly_the_accepted_samples() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let store = open(dir.path(), candidates(dir.path(), 2, |_| Decision::Accept), &clock);
    let out = dir.path().join("out/accepted.jsonl");

    let empty = store.export_accepted(Some(&out)).unwrap();
    assert!(empty.is_empty());
    assert!(load_manifest(&out).unwrap().is_empty());

    let a1 = take_and_decide(&store, "ann", Decision::Accept);
    let r1 = take_and_decide(&store, "ann", Decision::Reject);
    let a2 = take_and_decide(&store, "ann", Decision::Accept);
    let exported = store.export_accepted(Some(&out)).unwrap();
    let ids: Vec<_> = exported.samples.iter().map(|s| s.sample_id.clone()).collect();
    let by_candidate = |id: &str| store.candidate(id).unwrap().sample.sample_id.clone();
    assert_eq!(ids, vec![by_candidate(&a1), by_candidate(&a2)]);
    assert!(!ids.contains(&by_candidate(&r1)));
    let reloaded = load_manifest(&out).unwrap();
    assert_eq!(reloaded.samples, exported.samples);
}

#[test]
fn agreement_on_seven_of_ten() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let cands = candidates(dir.path(), 5, |i| if i < 6 { Decision::Accept } else { Decision::Reject });
    assert!(cands.len() >= 10);
    let store = open(dir.path(), cands, &clock);
    // AI: A A A A A A R R R R; human: A A A A R R R R R A
    let human = [0, 0, 0, 0, 1, 1, 1, 1, 1, 0].map(|h| if h == 0 { Decision::Accept } else { Decision::Reject });
    for d in human {
        take_and_decide(&store, "ann", d);
    }
    let report = store.agreement_report().unwrap();
    assert_eq!(report.n_decided, 10);
    assert_eq!(format!("{:.3}", report.agreement_rate), "0.700");
    let c = report.confusion;
    assert_eq!(
        (c.ai_accept_human_accept, c.ai_accept_human_reject, c.ai_reject_human_accept, c.ai_reject_human_reject),
        (4, 2, 1, 3)
    );
}

#[test]
fn full_agreement_has_empty_off_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let store = open(dir.path(), candidates(dir.path(), 2, |i| if i % 2 == 0 { Decision::Accept } else { Decision::Reject }), &clock);
    for i in 0..4 {
        take_and_decide(&store, "ann", if i % 2 == 0 { Decision::Accept } else { Decision::Reject });
    }
    let r = store.agreement_report().unwrap();
    assert_eq!(r.agreement_rate, 1.0);
    assert_eq!(r.confusion.ai_accept_human_reject + r.confusion.ai_reject_human_accept, 0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn export_and_rejections_partition_the_decided_set(
        decisions in proptest::collection::vec(any::<bool>(), 0..8),
        sessions in proptest::collection::vec(0usize..3, 8),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(0));
        let store = open(dir.path(), candidates(dir.path(), 4, |_| Decision::Accept), &clock);
        for (accept, s) in decisions.iter().zip(&sessions) {
            let session = format!("s{s}");
            take_and_decide(&store, &session, if *accept { Decision::Accept } else { Decision::Reject });
        }
        let exported: HashSet<String> = store.export_accepted(None).unwrap().samples.into_iter().map(|s| s.sample_id).collect();
        let verdicts = store.verdicts();
        let rejected: HashSet<String> = verdicts
            .iter()
            .filter(|v| v.decision == Decision::Reject)
            .map(|v| store.candidate(&v.candidate_id).unwrap().sample.sample_id.clone())
            .collect();
        let decided: HashSet<String> = verdicts
            .iter()
            .map(|v| store.candidate(&v.candidate_id).unwrap().sample.sample_id.clone())
            .collect();
        prop_assert!(exported.is_disjoint(&rejected));
        prop_assert_eq!(exported.union(&rejected).cloned().collect::<HashSet<_>>(), decided);
        prop_assert_eq!(verdicts.len(), decisions.len());
        let snap = store.snapshot();
        drop(store);
        let replayed = open(dir.path(), candidates(dir.path(), 4, |_| Decision::Accept), &clock);
        prop_assert_eq!(replayed.snapshot(), snap);
    }
}
