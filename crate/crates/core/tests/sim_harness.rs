use std::collections::BTreeMap;

use datapop::kb::{CellRef, SlotType};
use datapop::protocol::ServerMessage;
use datapop::scoring::{normalize_lenient, INITIAL_ACCURACY};
use datapop::sim::{
    generate_people_fixture, roster, run_simulation, run_simulation_detailed, simulate_answer, FixtureSpec, SimAction,
    SimConfig, SimError, SimPlayer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reliability_is_the_correct_share() {
    let player = SimPlayer::new("p", 0.8);
    let decoys: Vec<String> = ["CMU", "MIT", "Stanford"].iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let correct = (0..10_000)
        .filter(|_| simulate_answer(&player, "MIT", &decoys, SlotType::Organization, &mut rng) == SimAction::Answer("MIT".into()))
        .count();
    let share = correct as f64 / 10_000.0;
    assert!((share - 0.8).abs() <= 0.01, "{share}");
}

#[test]
fn two_perfect_players_fill_a_single_gap() {
    let spec = FixtureSpec {
        rows: 1,
        gap_fraction: 0.25,
        low_confidence_share: 0.0,
        categories: vec!["faculty".into()],
    };
    let fixture = generate_people_fixture(&spec, 4);
    let gaps = fixture.kb.find_gaps("faculty", 0.7).unwrap();
    assert_eq!(gaps.len(), 1);
    let gap = gaps[0].clone();
    let truth = fixture.truth_map()[&gap].clone();

    let players = vec![SimPlayer::new("a", 1.0), SimPlayer::new("b", 1.0)];
    let mut cfg = SimConfig::new(fixture, players, 1, 3);
    cfg.session.commit.threshold = 0.7;
    cfg.session.commit.min_distinct_users = 2;
    let (report, server, _) = run_simulation_detailed(&cfg, false).unwrap();
    let cell = server.hub().kb().cell(&gap).unwrap();
    let slot = server.hub().kb().column(&gap.column).unwrap().slot_type;
    assert_eq!(cell.value.as_deref(), Some(normalize_lenient(&truth, slot).as_str()));
    assert_eq!(report.cells_committed, 1);
    assert_eq!(report.committed_correct_fraction, Some(1.0));
    assert_eq!(report.protocol_errors, 0);
}

fn small_config(seed: u64) -> SimConfig {
    let fixture = generate_people_fixture(&FixtureSpec { rows: 12, ..FixtureSpec::default() }, seed);
    SimConfig::new(fixture, roster(6, 0.7, 0.2), 6, seed)
}

#[test]
fn same_seed_same_digest() {
    let a = run_simulation(&small_config(1)).unwrap();
    let b = run_simulation(&small_config(1)).unwrap();
    assert_eq!(a, b);
    let c = run_simulation(&small_config(2)).unwrap();
    assert_ne!(a.transcript_digest, c.transcript_digest);
}

#[test]
fn unknown_category_is_a_config_error() {
    let mut cfg = small_config(1);
    cfg.categories = vec!["astronomy".into()];
    assert!(matches!(run_simulation(&cfg), Err(SimError::Config(_))));
}

#[test]
fn trajectories_replay_from_probe_verdicts() {
    let cfg = small_config(5);
    let (report, server, _) = run_simulation_detailed(&cfg, false).unwrap();
    let mut replay: BTreeMap<String, f64> = BTreeMap::new();
    for v in server.hub().probe_log() {
        let score = replay.entry(v.user_id.clone()).or_insert(INITIAL_ACCURACY);
        if v.correct {
            *score += v.difficulty;
        }
        assert_eq!(*score, v.score_after);
    }
    assert!(!replay.is_empty());
    for (user, trajectory) in &report.accuracy_trajectories {
        let expected = replay.get(user).copied().unwrap_or(INITIAL_ACCURACY);
        assert_eq!(trajectory.last().copied(), Some(expected), "{user}");
        assert_eq!(server.hub().profiles().get(user).unwrap().accuracy.score, expected);
    }
}

#[test]
fn every_player_in_a_round_sees_the_same_bytes() {
    let cfg = small_config(7);
    let (_, _, deliveries) = run_simulation_detailed(&cfg, true).unwrap();
    let mut questions: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for d in &deliveries {
        if let ServerMessage::RoundStart { session_id, question_id, question_text, .. } = &d.frame.body {
            questions.entry((session_id.clone(), question_id.clone())).or_default().push(question_text.clone());
        }
    }
    assert!(!questions.is_empty());
    for (key, texts) in questions {
        assert!(texts.len() >= 2, "{key:?}");
        assert!(texts.windows(2).all(|w| w[0] == w[1]), "{key:?}");
    }
}

#[test]
fn committed_cells_were_gaps() {
    let cfg = small_config(3);
    let gaps: Vec<CellRef> = cfg
        .fixture
        .kb
        .categories
        .iter()
        .flat_map(|c| cfg.fixture.kb.find_gaps(c, 0.7).unwrap())
        .collect();
    let report = run_simulation(&cfg).unwrap();
    assert!(report.cells_committed <= gaps.len());
    assert!(report.cells_committed_correct <= report.cells_committed);
}
