mod common;

use std::collections::BTreeMap;

use datapop::kb::{CellRef, ColumnMeta, SlotType};
use datapop::query_gen::{generate_query, select_gap, QueryConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn columns() -> Vec<ColumnMeta> {
    ["a", "b", "c"]
        .iter()
        .map(|n| ColumnMeta { name: n.to_string(), slot_type: SlotType::Text, difficulty: 0.5, importance: 0 })
        .collect()
}

#[test]
fn equal_importance_gaps_are_drawn_uniformly() {
    let gaps = vec![CellRef::new("r1", "a"), CellRef::new("r2", "b"), CellRef::new("r3", "c")];
    let cols = columns();
    let first = select_gap(&gaps, &cols, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(first, select_gap(&gaps, &cols, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts: BTreeMap<CellRef, u32> = BTreeMap::new();
    for _ in 0..10_000 {
        *counts.entry(select_gap(&gaps, &cols, &mut rng).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 3);
    for (gap, n) in counts {
        assert!((3_100..=3_500).contains(&n), "{gap}: {n}");
    }
}

#[test]
fn probe_share_matches_ratio() {
    let f = common::fixture(20, 3);
    let category = f.kb.categories.iter().next().unwrap().clone();
    assert!(!f.kb.find_gaps(&category, 0.7).unwrap().is_empty());
    assert!(!f.kb.probe_cells(&category, 0.95).unwrap().is_empty());

    let config = QueryConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let probes = (0..1_000)
        .filter(|i| generate_query(&f.kb, &category, &config, &mut rng, format!("q{i}")).unwrap().is_probe)
        .count();
    let share = probes as f64 / 1_000.0;
    assert!((share - 0.25).abs() <= 0.03, "{share}");
}

#[test]
fn probes_carry_their_answer_and_gaps_do_not() {
    let f = common::fixture(20, 8);
    let truth = f.truth_map();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for category in &f.kb.categories {
        for i in 0..200 {
            let q = generate_query(&f.kb, category, &QueryConfig::default(), &mut rng, format!("q{i}")).unwrap();
            let slot = f.kb.column(&q.target.column).unwrap().slot_type;
            match q.expected_answer {
                Some(a) => {
                    assert!(q.is_probe);
                    assert_eq!(a, datapop::scoring::normalize_lenient(&truth[&q.target], slot));
                    assert!(!q.question_text.to_lowercase().contains(&a), "{}", q.question_text);
                }
                None => assert!(!q.is_probe),
            }
        }
    }
}
