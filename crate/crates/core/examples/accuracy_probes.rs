//! Probe answers move a player's accuracy score; points and badges are
//! tracked separately.

use datapop::profiles::{default_badge_rules, list_badges, ProfileStore, UserProfile};

fn main() {
    let mut store = ProfileStore::new();
    store.register(UserProfile::new("ana", "Ana", 0)).unwrap();

    let probes = [(true, 0.2), (false, 0.9), (true, 0.6), (true, 0.9)];
    for (correct, difficulty) in probes {
        let acc = store.record_probe("ana", correct, difficulty).unwrap();
        println!(
            "probe difficulty {difficulty:.1} {:<9} -> score {:.2} ({}/{} correct)",
            if correct { "correct" } else { "incorrect" },
            acc.score,
            acc.probes_correct,
            acc.probes_answered
        );
    }

    let rules = default_badge_rules();
    store.add_points("ana", 60.0).unwrap();
    let new = store.award_badges("ana", &rules).unwrap();
    println!("new badges: {new:?}");
    for b in list_badges(store.get("ana").unwrap(), &rules) {
        println!("  {} ({})", b.name, b.id);
    }
}
