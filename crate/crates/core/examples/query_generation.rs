//! Questions drawn from the gaps of a synthetic faculty knowledge base, with
//! a share of probes whose answer is already known.

use datapop::query_gen::{generate_query, QueryConfig};
use datapop::sim::{generate_people_fixture, FixtureSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let fixture = generate_people_fixture(&FixtureSpec { rows: 12, ..FixtureSpec::default() }, 7);
    let kb = &fixture.kb;
    let config = QueryConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for category in &kb.categories {
        let gaps = kb.find_gaps(category, config.gap_threshold).unwrap();
        println!("{category}: {} gaps", gaps.len());
        for i in 0..5 {
            let q = generate_query(kb, category, &config, &mut rng, format!("q{i}")).unwrap();
            let kind = if q.is_probe { "probe" } else { "gap" };
            println!("  [{kind:5}] {:<60} -> {}", q.question_text, q.target);
        }
    }
}
