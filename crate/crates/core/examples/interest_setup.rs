//! Mapping free-text interests onto knowledge-base categories with a small
//! word embedding table.

use std::collections::BTreeMap;

use datapop::profiles::{classify_interests, EmbeddingTable};

fn main() {
    let words: BTreeMap<String, Vec<f64>> = [
        ("robots", vec![0.9, 0.1, 0.0]),
        ("learning", vec![0.8, 0.3, 0.1]),
        ("queries", vec![0.1, 0.9, 0.2]),
        ("indexes", vec![0.0, 0.8, 0.1]),
        ("compilers", vec![0.1, 0.2, 0.9]),
    ]
    .into_iter()
    .map(|(w, v)| (w.to_string(), v))
    .collect();
    let centroids: BTreeMap<String, Vec<f64>> = [
        ("ai-faculty", vec![1.0, 0.0, 0.0]),
        ("db-faculty", vec![0.0, 1.0, 0.0]),
        ("pl-faculty", vec![0.0, 0.0, 1.0]),
    ]
    .into_iter()
    .map(|(c, v)| (c.to_string(), v))
    .collect();
    let table = EmbeddingTable::new(words, centroids).unwrap();

    for phrases in [vec!["robots and learning"], vec!["fast queries", "b-tree indexes"], vec!["compilers"]] {
        let phrases: Vec<String> = phrases.into_iter().map(String::from).collect();
        let picked = classify_interests(&phrases, &table, 2).unwrap();
        println!("{phrases:?} -> {picked:?}");
    }
    println!("{:?}", classify_interests(&["gardening".to_string()], &table, 2).unwrap_err());
}
