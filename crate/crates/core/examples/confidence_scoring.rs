//! Accuracy-weighted answer fusion on the textbook case: two users say
//! "associate", three say "full".

use datapop::kb::SlotType;
use datapop::scoring::{compute_confidence, resolve_round_winner, AnswerRecord};

fn main() {
    let votes = [
        ("ana", "Associate", 0.6),
        ("ben", "associate ", 0.8),
        ("cal", "full", 0.5),
        ("dee", "FULL", 0.7),
        ("eve", "full", 0.9),
    ];
    let records: Vec<AnswerRecord> = votes
        .iter()
        .enumerate()
        .map(|(t, (user, text, acc))| AnswerRecord::answered(*user, "q1", text, SlotType::Text, *acc, t as u64))
        .collect();

    let table = compute_confidence(&records).expect("non-empty");
    for e in &table.entries {
        println!("{:<10} c = {:.3}  ({} users)", e.answer, e.confidence, e.respondents);
    }
    let (answer, winners) = resolve_round_winner(&table, &records).expect("has a winner");
    println!("winner: {answer} given by {}", winners.join(", "));
}
