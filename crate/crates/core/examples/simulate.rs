//! The simulation harness: plays games between scripted players through the
//! real protocol on a virtual clock and writes a JSON report.
//!
//! cargo run --release --example simulate -- --fixture fixtures/people.json \
//!     --players fixtures/players.json --games 200 --seed 7 --out report.json

use std::path::PathBuf;

use clap::Parser;
use datapop::sim::{load_players, run_simulation, SimConfig, SimFixture};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    fixture: PathBuf,
    #[arg(long)]
    players: PathBuf,
    #[arg(long, default_value_t = 10)]
    games: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let fixture = SimFixture::load_path(&args.fixture)?;
    let players = load_players(&args.players)?;
    let report = run_simulation(&SimConfig::new(fixture, players, args.games, args.seed))?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{} games, {} rounds, {} cells committed, correct fraction {}",
        report.games_played,
        report.rounds_played,
        report.cells_committed,
        report.committed_correct_fraction.map_or("n/a".into(), |f| format!("{f:.3}"))
    );
    println!("digest {}", report.transcript_digest);
    Ok(())
}
