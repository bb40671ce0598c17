//! Writes a synthetic people fixture and a player roster for the simulator.
//!
//! cargo run --example make_fixture -- --out-dir fixtures --rows 50 --players 20 --reliability 0.8

use std::path::PathBuf;

use clap::Parser;
use datapop::sim::{generate_people_fixture, roster, save_players, FixtureSpec};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    rows: usize,
    #[arg(long, default_value_t = 0.4)]
    gap_fraction: f64,
    #[arg(long, default_value_t = 20)]
    players: usize,
    #[arg(long, default_value_t = 0.8)]
    reliability: f64,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let spec = FixtureSpec { rows: args.rows, gap_fraction: args.gap_fraction, ..FixtureSpec::default() };
    let fixture = generate_people_fixture(&spec, args.seed);
    std::fs::create_dir_all(&args.out_dir)?;
    let fixture_path = args.out_dir.join("people.json");
    let players_path = args.out_dir.join("players.json");
    fixture.save_path(&fixture_path)?;
    save_players(&roster(args.players, args.reliability, args.spread), &players_path)?;
    fixture.kb.save_path(args.out_dir.join("people_kb.json"))?;
    println!("wrote {} and {}", fixture_path.display(), players_path.display());
    Ok(())
}
