mod common;

use datapop::kb::KnowledgeBase;
use datapop::profiles::ProfileStore;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn stores_survive_files(seed in any::<u64>()) {
        let (kb, profiles) = common::seeded_stores(seed);
        let dir = tempfile::tempdir().unwrap();
        kb.save_path(dir.path().join("kb.json")).unwrap();
        profiles.save_path(dir.path().join("profiles.json")).unwrap();
        prop_assert_eq!(KnowledgeBase::load_path(dir.path().join("kb.json")).unwrap(), kb);
        prop_assert_eq!(ProfileStore::load_path(dir.path().join("profiles.json")).unwrap(), profiles);
    }

    #[test]
    fn saving_is_idempotent(seed in any::<u64>()) {
        let (kb, _) = common::seeded_stores(seed);
        let once = kb.to_json_string();
        prop_assert_eq!(KnowledgeBase::from_json_str(&once).unwrap().to_json_string(), once);
    }
}

#[test]
fn missing_profile_file_starts_empty() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ProfileStore::load_or_default(dir.path().join("none.json")).unwrap().is_empty());
}

#[test]
fn bundled_fixtures_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let f = datapop::sim::SimFixture::load_path(root.join("people.json")).unwrap();
    assert_eq!(f.kb.rows.len(), 50);
    assert_eq!(KnowledgeBase::load_path(root.join("people_kb.json")).unwrap(), f.kb);
    assert_eq!(datapop::sim::load_players(root.join("players.json")).unwrap().len(), 20);
}
