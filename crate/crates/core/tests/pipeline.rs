use ecohabit_core::domain::{ActionCatalog, RuleState};
use ecohabit_core::matcher::{replay, MatcherConfig};
use ecohabit_core::miner::{Algorithm, MiningConfig};
use ecohabit_core::pipeline::{derive_into, group_by_home, learn_rules, read_patterns, write_patterns};
use ecohabit_core::rules::{DeriveOptions, RuleDb};
use ecohabit_core::simulator::{evaluate, generate, SimConfig, DEFAULT_WINDOW};

#[test]
fn planted_routines_come_back_as_rules() {
    let sim = generate(&SimConfig {
        homes: 4,
        ..Default::default()
    })
    .unwrap();
    let homes = group_by_home(sim.train.iter().cloned());
    let mut db = RuleDb::default();
    let cfg = MiningConfig::default();
    learn_rules(&homes, &cfg, Algorithm::Growth, &ActionCatalog::default(), &DeriveOptions::default(), &mut db).unwrap();
    for home in &sim.homes {
        let id = &home.topology.home_id;
        for routine in &home.routines {
            let found = db.rules().find(|r| {
                &r.home_id == id && r.action == routine.action && r.condition == routine.condition
            });
            let rule = found.unwrap_or_else(|| panic!("{id}: routine {} not learned", routine.name));
            // the training period never forgets
            assert_eq!(rule.confidence, 1.0, "{}", routine.name);
            assert_eq!(rule.state, RuleState::Active);
        }
    }
    let m = evaluate(
        &replay(&sim.test, &db, MatcherConfig::default(), &sim.topologies()).unwrap(),
        &sim.truth,
        DEFAULT_WINDOW,
    );
    assert!(m.forgotten > 0);
    assert_eq!(m.detected, m.forgotten);
}

#[test]
fn staged_pipeline_equals_one_shot() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = generate(&SimConfig {
        homes: 2,
        days: 6,
        train_days: 10,
        noise_rate: 0.5,
        ..Default::default()
    })
    .unwrap();
    let homes = group_by_home(sim.train.iter().cloned());
    let cfg = MiningConfig::default();
    let catalog = ActionCatalog::default();
    let opts = DeriveOptions::default();

    let mut one_shot = RuleDb::default();
    let patterns = learn_rules(&homes, &cfg, Algorithm::Growth, &catalog, &opts, &mut one_shot).unwrap();

    let path = tmp.path().join("patterns.jsonl");
    write_patterns(&path, &cfg, &patterns).unwrap();
    let (cfg_back, patterns_back) = read_patterns(&path).unwrap();
    assert_eq!(cfg_back, cfg);
    assert_eq!(patterns_back, patterns);
    let mut staged = RuleDb::default();
    derive_into(&mut staged, &homes, &patterns_back, &cfg_back, &opts).unwrap();
    assert_eq!(staged, one_shot);

    let rules = tmp.path().join("rules.jsonl");
    staged.save(&rules).unwrap();
    assert_eq!(RuleDb::load(&rules).unwrap(), one_shot);
    assert!(!one_shot.is_empty());
}
