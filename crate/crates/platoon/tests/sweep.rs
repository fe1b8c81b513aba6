use std::path::Path;

use platoon_core::episode::Policy;
use platoon_core::qmix::{AgentNet, CheckpointTag, QmixNet};
use platoon_sim::checkpoint::Checkpoint;
use platoon_sim::compare::compare_policies;
use platoon_sim::config::Config;
use platoon_sim::experiment::{run_experiment, AggregateRow, ExperimentSpec, ResultsTable};
use rand::SeedableRng;

fn small() -> Config {
    let mut c = Config::desk();
    c.scenario.road.segment_length = 400.0;
    c
}

fn sweep(policy: Policy, seeds: u64, out: Option<&Path>) -> ResultsTable {
    let mut spec = ExperimentSpec::new(policy, vec![0.25, 0.5], (0..seeds).collect(), small());
    spec.out = out.map(Path::to_path_buf);
    run_experiment(&spec).unwrap()
}

#[test]
fn desk_config_file_matches_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut expected = Config::desk();
    expected.train.episodes = 2000;
    expected.train.seed = 7;
    assert_eq!(Config::load(&path).unwrap(), expected);
}

#[test]
fn sweep_files_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    sweep(Policy::GreedyRlc, 3, Some(a.path()));
    sweep(Policy::GreedyRlc, 3, Some(b.path()));
    for f in ["episodes.csv", "aggregate.csv", "results.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn aggregates_recompute_from_episode_csv() {
    let dir = tempfile::tempdir().unwrap();
    let table = sweep(Policy::Mobil, 4, Some(dir.path()));
    let rows = ResultsTable::read_episodes_csv(&dir.path().join("episodes.csv")).unwrap();
    assert_eq!(rows, table.episodes);
    for agg in &table.aggregates {
        let group: Vec<_> = rows.iter().filter(|r| r.mpr == agg.mpr).cloned().collect();
        assert_eq!(&AggregateRow::from_rows(&group).unwrap(), agg);
    }
    assert_eq!(ResultsTable::read_json(&dir.path().join("results.json")).unwrap(), table);
}

#[test]
fn compare_rejects_mismatched_grids() {
    let m = sweep(Policy::Mobil, 3, None);
    let g = sweep(Policy::Greedy, 2, None);
    assert!(compare_policies(&[m.clone(), g], 200, 0).is_err());
    let mut spec = ExperimentSpec::new(Policy::Greedy, vec![0.5], (0..3).collect(), small());
    spec.episode_length = Some(30.0);
    let g = run_experiment(&spec).unwrap();
    assert!(compare_policies(&[m.clone(), g], 200, 0).is_err());
    let g = sweep(Policy::Greedy, 3, None);
    let c = compare_policies(&[m, g], 200, 0).unwrap();
    assert_eq!(c.mprs.len(), 2);
    assert_eq!(c.seeds, 3);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small().episode_config();
    let net = QmixNet::new(AgentNet::cnn(&cfg.grid, 8).unwrap(), cfg.state_dim());
    let params = net.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
    let c = Checkpoint::new(net, cfg.grid, cfg.state, CheckpointTag::Initial, 0, params);
    let path = dir.path().join("m.ckpt");
    c.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), c);
}

#[test]
fn learned_policy_must_match_checkpoint_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small().episode_config();
    let net = QmixNet::new(AgentNet::flat(4, 8).unwrap(), cfg.state_dim());
    let params = net.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
    let path = dir.path().join("flat.ckpt");
    Checkpoint::new(net, cfg.grid, cfg.state, CheckpointTag::Initial, 0, params).save(&path).unwrap();
    let mut spec = ExperimentSpec::new(Policy::CnnQmix, vec![0.5], vec![0], small());
    spec.checkpoint = Some(path.clone());
    assert!(run_experiment(&spec).is_err());
    spec.policy = Policy::FlatQmix;
    assert!(run_experiment(&spec).is_ok());
}
