use platoon_core::episode::{agent_observations, rule_decider, run_episode, EpisodeConfig, Policy, Simulation};
use platoon_core::qmix::{AgentInput, AgentNet, QmixNet};
use platoon_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;

fn small(mpr: f64, seed: u64) -> EpisodeConfig {
    let mut c = EpisodeConfig::default();
    c.scenario.road.segment_length = 400.0;
    c.scenario.vehicle_count = 8;
    c.scenario.spawn_range = [50.0, 150.0];
    c.scenario.mpr = mpr;
    c.scenario.seed = seed;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rule_based_metrics_stay_in_range(seed in 0u64..10_000, mpr_idx in 0usize..4, p in 0usize..3) {
        let policy = [Policy::Mobil, Policy::Greedy, Policy::GreedyRlc][p];
        let cfg = small([0.25, 0.5, 0.75, 1.0][mpr_idx], seed);
        let out = run_episode(&cfg, rule_decider(policy, seed).unwrap().as_mut()).unwrap();
        let m = out.metrics;
        prop_assert!((0.0..=1.0).contains(&m.platoon_rate));
        prop_assert!(m.max_platoon_length <= cfg.scenario.cav_count());
        prop_assert!(m.max_platoon_length != 1);
        prop_assert!(m.lane_changes_per_vehicle >= 0.0 && m.mean_speed >= 0.0 && m.energy >= 0.0);
        prop_assert!(out.ticks as f64 <= cfg.max_time + 1e-9);
    }
}

#[test]
fn one_cnn_network_serves_any_cav_count() {
    let cfg = small(0.5, 0);
    let net = AgentNet::cnn(&cfg.grid, 8).unwrap();
    let q = QmixNet::new(net, cfg.state_dim());
    let params = q.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    for mpr in [0.125, 0.375, 0.5, 1.0] {
        let sim = Simulation::new(&small(mpr, 3)).unwrap();
        let obs = agent_observations(&sim, &net).unwrap();
        assert_eq!(obs.len(), sim.active_cavs().len());
        for (id, o) in &obs {
            assert_eq!(o.len(), net.obs_len());
            let input = AgentInput { obs: o, last_action: 1, agent_id: *id, hidden: &AgentNet::zero_hidden() };
            let (qs, _) = net.q_values(&params[..net.param_count()], &input).unwrap();
            assert_eq!(qs.len(), 3);
        }
    }
}

#[test]
fn flat_network_is_tied_to_its_cav_count() {
    let net = AgentNet::flat(4, 8).unwrap();
    let q = QmixNet::new(net, small(0.5, 0).state_dim());
    let params = q.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    let sim = Simulation::new(&small(0.375, 1)).unwrap();
    let (id, obs) = agent_observations(&sim, &net).unwrap().remove(0);
    let input = AgentInput { obs: &obs, last_action: 1, agent_id: id, hidden: &AgentNet::zero_hidden() };
    assert!(matches!(net.q_values(&params, &input), Err(Error::AgentCountMismatch { .. })));
}
