//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Tests hold a shared lock so that runtimes are measured without other
//! checks competing for the CPU. The trained desk checkpoint is built once
//! and shared by the training and varying-agent checks.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use platoon_core::episode::Policy;
use platoon_core::qmix::{MultiAgentEnv, KEEP_INDEX};
use platoon_core::sim::{VehicleKind, VehicleState, WorldState};
use platoon_core::verify::{conformance_suite, gradient_suite, mixing_suite, SuiteReport};
use platoon_sim::checkpoint::Checkpoint;
use platoon_sim::compare::{compare_policies, Verdict, DEFAULT_RESAMPLES};
use platoon_sim::config::{Config, EncoderKind};
use platoon_sim::experiment::{run_experiment, AggregateRow, ExperimentSpec, ResultsTable};
use platoon_sim::training::{return_windows, run_training, TrainingRun};

const SWEEP_MPRS: [f64; 3] = [0.125, 0.375, 0.5];

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to stderr directly so the line shows up without `--nocapture`.
fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn suite_checks(r: &SuiteReport, names: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in names {
        match r.get(n) {
            Some(c) => {
                ok &= c.passed;
                parts.push(format!("{n}={:.2e}/{:.0e}", c.value, c.tolerance));
            }
            None => {
                ok = false;
                parts.push(format!("{n} missing"));
            }
        }
    }
    (ok, parts.join(", "))
}

fn desk() -> Config {
    let mut c = Config::desk();
    c.train.episodes = 2000;
    c.train.seed = 7;
    c
}

struct Trained {
    run: TrainingRun,
    elapsed: Duration,
    _dir: tempfile::TempDir,
    path: std::path::PathBuf,
}

fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let run = run_training(&desk(), None).expect("training runs");
        let elapsed = t.elapsed();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desk.ckpt");
        run.last.save(&path).unwrap();
        Trained { run, elapsed, _dir: dir, path }
    })
}

#[test]
fn criterion_1_gradient_check() {
    let _g = serial();
    let t = Instant::now();
    let r = gradient_suite(0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = r.checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let pass = r.passed() && r.checks.len() >= 8 && secs < 120.0;
    report(1, pass, &format!("{} checks, worst relative error {worst:.2e} < 1e-4, {secs:.1} s < 120 s", r.checks.len()));
    assert!(pass, "{r:?}");
}

#[test]
fn criterion_2_monotone_mixing() {
    let _g = serial();
    let t = Instant::now();
    let r = mixing_suite(1000, 0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (ok, detail) = suite_checks(&r, &["mixer_min_slope_negated", "mixer_masked_change"]);
    let pass = ok && secs < 30.0;
    report(2, pass, &format!("1000 draws, {detail}, {secs:.1} s < 30 s"));
    assert!(pass);
}

#[test]
fn criterion_3_planner_conformance() {
    let _g = serial();
    let r = conformance_suite(0).unwrap();
    let (pass, detail) = suite_checks(&r, &["quintic_min_jerk_profile", "quintic_boundary_residuals"]);
    report(3, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_4_mpc_conformance() {
    let _g = serial();
    let r = conformance_suite(0).unwrap();
    let (pass, detail) = suite_checks(
        &r,
        &[
            "mpc_unconstrained_vs_normal_equations",
            "mpc_self_consistent_du",
            "mpc_lane_change_lateral_error",
            "mpc_lane_change_bound_violation",
            "mpc_bound_violation",
        ],
    );
    report(4, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_5_longitudinal_suite() {
    let _g = serial();
    let r = conformance_suite(0).unwrap();
    let (pass, detail) = suite_checks(
        &r,
        &[
            "idm_free_flow",
            "idm_standstill",
            "idm_platoon_settle_time",
            "idm_platoon_collisions",
            "acc_cacc_equilibrium_command",
            "cacc_filter_linearity",
        ],
    );
    report(5, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_6_trend_reproduction() {
    let _g = serial();
    let t = Instant::now();
    let policies = [Policy::Mobil, Policy::Greedy, Policy::GreedyRlc];
    let tables: Vec<ResultsTable> = policies
        .iter()
        .map(|&p| run_experiment(&ExperimentSpec::new(p, SWEEP_MPRS.to_vec(), (0..100).collect(), Config::default())).unwrap())
        .collect();
    let cmp = compare_policies(&tables, DEFAULT_RESAMPLES, 0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mut pass = secs < 900.0;
    let mut parts = Vec::new();
    for (p, table) in policies.iter().zip(&tables) {
        let means: Vec<f64> = SWEEP_MPRS.iter().map(|&m| table.aggregate(*p, m).unwrap().platoon_rate_mean).collect();
        let rising = means.windows(2).all(|w| w[1] > w[0]);
        pass &= rising;
        parts.push(format!("{p} {:.3}/{:.3}/{:.3}{}", means[0], means[1], means[2], if rising { "" } else { " not rising" }));
    }
    for &m in &SWEEP_MPRS {
        let g = cmp.interval(Policy::Greedy, m).unwrap();
        let b = cmp.interval(Policy::Mobil, m).unwrap();
        let better = cmp.verdict(Policy::Greedy, Policy::Mobil, m) == Some(Verdict::Better);
        pass &= better;
        parts.push(format!("greedy [{:.3},{:.3}] vs mobil [{:.3},{:.3}] at {m}", g.low, g.high, b.low, b.high));
    }
    let collisions: usize = tables.iter().flat_map(|t| &t.aggregates).map(|a| a.collision_episodes).sum();
    parts.push(format!("{collisions} collision episodes of 900, {secs:.0} s < 900 s"));
    report(6, pass, &parts.join("; "));
    assert!(pass);
}

#[test]
fn criterion_7_training_smoke_test() {
    let _g = serial();
    let tr = trained();
    let t = Instant::now();
    let (lead, trail) = return_windows(&tr.run.outcome.log, 0.1).unwrap();
    let seeds: Vec<u64> = (10_000..10_050).collect();
    let mut spec = ExperimentSpec::new(Policy::CnnQmix, vec![0.5], seeds.clone(), desk());
    spec.checkpoint = Some(tr.path.clone());
    let learned = run_experiment(&spec).unwrap().aggregate(Policy::CnnQmix, 0.5).unwrap().platoon_rate_mean;
    let mobil = run_experiment(&ExperimentSpec::new(Policy::Mobil, vec![0.5], seeds, desk()))
        .unwrap()
        .aggregate(Policy::Mobil, 0.5)
        .unwrap()
        .platoon_rate_mean;
    let secs = (tr.elapsed + t.elapsed()).as_secs_f64();
    let pass = tr.run.outcome.log.len() == 2000 && trail > lead && learned >= mobil && secs < 3600.0;
    report(
        7,
        pass,
        &format!(
            "return first 10% {lead:.3} -> last 10% {trail:.3}; platoon rate cnn_qmix {learned:.3} vs mobil {mobil:.3} over 50 seeds; {secs:.0} s < 3600 s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_varying_agent_contract() {
    let _g = serial();
    let tr = trained();
    let before = Checkpoint::load(&tr.path).unwrap();
    let mut spec = ExperimentSpec::new(Policy::CnnQmix, SWEEP_MPRS.to_vec(), (0..10).collect(), desk());
    spec.checkpoint = Some(tr.path.clone());
    let cnn = run_experiment(&spec);
    let cnn_ok = cnn.as_ref().map(|t| t.episodes.len() == 30).unwrap_or(false)
        && Checkpoint::load(&tr.path).unwrap() == before;

    // Flat baseline trained at MPR 0.5 (4 of 8 vehicles are CAVs).
    let mut flat_cfg = desk();
    flat_cfg.agent.encoder = EncoderKind::Flat;
    flat_cfg.train.episodes = 20;
    let flat = run_training(&flat_cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.ckpt");
    flat.last.save(&path).unwrap();
    let eval = |mpr: f64| {
        let mut s = ExperimentSpec::new(Policy::FlatQmix, vec![mpr], (0..3).collect(), desk());
        s.checkpoint = Some(path.clone());
        run_experiment(&s)
    };
    let on_count = eval(0.5).is_ok();
    let mut off = Vec::new();
    for m in [0.125, 0.375] {
        off.push(match eval(m) {
            Err(platoon_sim::Error::Core(e @ platoon_core::Error::AgentCountMismatch { .. })) => Ok(e.to_string()),
            other => Err(format!("{:?}", other.map(|t| t.episodes.len()))),
        });
    }
    let pass = cnn_ok && on_count && off.iter().all(Result::is_ok);
    report(
        8,
        pass,
        &format!(
            "cnn_qmix at 0.125/0.375/0.5: {}; flat_qmix at 0.5: {}; off count: {}",
            if cnn_ok { "ok" } else { "failed" },
            if on_count { "ok" } else { "failed" },
            off.iter().map(|r| r.clone().unwrap_or_else(|e| format!("no error ({e})"))).collect::<Vec<_>>().join(" | ")
        ),
    );
    assert!(pass, "{cnn:?}");
}

#[test]
fn criterion_9_determinism_and_audit() {
    let _g = serial();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(Policy::GreedyRlc, SWEEP_MPRS.to_vec(), (0..10).collect(), desk());
        spec.out = Some(dir.path().to_path_buf());
        let table = run_experiment(&spec).unwrap();
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        let rows = ResultsTable::read_episodes_csv(&dir.path().join("episodes.csv")).unwrap();
        (read("episodes.csv"), read("aggregate.csv"), table, rows)
    };
    let (ea, aa, table, rows) = run();
    let (eb, ab, _, _) = run();
    let identical = ea == eb && aa == ab;
    let recomputed = SWEEP_MPRS.iter().all(|&m| {
        let group: Vec<_> = rows.iter().filter(|r| r.mpr == m).cloned().collect();
        AggregateRow::from_rows(&group).ok().as_ref() == table.aggregate(Policy::GreedyRlc, m)
    });

    // Rear CAV at 25 m/s one metre behind a stopped one.
    let cfg = {
        let mut c = desk();
        c.scenario.vehicle_count = 2;
        c.scenario.mpr = 1.0;
        c
    };
    let ep = cfg.episode_config();
    let net = platoon_core::qmix::AgentNet::cnn(&ep.grid, 2).unwrap();
    let mut env = platoon_core::episode::QmixEnv::new(ep.clone(), vec![1.0], 0, net).unwrap();
    let road = &ep.scenario.road;
    env.reset_with_world(WorldState {
        road: *road,
        time: 0.0,
        vehicles: vec![
            VehicleState::on_lane(0, VehicleKind::Cav, road, 1, 300.0, 0.0),
            VehicleState::on_lane(1, VehicleKind::Cav, road, 1, 294.0, 25.0),
        ],
    })
    .unwrap();
    let out = env.step(&[(0, KEEP_INDEX), (1, KEEP_INDEX)]).unwrap();
    let collision = out.reward == -5.0 && out.terminal && out.done && env.simulation().unwrap().done();

    let pass = identical && recomputed && collision;
    report(
        9,
        pass,
        &format!(
            "csv bytes identical: {identical}; aggregates recomputed exactly: {recomputed}; forced collision reward {} terminal {}",
            out.reward, out.terminal
        ),
    );
    assert!(pass);
}
