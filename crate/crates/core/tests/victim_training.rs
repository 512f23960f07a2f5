use std::sync::OnceLock;

use shiftlab_core::env::{
    render, step, value_iteration, Action, EnvConfig, EnvState, QTable, StateSpace,
};
use shiftlab_core::victim::{
    evaluate_greedy, importance_from_values, train_dqn, DqnConfig, QModel,
};

fn trained() -> &'static (QModel, QTable) {
    static CELL: OnceLock<(QModel, QTable)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = EnvConfig::default();
        let (q, _) = train_dqn(&cfg, &DqnConfig::default(), 7).expect("training reaches threshold");
        (q, value_iteration(&cfg).unwrap())
    })
}

/// Agent sits next to a lane whose car will occupy the agent column after
/// the next car move.
fn next_to_car(cfg: &EnvConfig, s: &EnvState) -> bool {
    (0..cfg.num_lanes).any(|j| {
        let lane = cfg.lane_row(j);
        lane.abs_diff(s.agent_row) == 1 && cfg.car_col_at(j, s.tick + 1) == cfg.agent_col()
    })
}

fn on_empty_row(cfg: &EnvConfig, s: &EnvState) -> bool {
    (0..cfg.num_lanes).all(|j| cfg.lane_row(j).abs_diff(s.agent_row) > 1)
}

/// Pairs (near-car state, same-tick state on an empty row).
fn matched_pairs(space: &StateSpace) -> Vec<(EnvState, EnvState)> {
    let cfg = space.config();
    let mut pairs = Vec::new();
    for s in space.states().iter().filter(|s| next_to_car(cfg, s)) {
        for e in space
            .states()
            .iter()
            .filter(|e| e.tick == s.tick && on_empty_row(cfg, e))
        {
            pairs.push((s.clone(), e.clone()));
        }
    }
    pairs
}

#[test]
fn dqn_reaches_oracle_return() {
    let cfg = EnvConfig::default();
    let (q, oracle) = trained();
    let ret = evaluate_greedy(q, &cfg, 10).unwrap();
    assert!(
        ret >= 0.9 * oracle.optimal_return,
        "{ret} vs {}",
        oracle.optimal_return
    );
}

#[test]
fn trained_values_are_finite_and_deterministic() {
    let cfg = EnvConfig::default();
    let (q, oracle) = trained();
    for s in oracle.space.states() {
        let f = render(&cfg, s);
        let a = q.q_values(&f).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, q.q_values(&f.clone()).unwrap());
        assert!(q.importance_weight(&f).unwrap() >= 0.0);
    }
}

#[test]
fn oracle_importance_is_higher_next_to_cars() {
    let oracle = value_iteration(&EnvConfig::default()).unwrap();
    let pairs = matched_pairs(&oracle.space);
    assert!(!pairs.is_empty());
    let higher = pairs
        .iter()
        .filter(|(near, empty)| {
            importance_from_values(&oracle.values(near).unwrap())
                > importance_from_values(&oracle.values(empty).unwrap())
        })
        .count();
    assert!(
        higher as f64 >= 0.9 * pairs.len() as f64,
        "{higher}/{}",
        pairs.len()
    );
}

#[test]
fn learned_max_q_orders_near_collision_below_free_road() {
    let cfg = EnvConfig::default();
    let (q, oracle) = trained();
    let max = |v: [f64; 3]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Pair each near-car state with states on the same row where no car is
    // about to arrive, keeping the pairs where Q* clearly ranks the free road higher.
    let states = oracle.space.states();
    let mut pairs = Vec::new();
    for n in states.iter().filter(|s| next_to_car(&cfg, s)) {
        for e in states
            .iter()
            .filter(|e| e.agent_row == n.agent_row && !next_to_car(&cfg, e))
        {
            if max(oracle.values(n).unwrap()) + 0.05 < max(oracle.values(e).unwrap()) {
                pairs.push((n.clone(), e.clone()));
            }
        }
    }
    assert!(!pairs.is_empty());
    let agree = pairs
        .iter()
        .filter(|(n, e)| {
            max(q.q_values(&render(&cfg, n)).unwrap()) < max(q.q_values(&render(&cfg, e)).unwrap())
        })
        .count();
    assert!(
        agree as f64 >= 0.9 * pairs.len() as f64,
        "{agree}/{}",
        pairs.len()
    );
}

#[test]
fn same_seed_gives_identical_networks() {
    let cfg = EnvConfig::default();
    let hyper = DqnConfig {
        train_steps: 800,
        learning_starts: 200,
        return_threshold: None,
        ..DqnConfig::default()
    };
    let (a, ca) = train_dqn(&cfg, &hyper, 21).unwrap();
    let (b, cb) = train_dqn(&cfg, &hyper, 21).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca.len(), cb.len());
    let (c, _) = train_dqn(&cfg, &hyper, 22).unwrap();
    assert_ne!(a, c);
}

#[test]
fn myopic_variant_matches_immediate_reward_oracle() {
    let cfg = EnvConfig {
        discount: 0.0,
        ..EnvConfig::default()
    };
    let hyper = DqnConfig {
        return_threshold: None,
        train_steps: 4000,
        ..DqnConfig::default()
    };
    let (q, _) = train_dqn(&cfg, &hyper, 3).unwrap();
    let space = StateSpace::enumerate(&cfg).unwrap();
    let mut ok = 0;
    for s in space.states() {
        let rewards: Vec<f64> = Action::ALL
            .iter()
            .map(|&a| step(&cfg, s, a).unwrap().reward)
            .collect();
        let best = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let chosen = q.greedy_action(&render(&cfg, s)).unwrap();
        if rewards[chosen.index()] >= best - 1e-9 {
            ok += 1;
        }
    }
    assert!(
        ok as f64 >= 0.95 * space.len() as f64,
        "{ok}/{}",
        space.len()
    );
}
