//! Acceptance run: trains the default stack once, evaluates all twelve
//! criteria, prints one PASS/FAIL line per criterion and then requires the
//! failing set to equal `EXPECTED_FAILURES`. A criterion that starts passing
//! or a new failure both break the run.
//!
//! `cargo test --release -p shiftlab --test acceptance -- --nocapture`

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use nnkit::{Adam, AdamConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use shiftlab::detect::{clean_stats, flags};
use shiftlab::eval::{run_cell, Cell};
use shiftlab::stack::Stack;
use shiftlab::ExperimentConfig;
use shiftlab_core::diffusion::*;
use shiftlab_core::env::{render, value_iteration};
use shiftlab_core::metrics::{
    episode_reward, faithfulness, mean, slot, ssim, wasserstein1, TrajectoryLog,
};
use shiftlab_core::Frame;

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

/// Criteria that fail on the default configuration; see the decisions log
/// for the measurements and analysis.
const EXPECTED_FAILURES: &[u8] = &[6, 8, 10];

type Criterion = (u8, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn config() -> &'static ExperimentConfig {
    static CELL: OnceLock<ExperimentConfig> = OnceLock::new();
    CELL.get_or_init(ExperimentConfig::default)
}

fn stack() -> &'static Stack {
    static CELL: OnceLock<Stack> = OnceLock::new();
    CELL.get_or_init(|| Stack::train(config()).expect("default stack trains"))
}

/// Episode logs of one cell over the configured seeds, computed once.
fn logs(cell: &str) -> Arc<Vec<TrajectoryLog>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<Vec<TrajectoryLog>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(l) = cache.lock().unwrap().get(cell) {
        return l.clone();
    }
    let runs = run_cell(stack(), config(), &Cell::parse(cell).unwrap()).unwrap();
    let l = Arc::new(runs.into_iter().map(|r| r.log).collect::<Vec<_>>());
    cache.lock().unwrap().insert(cell.to_string(), l.clone());
    l
}

fn mean_reward(cell: &str) -> f64 {
    mean(&logs(cell).iter().map(episode_reward).collect::<Vec<_>>())
}

fn attacked_values(cell: &str, key: &str) -> Vec<f64> {
    logs(cell)
        .iter()
        .flat_map(|l| {
            l.steps
                .iter()
                .filter(|s| s.attacked)
                .filter_map(|s| s.metrics.get(key).copied())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn episode_mean(cell: &str, f: impl Fn(&TrajectoryLog) -> f64) -> f64 {
    mean(&logs(cell).iter().map(f).collect::<Vec<_>>())
}

const CLEAN: &str = "nonexnone";

// Expected coefficients are the published five-digit values, not SQRT_2.
#[allow(clippy::approx_constant)]
fn c1_preconditioners() -> Outcome {
    let t0 = Instant::now();
    let np = NoiseParams::default();
    let p = preconditioners(0.5, &np).unwrap();
    let want = [1.41421, 0.35355, 0.5, -0.17329];
    let got = [p.c_in, p.c_out, p.c_skip, p.c_noise];
    let exact = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-5);
    let data = Normal::new(0.0, np.sigma_data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for &sigma in sigma_schedule(&np).iter().filter(|s| **s > 0.0) {
        let pre = preconditioners(sigma, &np).unwrap();
        let n = 100_000;
        let (mut inputs, mut targets) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let y = data.sample(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = y + sigma * z;
            inputs.push(pre.c_in * x);
            targets.push((y - pre.c_skip * x) / pre.c_out);
        }
        for v in [&inputs, &targets] {
            let m = mean(v);
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            worst = worst.max((var - 1.0).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        exact && worst <= 0.02 && secs < 10.0,
        format!("coefficients {got:.5?}, worst variance deviation {worst:.4}, {secs:.1}s"),
    )
}

fn toy() -> GaussianToyConfig {
    let t = 100;
    let betas = (0..t)
        .map(|i| 1e-3 + (0.05 - 1e-3) * i as f64 / (t - 1) as f64)
        .collect();
    GaussianToyConfig {
        betas,
        data_mean: 0.7,
        data_var: 0.01,
        q_slope: 0.5,
    }
}

/// Terminal mean of the guided chain from the affine reverse means and the
/// exponential tilt exp(−c·x) applied at every step.
fn tilted_terminal_mean(cfg: &GaussianToyConfig, c: f64) -> f64 {
    let mut m = 0.0;
    for i in (1..=cfg.steps()).rev() {
        let ab: f64 = cfg.betas[..i].iter().map(|b| 1.0 - b).product();
        let beta = cfg.betas[i - 1];
        let k = (1.0 - ab).sqrt() / (ab * cfg.data_var + 1.0 - ab);
        let g = beta / (1.0 - ab).sqrt();
        let s = 1.0 / (1.0 - beta).sqrt();
        let (a, b) = (s * (1.0 - g * k), s * g * k * ab.sqrt() * cfg.data_mean);
        m = a * m + b - c * beta;
    }
    m
}

fn c2_guided_chain() -> Outcome {
    let t0 = Instant::now();
    let cfg = toy();
    let n = 100_000;
    let guided = cfg.sample_chain(n, 21, Some(cfg.q_slope));
    let mc = mean(&guided);
    let want = tilted_terminal_mean(&cfg, cfg.q_slope);
    let zero_same = cfg.sample_chain(n, 22, Some(0.0)) == cfg.sample_chain(n, 22, None);
    let secs = t0.elapsed().as_secs_f64();
    outcome((mc - want).abs() <= 1e-3 && zero_same && secs < 60.0, format!("Monte Carlo mean {mc:.5} vs closed form {want:.5}, zero guidance identical: {zero_same}, {secs:.1}s"))
}

fn c3_fidelity() -> Outcome {
    let s = stack();
    let t0 = Instant::now();
    let qt = value_iteration(&s.env).unwrap();
    let held = collect_samples(&s.env, &qt, 40, 0.3, s.history, 2).unwrap();
    let n = held.len().min(600);
    let hits = held[..n]
        .iter()
        .enumerate()
        .filter(|(i, h)| {
            let f = sample_conditional(&s.denoiser, &h.cond, &s.np, 1000 + *i as u64).unwrap();
            s.projector.realism_distance(&f).unwrap().1 == h.state
        })
        .count();
    let rate = hits as f64 / n as f64;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        n >= 500 && rate >= 0.85 && secs < 300.0,
        format!("{hits}/{n} = {rate:.3} next states recovered, {secs:.1}s"),
    )
}

fn c4_efficacy() -> Outcome {
    let t0 = Instant::now();
    let (clean, o, i) = (
        mean_reward(CLEAN),
        mean_reward("shift-oxnone"),
        mean_reward("shift-ixnone"),
    );
    let drop = (clean - o) / clean;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        drop >= 0.5 && i <= o && secs < 900.0,
        format!(
            "clean {clean:.2}, SHIFT-O {o:.2} ({:.0}% drop), SHIFT-I {i:.2}, {secs:.0}s",
            100.0 * drop
        ),
    )
}

fn c5_defense() -> Outcome {
    let clean = mean_reward(CLEAN);
    let (pgd, shift) = (
        mean_reward("pgd:eps=1xpurifier"),
        mean_reward("shift-oxpurifier"),
    );
    outcome(pgd >= 0.8 * clean && shift <= 0.7 * clean, format!("clean {clean:.2}, PGD-1/255 under purifier {pgd:.2}, SHIFT-O under purifier {shift:.2}"))
}

fn c6_stealth() -> Outcome {
    let (so, pgd) = ("shift-oxnone", "pgd:eps=15xnone");
    let (r_so, r_pgd) = (
        attacked_values(so, slot::RECON),
        attacked_values(pgd, slot::RECON),
    );
    let (s_so, s_pgd) = (
        attacked_values(so, slot::SSIM),
        attacked_values(pgd, slot::SSIM),
    );
    let enough = r_so.len() >= 200 && r_pgd.len() >= 200;
    let (recon_ok, ssim_ok) = (mean(&r_so) < mean(&r_pgd), mean(&s_so) > mean(&s_pgd));
    outcome(
        enough && recon_ok && ssim_ok,
        format!("recon SHIFT-O {:.3} vs PGD-15 {:.3}; SSIM SHIFT-O {:.3} vs PGD-15 {:.3}; {} / {} attacked steps", mean(&r_so), mean(&r_pgd), mean(&s_so), mean(&s_pgd), r_so.len(), r_pgd.len()),
    )
}

fn c7_scheduler() -> Outcome {
    let horizon = stack().env.episode_horizon as f64;
    let mut ok = true;
    let mut notes = Vec::new();
    for xi in [0.15, 0.25, 0.5, 1.0] {
        let cell = if xi == 1.0 {
            "shift-oxnone".to_string()
        } else {
            format!("shift-o:xi={xi}xnone")
        };
        let ls = logs(&cell);
        let worst = ls
            .iter()
            .map(|l| l.attacked_steps() as f64 / l.len() as f64)
            .fold(0.0, f64::max);
        ok &= worst <= xi + 1.0 / horizon;
        let (mut hit, mut miss) = (Vec::new(), Vec::new());
        for s in ls.iter().flat_map(|l| &l.steps) {
            if s.attacked { &mut hit } else { &mut miss }.push(s.metrics[slot::OMEGA]);
        }
        if xi < 1.0 {
            ok &= mean(&hit) >= mean(&miss);
        }
        notes.push(format!(
            "ξ={xi}: max fraction {worst:.3}, ω {:.3}/{:.3}",
            mean(&hit),
            mean(&miss)
        ));
    }
    outcome(ok, notes.join("; "))
}

fn c8_definitions() -> Outcome {
    let s = stack();
    let states = s.projector.space().states();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let zero = (0..1000).all(|_| {
        let st = &states[rng.random_range(0..states.len())];
        s.projector.realism_distance(&render(&s.env, st)).unwrap().0 == 0.0
    });
    let clean_aligned = logs(CLEAN)
        .iter()
        .all(|l| l.metric(slot::ALIGNED).iter().all(|v| *v == 1.0));
    let align = |c: &str| episode_mean(c, |l| mean(&l.metric(slot::ALIGNED)));
    let (a_o, a_i) = (align("shift-oxnone"), align("shift-ixnone"));
    let k = s.history;
    let faith = |c: &str| {
        episode_mean(c, |l| {
            mean(
                &(k..=l.len())
                    .map(|t| {
                        faithfulness(l, &s.env, t, k, s.thresholds.delta2)
                            .unwrap()
                            .0
                    })
                    .collect::<Vec<_>>(),
            )
        })
    };
    let (f_o, f_i) = (faith("shift-oxnone"), faith("shift-ixnone"));
    outcome(
        zero && clean_aligned && a_i >= a_o && f_o <= f_i,
        format!("renders at distance 0: {zero}; clean aligned: {clean_aligned}; alignment SHIFT-I {a_i:.3} vs SHIFT-O {a_o:.3}; faithfulness score SHIFT-O {f_o:.3} vs SHIFT-I {f_i:.3}"),
    )
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut w_err: f64 = 0.0;
    for k in 0..50 {
        let sparsity = [0.0, 0.3, 0.7][k % 3];
        let (a, b) = (
            oracles::random_frame(&mut rng, 4, sparsity),
            oracles::random_frame(&mut rng, 4, sparsity),
        );
        w_err = w_err.max((wasserstein1(&a, &b).unwrap() - oracles::w1_reference(&a, &b)).abs());
    }
    let mut s_err: f64 = 0.0;
    for _ in 0..50 {
        let (a, b) = (
            oracles::random_frame(&mut rng, 16, 0.4),
            oracles::random_frame(&mut rng, 16, 0.4),
        );
        s_err = s_err.max((ssim(&a, &b).unwrap() - oracles::ssim_reference(&a, &b)).abs());
    }
    let f: Frame = oracles::random_frame(&mut rng, 16, 0.4);
    let identical = wasserstein1(&f, &f).unwrap() == 0.0 && ssim(&f, &f).unwrap() == 1.0;
    outcome(w_err <= 1e-6 && s_err <= 1e-6 && identical, format!("max |W1 − LP| {w_err:.2e}, max |SSIM − reference| {s_err:.2e}, identical inputs exact: {identical}"))
}

fn c10_detectors() -> Outcome {
    let s = stack();
    let stats = clean_stats(&s.env, &logs(CLEAN), "acceptance").unwrap();
    let det = config().detector_config();
    let count = |cell: &str| {
        let ls = logs(cell);
        let f: Vec<(bool, bool)> = ls.iter().map(|l| flags(l, &stats, &det).unwrap()).collect();
        (
            ls.len(),
            f.iter().filter(|x| x.0).count(),
            f.iter().filter(|x| x.1).count(),
        )
    };
    let mut ok = true;
    let mut notes = Vec::new();
    for cell in ["pgd:eps=15xnone", CLEAN, "shift-oxnone", "shift-ixnone"] {
        let (n, mad, cusum) = count(cell);
        ok &= n >= 5
            && if cell.starts_with("pgd") {
                mad == n && cusum == n
            } else {
                mad == 0 && cusum == 0
            };
        notes.push(format!("{cell} MAD {mad}/{n} CUSUM {cusum}/{n}"));
    }
    outcome(
        ok,
        format!(
            "bound {:.4}; {}",
            stats.median + det.mad_threshold * stats.mad,
            notes.join("; ")
        ),
    )
}

fn c11_training() -> Outcome {
    let s = stack();
    let qt = value_iteration(&s.env).unwrap();
    let samples = collect_samples(&s.env, &qt, 10, 0.3, s.history, 9).unwrap();
    let np = NoiseParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = DenoiserModel::new(s.env.frame_size, s.history, &[32], &mut rng);
    let mut opt = Adam::new(m.net(), AdamConfig::default());
    let hyper = config().diffusion_train_config();
    let (mut items, mut dropped) = (0, 0);
    for chunk in 0..100 {
        let batch: Vec<&Sample> = (0..100)
            .map(|i| &samples[(chunk * 37 + i) % samples.len()])
            .collect();
        let st = train_step(&mut m, &mut opt, &batch, &np, &hyper, &mut rng).unwrap();
        items += st.items;
        dropped += st.dropped;
    }
    let rate = dropped as f64 / items as f64;
    let scales = [cf_scale(5, 5), cf_scale(1, 5), cf_scale(0, 5)];
    outcome(
        items >= 10_000 && (0.08..=0.12).contains(&rate) && scales == [0.3, 0.8, 1.0],
        format!("drop rate {rate:.4} over {items} items, cf_scale {scales:?}"),
    )
}

fn c12_ablation() -> Outcome {
    let recon = |c: &str| mean(&attacked_values(c, slot::RECON));
    let (with, without) = (recon("shift-oxnone"), recon("shift-o:realism=offxnone"));
    let grid = [0.0, 1.0, 2.0, 4.0];
    let on = |g: f64| {
        if g == config().attack.gamma2 {
            "shift-oxnone".to_string()
        } else {
            format!("shift-o:g2={g}xnone")
        }
    };
    let off = |g: f64| {
        if g == config().attack.gamma2 {
            "shift-o:realism=offxnone".to_string()
        } else {
            format!("shift-o:g2={g},realism=offxnone")
        }
    };
    let dev: Vec<f64> = grid
        .iter()
        .map(|g| episode_mean(&on(*g), |l| mean(&l.metric(slot::DEVIATED))))
        .collect();
    let rec: Vec<f64> = grid.iter().map(|g| recon(&off(*g))).collect();
    let up = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    outcome(with < without && up(&dev) && up(&rec), format!("recon with realism {with:.3} vs without {without:.3}; Γ2 {grid:?}: deviation {dev:.3?}, no-realism recon {rec:.3?}"))
}

#[test]
fn acceptance() {
    let t0 = Instant::now();
    let _ = stack();
    println!("stack trained in {:.0}s", t0.elapsed().as_secs_f64());
    let criteria: [Criterion; 12] = [
        (1, "preconditioner correctness", c1_preconditioners),
        (2, "guided chain matches tilted posterior", c2_guided_chain),
        (3, "conditional world-model fidelity", c3_fidelity),
        (4, "attack efficacy", c4_efficacy),
        (5, "defense-bypass ordering", c5_defense),
        (6, "stealth ordering", c6_stealth),
        (7, "scheduler contract", c7_scheduler),
        (8, "definition oracles", c8_definitions),
        (9, "metric oracles", c9_metrics),
        (10, "detector reproduction", c10_detectors),
        (11, "training mechanics", c11_training),
        (12, "ablation directions", c12_ablation),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        let o = check();
        println!(
            "{} criterion {id:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(id);
        }
    }
    println!(
        "failing: {failed:?} (expected {EXPECTED_FAILURES:?}), total {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    assert_eq!(
        failed, EXPECTED_FAILURES,
        "failing criteria differ from the documented set"
    );
}
