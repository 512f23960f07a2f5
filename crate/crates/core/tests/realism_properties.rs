use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shiftlab_core::attacks::rotate_attack;
use shiftlab_core::env::{render, reset, step, Action, EnvConfig, StateSpace};
use shiftlab_core::realism::{realism_step, train_autoencoder, AeConfig, AeModel};
use shiftlab_core::Frame;

/// Frames seen along random-action episodes.
fn rollout_frames(cfg: &EnvConfig, episodes: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..episodes {
        let mut s = reset(cfg).unwrap();
        loop {
            out.push(render(cfg, &s));
            let a = Action::from_index(rng.random_range(0..3)).unwrap();
            let o = step(cfg, &s, a).unwrap();
            s = o.state;
            if o.done {
                break;
            }
        }
    }
    out
}

struct Fixture {
    ae: AeModel,
    held: Vec<Frame>,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = EnvConfig::default();
        let mut train = StateSpace::enumerate(&cfg).unwrap().renders();
        train.extend(rollout_frames(&cfg, 10, 1));
        let held = rollout_frames(&cfg, 5, 2);
        let (ae, _) = train_autoencoder(&train, &held, &AeConfig::default(), 4).unwrap();
        Fixture { ae, held }
    })
}

fn mean_error(ae: &AeModel, frames: &[Frame]) -> f64 {
    frames
        .iter()
        .map(|f| ae.reconstruction_error(f).unwrap())
        .sum::<f64>()
        / frames.len() as f64
}

#[test]
fn clean_error_is_low_and_noise_is_separated() {
    let f = fixture();
    let clean = mean_error(&f.ae, &f.held);
    assert!(clean <= 0.5, "clean error {clean}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise: Vec<Frame> = (0..200)
        .map(|_| Frame::from_pixels(16, (0..256).map(|_| rng.random::<f64>()).collect()))
        .collect();
    let noisy = mean_error(&f.ae, &noise);
    assert!(noisy >= 3.0 * clean, "noise {noisy} vs clean {clean}");
}

#[test]
fn scoring_is_repeatable_and_nonnegative() {
    let f = fixture();
    for fr in f.held.iter().take(20) {
        let e = f.ae.reconstruction_error(fr).unwrap();
        assert!(e >= 0.0);
        assert_eq!(e, f.ae.reconstruction_error(fr).unwrap());
        let r = f.ae.reconstruct(fr).unwrap();
        assert_eq!(r.size(), fr.size());
        assert!(r.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn same_seed_gives_identical_autoencoders() {
    let cfg = EnvConfig::default();
    let frames = StateSpace::enumerate(&cfg).unwrap().renders();
    let hyper = AeConfig {
        epochs: 20,
        clean_error_limit: f64::INFINITY,
        ..AeConfig::default()
    };
    let (a, ca) = train_autoencoder(&frames, &[], &hyper, 9).unwrap();
    let (b, cb) = train_autoencoder(&frames, &[], &hyper, 9).unwrap();
    assert_eq!(a.net(), b.net());
    assert_eq!(ca, cb);
}

#[test]
fn unmet_limit_is_a_training_error() {
    let cfg = EnvConfig::default();
    let frames = StateSpace::enumerate(&cfg).unwrap().renders();
    let hyper = AeConfig {
        epochs: 1,
        clean_error_limit: 1e-6,
        ..AeConfig::default()
    };
    assert!(matches!(
        train_autoencoder(&frames, &[], &hyper, 9),
        Err(shiftlab_core::Error::Training { .. })
    ));
}

#[test]
fn realism_step_descends_on_noisy_probes() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 0.15).unwrap();
    let mut down = 0;
    let n = 200;
    for i in 0..n {
        let base = &f.held[i % f.held.len()];
        let probe = Frame::from_pixels(
            16,
            base.pixels()
                .iter()
                .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect(),
        );
        let before = f.ae.reconstruction_error(&probe).unwrap();
        let after =
            f.ae.reconstruction_error(&realism_step(&f.ae, &probe).unwrap())
                .unwrap();
        if after < before {
            down += 1;
        }
    }
    assert!(down as f64 >= 0.95 * n as f64, "descent on {down}/{n}");
}

#[test]
fn realism_step_stays_in_range_and_is_not_idempotent() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let probe = Frame::from_pixels(16, (0..256).map(|_| rng.random::<f64>()).collect());
    let once = realism_step(&f.ae, &probe).unwrap();
    let twice = realism_step(&f.ae, &once).unwrap();
    assert!(once.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(once, twice);
}

#[test]
fn rotated_frames_score_worse_than_clean() {
    let f = fixture();
    let rotated: Vec<Frame> = f
        .held
        .iter()
        .map(|fr| rotate_attack(fr, 3.0).unwrap())
        .collect();
    let (clean, rot) = (mean_error(&f.ae, &f.held), mean_error(&f.ae, &rotated));
    assert!(clean < rot, "clean {clean} vs rotated {rot}");
}
