//! Evaluation metrics: exact Wasserstein-1, SSIM, trajectory statistics and
//! exact oracles for realism, semantic change, history alignment and
//! trajectory faithfulness over the enumerated state set.

mod definitions;
mod log;
pub mod ot;

pub use definitions::{Projection, Projector, StealthThresholds};
pub use log::{deviation_rate, episode_reward, faithfulness, slot, StepRecord, TrajectoryLog};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Exact W1 between the two frames' intensity distributions (each normalised
/// to unit mass), with Euclidean pixel distance divided by the frame diagonal
/// as ground metric.
///
/// Only `a − b` matters for a metric ground cost, so shared mass is cancelled
/// before solving.
pub fn wasserstein1(a: &Frame, b: &Frame) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::Domain(format!(
            "frame sizes differ: {} vs {}",
            a.size(),
            b.size()
        )));
    }
    let (ma, mb) = (a.mass(), b.mass());
    if ma <= 0.0 || mb <= 0.0 {
        return Err(Error::DegenerateMass);
    }
    let size = a.size();
    let mut supply = Vec::new();
    let mut demand = Vec::new();
    for (k, (x, y)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        let diff = x / ma - y / mb;
        if diff > 0.0 {
            supply.push((k, diff));
        } else if diff < 0.0 {
            demand.push((k, -diff));
        }
    }
    if supply.is_empty() || demand.is_empty() {
        return Ok(0.0);
    }
    let diag = if size > 1 {
        ((size - 1) as f64) * std::f64::consts::SQRT_2
    } else {
        1.0
    };
    let mut cost = Vec::with_capacity(supply.len() * demand.len());
    for &(i, _) in &supply {
        let (ri, ci) = ((i / size) as f64, (i % size) as f64);
        for &(j, _) in &demand {
            let (rj, cj) = ((j / size) as f64, (j % size) as f64);
            cost.push(((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt() / diag);
        }
    }
    let s: Vec<f64> = supply.iter().map(|p| p.1).collect();
    let d: Vec<f64> = demand.iter().map(|p| p.1).collect();
    ot::transport_cost(&s, &d, &cost)
}

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all fully contained 7×7 windows with dynamic range 1.
/// Local statistics use uniform weights and population (co)variances.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::Domain(format!(
            "frame sizes differ: {} vs {}",
            a.size(),
            b.size()
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let n = a.size();
    let w = SSIM_WINDOW.min(n);
    // Summed-area tables of x, y, x², y², xy.
    let stride = n + 1;
    let mut tables = [
        vec![0.0; stride * stride],
        vec![0.0; stride * stride],
        vec![0.0; stride * stride],
        vec![0.0; stride * stride],
        vec![0.0; stride * stride],
    ];
    for r in 0..n {
        for c in 0..n {
            let x = a.get(r, c);
            let y = b.get(r, c);
            let vals = [x, y, x * x, y * y, x * y];
            for (t, v) in tables.iter_mut().zip(vals) {
                t[(r + 1) * stride + c + 1] =
                    v + t[r * stride + c + 1] + t[(r + 1) * stride + c] - t[r * stride + c];
            }
        }
    }
    let area = |t: &[f64], r: usize, c: usize| {
        t[(r + w) * stride + c + w] - t[r * stride + c + w] - t[(r + w) * stride + c]
            + t[r * stride + c]
    };
    let np = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=(n - w) {
        for c in 0..=(n - w) {
            let mx = area(&tables[0], r, c) / np;
            let my = area(&tables[1], r, c) / np;
            let vx = area(&tables[2], r, c) / np - mx * mx;
            let vy = area(&tables[3], r, c) / np - my * my;
            let cxy = area(&tables[4], r, c) / np - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Linear-interpolated quantile (`q` in `[0, 1]`) of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (0 for fewer than two values).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(size: usize, r: usize, c: usize) -> Frame {
        let mut f = Frame::zeros(size);
        f.set(r, c, 1.0);
        f
    }

    #[test]
    fn w1_identical_frames_is_zero() {
        let f = Frame::from_pixels(4, (0..16).map(|i| (i as f64) / 16.0).collect());
        assert_eq!(wasserstein1(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn w1_between_point_masses_is_scaled_distance() {
        let a = one_hot(16, 2, 3);
        let b = one_hot(16, 5, 7);
        let diag = 15.0 * 2f64.sqrt();
        assert!((wasserstein1(&a, &b).unwrap() - 5.0 / diag).abs() < 1e-12);
    }

    #[test]
    fn w1_rejects_zero_mass() {
        assert!(matches!(
            wasserstein1(&Frame::zeros(4), &one_hot(4, 0, 0)),
            Err(Error::DegenerateMass)
        ));
    }

    #[test]
    fn ssim_identical_is_one() {
        let f = Frame::from_pixels(8, (0..64).map(|i| ((i * 7) % 13) as f64 / 13.0).collect());
        assert_eq!(ssim(&f, &f).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_zero_vs_one_is_constant_term() {
        let a = Frame::zeros(16);
        let b = Frame::from_pixels(16, vec![1.0; 256]);
        // μa = 0, μb = 1, all variances 0: (C1)(C2) / ((1 + C1)(C2))
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.0), Some(1.0));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 1.0), Some(3.0));
        assert_eq!(quantile(&[1.0, 2.0], 0.25), Some(1.25));
        assert_eq!(quantile(&[], 0.5), None);
    }
}
