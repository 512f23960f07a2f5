use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::victim::QModel;

fn check_eps(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!(
            "ε must be nonnegative, got {epsilon}"
        )));
    }
    Ok(())
}

fn signed_step(x: &mut [f64], origin: &[f64], grad: &[f64], step: f64, epsilon: f64) {
    for ((xi, oi), gi) in x.iter_mut().zip(origin).zip(grad) {
        let s = if *gi > 0.0 {
            1.0
        } else if *gi < 0.0 {
            -1.0
        } else {
            0.0
        };
        *xi = (*xi + step * s)
            .clamp(oi - epsilon, oi + epsilon)
            .clamp(0.0, 1.0);
    }
}

/// Sign-gradient ascent on the cross-entropy of the victim's softmax policy
/// against its clean greedy action; steps of ε/4, projected onto the l∞ ball
/// and [0, 1].
pub fn pgd_attack(q: &QModel, frame: &Frame, epsilon: f64, iters: usize) -> Result<Frame> {
    check_eps(epsilon)?;
    if epsilon == 0.0 {
        return Ok(frame.clone());
    }
    let target = q.greedy_action(frame)?.index();
    let origin = frame.pixels();
    let mut x = origin.to_vec();
    for _ in 0..iters {
        let (values, _) = q.input_gradient(&x, &[0.0; NUM_ACTIONS])?;
        let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = values.iter().map(|v| (v - top).exp()).collect();
        let z: f64 = e.iter().sum();
        // d(−log p_target)/dQ_b = p_b − [b = target]
        let mut w = [0.0; NUM_ACTIONS];
        for b in 0..NUM_ACTIONS {
            w[b] = e[b] / z - if b == target { 1.0 } else { 0.0 };
        }
        let (_, g) = q.input_gradient(&x, &w)?;
        signed_step(&mut x, origin, &g, epsilon / 4.0, epsilon);
    }
    Ok(Frame::from_pixels(frame.size(), x))
}

/// Sign-gradient descent on the value of the clean best action.
pub fn minbest_attack(q: &QModel, frame: &Frame, epsilon: f64, iters: usize) -> Result<Frame> {
    Ok(minbest_trace(q, frame, epsilon, iters)?.0)
}

/// [`minbest_attack`] together with Q(best action) before the first and
/// after every iteration.
pub fn minbest_trace(
    q: &QModel,
    frame: &Frame,
    epsilon: f64,
    iters: usize,
) -> Result<(Frame, Vec<f64>)> {
    check_eps(epsilon)?;
    let best = q.greedy_action(frame)?.index();
    let mut w = [0.0; NUM_ACTIONS];
    w[best] = 1.0;
    let origin = frame.pixels();
    let mut x = origin.to_vec();
    let mut trace = vec![q.q_values(frame)?[best]];
    if epsilon == 0.0 {
        return Ok((frame.clone(), trace));
    }
    for _ in 0..iters {
        let (_, g) = q.input_gradient(&x, &w)?;
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        signed_step(&mut x, origin, &neg, epsilon / 4.0, epsilon);
        trace.push(q.q_values(&Frame::from_pixels(frame.size(), x.clone()))?[best]);
    }
    Ok((Frame::from_pixels(frame.size(), x), trace))
}

/// Bilinear rotation about the frame centre (positive = counter-clockwise),
/// zero outside the source.
pub fn rotate_attack(frame: &Frame, degrees: f64) -> Result<Frame> {
    if !(degrees.abs() <= 45.0) {
        return Err(Error::Domain(format!(
            "rotation must be within ±45°, got {degrees}"
        )));
    }
    if degrees == 0.0 {
        return Ok(frame.clone());
    }
    let n = frame.size();
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= n as isize || col >= n as isize {
            0.0
        } else {
            frame.get(r as usize, col as usize)
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for col in 0..n {
            // Inverse map: image coordinates with y pointing up.
            let (x, y) = (col as f64 - c, c - r as f64);
            let sx = cos * x + sin * y;
            let sy = -sin * x + cos * y;
            let (fr, fc) = (c - sy, sx + c);
            let (r0, c0) = (fr.floor(), fc.floor());
            let (dr, dc) = (fr - r0, fc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let v = (1.0 - dr) * ((1.0 - dc) * at(r0, c0) + dc * at(r0, c0 + 1))
                + dr * ((1.0 - dc) * at(r0 + 1, c0) + dc * at(r0 + 1, c0 + 1));
            out.push(v);
        }
    }
    Ok(Frame::from_pixels(n, out))
}

/// Integer translation by `dx` columns and `dy` rows with zero fill.
pub fn transform_attack(frame: &Frame, dx: i32, dy: i32) -> Result<Frame> {
    let n = frame.size() as i32;
    if dx.abs() >= n || dy.abs() >= n {
        return Err(Error::Domain(format!(
            "shift ({dx}, {dy}) exceeds frame size {n}"
        )));
    }
    let mut out = Frame::zeros(frame.size());
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = (r - dy, c - dx);
            if (0..n).contains(&sr) && (0..n).contains(&sc) {
                out.set(r as usize, c as usize, frame.get(sr as usize, sc as usize));
            }
        }
    }
    Ok(out)
}
