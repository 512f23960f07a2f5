//! Slow reference implementations of the frame metrics, written
//! independently of the library code.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shiftlab_core::Frame;

/// Dense two-phase tableau simplex with Bland's rule for
/// `min cᵀx  s.t.  A x = b, x ≥ 0` with `b ≥ 0`.
pub fn lp_min(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> f64 {
    const TOL: f64 = 1e-11;
    let rows = a.len();
    let n = c.len();
    let width = n + rows + 1;
    // columns: x (n), artificials (rows), rhs
    let mut t: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let mut r = vec![0.0; width];
            r[..n].copy_from_slice(&a[i]);
            r[n + i] = 1.0;
            r[width - 1] = b[i];
            r
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + rows).collect();

    fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], pr: usize, pc: usize) {
        let p = t[pr][pc];
        for v in t[pr].iter_mut() {
            *v /= p;
        }
        let prow = t[pr].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != pr && row[pc] != 0.0 {
                let f = row[pc];
                for (v, pv) in row.iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
            }
        }
        basis[pr] = pc;
    }

    fn optimise(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) {
        let width = t[0].len();
        loop {
            // reduced costs r_j = c_j − c_Bᵀ B⁻¹ A_j
            let mut enter = None;
            for j in 0..allowed {
                if basis.contains(&j) {
                    continue;
                }
                let z: f64 = basis
                    .iter()
                    .enumerate()
                    .map(|(i, &bj)| cost[bj] * t[i][j])
                    .sum();
                if cost[j] - z < -TOL {
                    enter = Some(j);
                    break;
                }
            }
            let Some(j) = enter else { return };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in t.iter().enumerate() {
                if row[j] > TOL {
                    let ratio = row[width - 1] / row[j];
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr))
                            if ratio < lr - TOL || (ratio <= lr + TOL && basis[i] < basis[li]) =>
                        {
                            Some((i, ratio))
                        }
                        keep => keep,
                    };
                }
            }
            let (i, _) = leave.expect("LP unbounded");
            pivot(t, basis, i, j);
        }
    }

    // Phase 1: minimise the sum of artificials.
    let mut phase1 = vec![0.0; n + rows];
    for v in &mut phase1[n..] {
        *v = 1.0;
    }
    optimise(&mut t, &mut basis, &phase1, n + rows);
    let infeas: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &bj)| bj >= n)
        .map(|(i, _)| t[i][width - 1])
        .sum();
    assert!(infeas < 1e-9, "LP infeasible");
    // Drive zero-level artificials out of the basis or drop redundant rows.
    let mut i = 0;
    while i < t.len() {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > TOL) {
                pivot(&mut t, &mut basis, i, j);
            } else {
                t.remove(i);
                basis.remove(i);
                continue;
            }
        }
        i += 1;
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, rows));
    optimise(&mut t, &mut basis, &phase2, n);
    basis
        .iter()
        .enumerate()
        .map(|(i, &bj)| c[bj] * t[i][width - 1])
        .sum()
}

/// Full (non-reduced) transport LP between normalised frames.
pub fn w1_reference(a: &Frame, b: &Frame) -> f64 {
    let size = a.size();
    let p = size * size;
    let (ma, mb) = (a.mass(), b.mass());
    let diag = (size - 1) as f64 * 2f64.sqrt();
    let mut cost = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let dr = (i / size) as f64 - (j / size) as f64;
            let dc = (i % size) as f64 - (j % size) as f64;
            cost.push((dr * dr + dc * dc).sqrt() / diag);
        }
    }
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..p {
        let mut r = vec![0.0; p * p];
        for j in 0..p {
            r[i * p + j] = 1.0;
        }
        rows.push(r);
        rhs.push(a.pixels()[i] / ma);
    }
    for j in 0..p {
        let mut r = vec![0.0; p * p];
        for i in 0..p {
            r[i * p + j] = 1.0;
        }
        rows.push(r);
        rhs.push(b.pixels()[j] / mb);
    }
    lp_min(&rows, &rhs, &cost)
}

pub fn random_frame(rng: &mut ChaCha8Rng, size: usize, sparsity: f64) -> Frame {
    loop {
        let px: Vec<f64> = (0..size * size)
            .map(|_| {
                if rng.random::<f64>() < sparsity {
                    0.0
                } else {
                    rng.random()
                }
            })
            .collect();
        let f = Frame::from_pixels(size, px);
        if f.mass() > 0.0 {
            return f;
        }
    }
}

/// Direct per-window loops, no summed-area tables.
pub fn ssim_reference(a: &Frame, b: &Frame) -> f64 {
    let n = a.size();
    let w = 7.min(n);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = Vec::new();
    for r0 in 0..=n - w {
        for c0 in 0..=n - w {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    xs.push(a.get(r, c));
                    ys.push(b.get(r, c));
                }
            }
            let len = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / len;
            let my = ys.iter().sum::<f64>() / len;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / len;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / len;
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / len;
            acc.push(
                (2.0 * mx * my + c1) * (2.0 * cov + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2)),
            );
        }
    }
    acc.iter().sum::<f64>() / acc.len() as f64
}
