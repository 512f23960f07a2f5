use crate::env::{render, EnvState, StateSpace};
use crate::error::{Error, Result};
use crate::frame::{l2, Frame};

use super::quantile;

/// Distances within this of the minimum count as ties in the projection set.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StealthThresholds {
    pub delta1: f64,
    pub delta2: f64,
}

impl StealthThresholds {
    pub fn new(delta1: f64, delta2: f64) -> Result<Self> {
        if !(delta1 > 0.0 && delta2 > 0.0) || !delta1.is_finite() || !delta2.is_finite() {
            return Err(Error::Domain(format!(
                "thresholds must be positive, got δ1={delta1}, δ2={delta2}"
            )));
        }
        Ok(Self { delta1, delta2 })
    }

    /// δ1 = 99th percentile over valid renders of the distance to the
    /// second-nearest render (the nearest being the frame itself);
    /// δ2 = k·δ1.
    pub fn from_clean(projector: &Projector, window: usize) -> Result<Self> {
        let mut gaps = Vec::with_capacity(projector.renders.len());
        for (i, f) in projector.renders.iter().enumerate() {
            let second = projector
                .renders
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, g)| l2(f.pixels(), g.pixels()))
                .fold(f64::INFINITY, f64::min);
            if second.is_finite() {
                gaps.push(second);
            }
        }
        let delta1 = quantile(&gaps, 0.99)
            .ok_or_else(|| Error::State("need at least two valid states".into()))?;
        Self::new(delta1, window as f64 * delta1)
    }
}

/// Result of projecting a frame onto the valid render set.
#[derive(Clone, Debug)]
pub struct Projection {
    pub distance: f64,
    /// First argmin in enumeration order.
    pub state: EnvState,
    /// Every state within the tie tolerance of the minimum.
    pub ties: Vec<EnvState>,
}

/// Exact nearest-valid-state search over the enumerated state set.
#[derive(Clone, Debug)]
pub struct Projector {
    space: StateSpace,
    renders: Vec<Frame>,
}

impl Projector {
    pub fn new(space: StateSpace) -> Self {
        let renders = space.renders();
        Self { space, renders }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn renders(&self) -> &[Frame] {
        &self.renders
    }

    pub fn render_of(&self, s: &EnvState) -> Frame {
        match self.space.index_of(s) {
            Some(i) => self.renders[i].clone(),
            None => render(self.space.config(), s),
        }
    }

    pub fn project(&self, frame: &Frame) -> Result<Projection> {
        if self.renders.is_empty() {
            return Err(Error::State("valid state set is empty".into()));
        }
        if frame.size() != self.renders[0].size() {
            return Err(Error::Domain(format!(
                "frame size {} does not match renders",
                frame.size()
            )));
        }
        let dists: Vec<f64> = self
            .renders
            .iter()
            .map(|r| l2(r.pixels(), frame.pixels()))
            .collect();
        let (best, distance) =
            dists
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |acc, (i, d)| if d < acc.1 { (i, d) } else { acc },
                );
        let ties = dists
            .iter()
            .enumerate()
            .filter(|&(_, &d)| d <= distance + TIE_TOLERANCE)
            .map(|(i, _)| self.space.states()[i].clone())
            .collect();
        Ok(Projection {
            distance,
            state: self.space.states()[best].clone(),
            ties,
        })
    }

    /// Distance to the valid render set and its argmin.
    pub fn realism_distance(&self, frame: &Frame) -> Result<(f64, EnvState)> {
        let p = self.project(frame)?;
        Ok((p.distance, p.state))
    }

    pub fn is_realistic(&self, frame: &Frame, thresholds: &StealthThresholds) -> Result<bool> {
        Ok(self.project(frame)?.distance <= thresholds.delta1)
    }

    /// True iff the projection set contains some state other than `truth`.
    pub fn is_semantics_changing(&self, frame: &Frame, truth: &EnvState) -> Result<bool> {
        let truth = truth.canonical(self.space.config());
        Ok(self.project(frame)?.ties.iter().any(|s| *s != truth))
    }

    /// True iff some member of the projection set is reachable in one step
    /// from `prev_projection`.
    pub fn is_history_aligned(&self, frame: &Frame, prev_projection: &EnvState) -> Result<bool> {
        let next = self.space.reachable_next(prev_projection)?;
        Ok(self.project(frame)?.ties.iter().any(|s| next.contains(s)))
    }
}
