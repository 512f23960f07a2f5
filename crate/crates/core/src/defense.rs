//! Diffusion purifier the victim can put in front of its policy, and the
//! MAD / CUSUM detectors over per-step Wasserstein series.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{sigma_schedule, DenoiserModel, HistoryWindow, NoiseParams};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::quantile;

/// Re-noises `observed` to `sigma_partial` and runs the conditional
/// reverse ladder from there, conditioned on the observed history.
/// The ladder continues with every inference rung below `sigma_partial`.
pub fn purify(
    m: &DenoiserModel,
    observed: &Frame,
    history: &HistoryWindow,
    sigma_partial: f64,
    np: &NoiseParams,
    seed: u64,
) -> Result<Frame> {
    let ladder = sigma_schedule(np);
    if !(0.0..=ladder[0]).contains(&sigma_partial) {
        return Err(Error::Domain(format!(
            "σ_partial {sigma_partial} outside [0, {}]",
            ladder[0]
        )));
    }
    if sigma_partial == 0.0 {
        return Ok(observed.clone());
    }
    let mut sigmas = vec![sigma_partial];
    sigmas.extend(ladder.into_iter().filter(|s| *s < sigma_partial));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = observed
        .pixels()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma_partial * z
        })
        .collect();
    for s in sigmas.iter().filter(|s| **s > 0.0) {
        x = m.denoise(&x, *s, Some(history), np)?;
    }
    Ok(Frame::from_pixels(observed.size(), x))
}

/// Default partial noise level: the second rung of the inference ladder.
pub fn default_sigma_partial(np: &NoiseParams) -> f64 {
    let s = sigma_schedule(np);
    s[1.min(s.len() - 1)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub mad_threshold: f64,
    pub cusum_drift: f64,
    pub cusum_threshold: f64,
    /// Consecutive exceedances required by the MAD rule.
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            mad_threshold: 5.0,
            cusum_drift: 1.5,
            cusum_threshold: 3.0,
            window: 3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mad_threshold > 0.0 && self.cusum_drift > 0.0 && self.cusum_threshold > 0.0)
            || self.window == 0
        {
            return Err(Error::Config(format!(
                "detector settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Median and median absolute deviation of a clean reference series.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanStats {
    pub median: f64,
    pub mad: f64,
    pub count: usize,
    pub env_hash: String,
}

const STATS_HEADER: &str = "shiftlab-clean-stats 1";

impl CleanStats {
    pub fn from_series(values: &[f64], env_hash: &str) -> Result<Self> {
        let median = quantile(values, 0.5)
            .ok_or_else(|| Error::DegenerateStats("no clean values".into()))?;
        let dev: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
        let mad = quantile(&dev, 0.5).expect("nonempty");
        Ok(Self {
            median,
            mad,
            count: values.len(),
            env_hash: env_hash.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{STATS_HEADER}").unwrap();
        writeln!(s, "median = {:e}", self.median).unwrap();
        writeln!(s, "mad = {:e}", self.mad).unwrap();
        writeln!(s, "count = {}", self.count).unwrap();
        writeln!(s, "env_hash = {}", self.env_hash).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(STATS_HEADER) {
            return Err(Error::Format("not a clean-stats record".into()));
        }
        let mut get = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing {key}")))?;
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad line {line:?}")))?;
            if k != key {
                return Err(Error::Format(format!("expected {key}, found {k}")));
            }
            Ok(v.to_string())
        };
        let num = |v: String| v.parse::<f64>().map_err(|e| Error::Format(e.to_string()));
        let median = num(get("median")?)?;
        let mad = num(get("mad")?)?;
        let count = get("count")?
            .parse()
            .map_err(|e: std::num::ParseIntError| Error::Format(e.to_string()))?;
        let env_hash = get("env_hash")?;
        if mad < 0.0 {
            return Err(Error::Format("negative MAD".into()));
        }
        Ok(Self {
            median,
            mad,
            count,
            env_hash,
        })
    }
}

/// Flags position t when the `window` values ending at t all exceed
/// median + threshold·MAD. Shorter series give no flags.
pub fn mad_detect(series: &[f64], stats: &CleanStats, cfg: &DetectorConfig) -> Vec<bool> {
    if series.len() < cfg.window {
        return Vec::new();
    }
    let bound = stats.median + cfg.mad_threshold * stats.mad;
    let mut run = 0;
    series
        .iter()
        .map(|x| {
            run = if *x > bound { run + 1 } else { 0 };
            run >= cfg.window
        })
        .collect()
}

/// One-sided CUSUM on (x − median)/MAD; index of the first step where the
/// statistic exceeds the threshold.
pub fn cusum_detect(
    series: &[f64],
    stats: &CleanStats,
    cfg: &DetectorConfig,
) -> Result<Option<usize>> {
    if !(stats.mad > 0.0) {
        return Err(Error::DegenerateStats(format!("MAD is {}", stats.mad)));
    }
    let mut g = 0.0f64;
    for (t, x) in series.iter().enumerate() {
        let r = (x - stats.median) / stats.mad;
        g = (g + r - cfg.cusum_drift).max(0.0);
        if g > cfg.cusum_threshold {
            return Ok(Some(t));
        }
    }
    Ok(None)
}
