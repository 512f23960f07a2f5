//! Text digest and plain raster charts built from `summary.csv` and the logs.
//! Charts carry no text; the digest lists the numbers behind each one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use shiftlab_core::attacks::Variant;
use shiftlab_core::metrics::{mean, slot, TrajectoryLog};

use crate::config::ExperimentConfig;
use crate::detect::read_all_logs;
use crate::error::Result;
use crate::eval::{read_summary, Cell, CellSummary, DefenseKind, SUMMARY_FILE};

pub const REPORT_FILE: &str = "report.txt";
const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [127, 127, 127],
];

struct Chart {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Chart {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        for i in MARGIN..W - MARGIN / 2 {
            img.put_pixel(i, H - MARGIN, Rgb([0, 0, 0]));
        }
        for j in MARGIN / 2..=H - MARGIN {
            img.put_pixel(MARGIN, j, Rgb([0, 0, 0]));
        }
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        Self {
            img,
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = (
            (W - MARGIN - MARGIN / 2) as f64,
            (H - MARGIN - MARGIN / 2) as f64,
        );
        let fx = (x - self.x.0) / (self.x.1 - self.x.0);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0);
        (MARGIN as f64 + fx * w, (H - MARGIN) as f64 - fy * h)
    }

    fn dot(&mut self, x: f64, y: f64, c: [u8; 3]) {
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
        let (p, q) = (self.px(a.0, a.1), self.px(b.0, b.1));
        let n = ((q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
            self.dot(x, y, c);
            self.dot(x, y + 1.0, c);
        }
    }

    fn bar(&mut self, x0: f64, x1: f64, y: f64, c: [u8; 3]) {
        let (a, top) = self.px(x0, y);
        let (b, base) = self.px(x1, self.y.0.max(0.0).min(self.y.1));
        let (lo, hi) = (top.min(base), top.max(base));
        for i in a.round() as u32..b.round() as u32 {
            for j in lo.round() as u32..=hi.round() as u32 {
                self.dot(i as f64, j as f64, c);
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: [u8; 3]) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c);
        }
        for &(x, y) in pts {
            let (u, v) = self.px(x, y);
            for d in [-1.0, 0.0, 1.0] {
                self.dot(u + d, v, c);
                self.dot(u, v + d, c);
            }
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    })
}

fn bar_chart(values: &[f64]) -> RgbImage {
    let (lo, hi) = range(values.iter().copied().chain([0.0]));
    let mut c = Chart::new((0.0, values.len() as f64), (lo, hi));
    for (i, v) in values.iter().enumerate() {
        c.bar(
            i as f64 + 0.15,
            i as f64 + 0.85,
            *v,
            PALETTE[i % PALETTE.len()],
        );
    }
    c.img
}

fn line_chart(series: &[Vec<(f64, f64)>]) -> RgbImage {
    let pts = || series.iter().flatten();
    let mut c = Chart::new(range(pts().map(|p| p.0)), range(pts().map(|p| p.1)));
    for (i, s) in series.iter().enumerate() {
        c.polyline(s, PALETTE[i % PALETTE.len()]);
    }
    c.img
}

/// Step-outline histograms over a shared set of bins.
fn histograms(groups: &[Vec<f64>], bins: usize) -> (RgbImage, Vec<Vec<usize>>) {
    let (lo, hi) = range(groups.iter().flatten().copied());
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let counts: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            let mut c = vec![0; bins];
            for v in g {
                c[(((v - lo) / width) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();
    let top = counts.iter().flatten().copied().max().unwrap_or(1) as f64;
    let mut chart = Chart::new((lo, lo + width * bins as f64), (0.0, top));
    for (i, c) in counts.iter().enumerate() {
        let pts: Vec<(f64, f64)> = c
            .iter()
            .enumerate()
            .flat_map(|(b, n)| {
                [
                    (lo + width * b as f64, *n as f64),
                    (lo + width * (b + 1) as f64, *n as f64),
                ]
            })
            .collect();
        chart.polyline(&pts, PALETTE[i % PALETTE.len()]);
    }
    (chart.img, counts)
}

/// Mean reconstruction error by attacked-step index across episodes.
fn recon_curve(logs: &[TrajectoryLog]) -> Vec<(f64, f64)> {
    let mut by_index: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for log in logs {
        for (i, s) in log.steps.iter().filter(|s| s.attacked).enumerate() {
            if let Some(v) = s.metrics.get(slot::RECON) {
                by_index.entry(i).or_default().push(*v);
            }
        }
    }
    by_index
        .into_iter()
        .map(|(i, v)| (i as f64, mean(&v)))
        .collect()
}

fn cell_of(row: &CellSummary) -> Option<Cell> {
    Cell::parse(&row.cell).ok()
}

/// Writes `report.txt` and the PNG charts into `out`; returns the digest.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let summary_path = out.join(SUMMARY_FILE);
    let rows = if summary_path.is_file() {
        read_summary(&summary_path)?
    } else {
        Vec::new()
    };
    let mut d = String::new();
    writeln!(d, "shiftlab report (config {})", cfg.hash()).unwrap();
    if rows.is_empty() {
        writeln!(d, "no data").unwrap();
        fs::create_dir_all(out)?;
        fs::write(out.join(REPORT_FILE), &d)?;
        return Ok(d);
    }

    writeln!(
        d,
        "\n{:<34} {:>4} {:>14} {:>14} {:>14} {:>16} {:>14}",
        "cell", "n", "Reward", "Dev %", "Recons.", "Wass.", "SSIM"
    )
    .unwrap();
    for r in &rows {
        let f = |(m, s): (f64, f64), p: usize| format!("{m:.p$}±{s:.p$}");
        writeln!(
            d,
            "{:<34} {:>4} {:>14} {:>14} {:>14} {:>16} {:>14}",
            r.cell,
            r.episodes,
            f(r.reward, 2),
            f(r.deviation_pct, 1),
            f(r.recon, 3),
            f(r.wasserstein, 4),
            f(r.ssim, 3)
        )
        .unwrap();
    }
    bar_chart(&rows.iter().map(|r| r.reward.0).collect::<Vec<_>>())
        .save(out.join("reward_by_cell.png"))?;
    writeln!(d, "\nreward_by_cell.png: one bar per row above, in order.").unwrap();

    let base_g2 = cfg.attack.gamma2;
    let mut sweep: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            let c = cell_of(r)?;
            (c.variant == Variant::ShiftO
                && c.defense == DefenseKind::None
                && c.mods.realism.unwrap_or(cfg.attack.realism)
                && c.mods.xi.is_none())
            .then(|| {
                (
                    c.mods.gamma2.unwrap_or(base_g2),
                    r.reward.0,
                    r.deviation_pct.0,
                )
            })
        })
        .collect();
    sweep.sort_by(|a, b| a.0.total_cmp(&b.0));
    sweep.dedup_by(|a, b| a.0 == b.0);
    if sweep.len() >= 2 {
        line_chart(&[sweep.iter().map(|s| (s.0, s.1)).collect()])
            .save(out.join("gamma2_sweep.png"))?;
        writeln!(
            d,
            "\ngamma2_sweep.png: SHIFT-O reward against Γ2 (no defense)."
        )
        .unwrap();
        for (g, r, dev) in &sweep {
            writeln!(d, "  Γ2 = {g:<5} reward {r:.2}  deviation {dev:.1}%").unwrap();
        }
        let nonincreasing = sweep.windows(2).all(|w| w[1].1 <= w[0].1);
        writeln!(
            d,
            "  reward nonincreasing in Γ2: {}",
            if nonincreasing { "yes" } else { "no" }
        )
        .unwrap();
    } else {
        writeln!(
            d,
            "\nno Γ2 sweep in the summary (add cells such as shift-o:g2=4xnone)."
        )
        .unwrap();
    }

    let logs = read_all_logs(out)?;
    let parsed: Vec<(Cell, &Vec<TrajectoryLog>)> = logs
        .iter()
        .filter_map(|(k, v)| Some((Cell::parse(k).ok()?, v)))
        .collect();
    let pick = |realism: bool| {
        parsed.iter().find(|(c, _)| {
            c.variant == Variant::ShiftO
                && c.defense == DefenseKind::None
                && c.mods.realism.unwrap_or(cfg.attack.realism) == realism
                && c.mods.gamma2.is_none_or(|g| g == base_g2)
                && c.mods.xi.is_none()
        })
    };
    if let (Some(on), Some(off)) = (pick(true), pick(false)) {
        let (a, b) = (recon_curve(on.1), recon_curve(off.1));
        line_chart(&[a.clone(), b.clone()]).save(out.join("realism_curves.png"))?;
        let m = |c: &[(f64, f64)]| mean(&c.iter().map(|p| p.1).collect::<Vec<_>>());
        writeln!(d, "\nrealism_curves.png: SHIFT-O reconstruction error by attacked step, realism on (blue, mean {:.3}) vs off (red, mean {:.3}).", m(&a), m(&b)).unwrap();
    } else {
        writeln!(
            d,
            "\nno realism on/off pair in the logs (add shift-o:realism=offxnone)."
        )
        .unwrap();
    }

    let groups: Vec<(String, Vec<f64>)> = parsed
        .iter()
        .filter(|(c, _)| {
            c.defense == DefenseKind::None
                && c.variant != Variant::None
                && c.mods == Default::default()
        })
        .map(|(c, ls)| {
            (
                c.to_string(),
                ls.iter()
                    .flat_map(|l| {
                        l.steps
                            .iter()
                            .filter(|s| s.attacked)
                            .filter_map(|s| s.metrics.get(slot::L2_TRUE).copied())
                    })
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if !groups.is_empty() {
        let (img, counts) = histograms(&groups.iter().map(|g| g.1.clone()).collect::<Vec<_>>(), 20);
        img.save(out.join("l2_histogram.png"))?;
        writeln!(
            d,
            "\nl2_histogram.png: L2 distance of attacked frames to the true frame, 20 shared bins."
        )
        .unwrap();
        for (i, ((name, v), c)) in groups.iter().zip(&counts).enumerate() {
            writeln!(
                d,
                "  colour {i}: {name:<16} n {:<5} mean {:.3}  counts {c:?}",
                v.len(),
                mean(v)
            )
            .unwrap();
        }
    }
    fs::write(out.join(REPORT_FILE), &d)?;
    Ok(d)
}
