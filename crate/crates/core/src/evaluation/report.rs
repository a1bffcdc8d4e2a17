//! Aggregation of per-target verdicts into cell reports, plus CSV, JSON and
//! PNG outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::{LossKind, Strategy};
use crate::error::Result;
use crate::io::{write_atomic, write_json};

/// Outcome of one (strategy, loss, target, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVerdict {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub target: u32,
    pub seed: u64,
    pub answer: String,
    pub decoded: String,
    pub matched: bool,
    pub top1: Option<bool>,
    pub top5: Option<bool>,
    pub delta_eval: Option<f64>,
    pub delta_face: Option<f64>,
    /// Set when the target could not be scored; such targets are excluded.
    pub error: Option<String>,
}

/// Metrics for one (strategy, loss) cell. Rates are `None` when the cell has
/// no scored targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub strategy: Strategy,
    pub loss: LossKind,
    pub match_rate: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub delta_eval: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_face: Option<f64>,
    pub n_targets: usize,
    pub n_runs: usize,
    pub excluded: usize,
    /// No run of this cell was found.
    pub missing: bool,
    /// Externally imported judge accuracy.
    #[serde(rename = "AttAcc_M", default, skip_serializing_if = "Option::is_none")]
    pub attacc_m: Option<f64>,
    /// Externally imported user-study accuracy.
    #[serde(rename = "AttAcc_H", default, skip_serializing_if = "Option::is_none")]
    pub attacc_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub config_hash: String,
    pub cells: Vec<EvaluationReport>,
    pub verdicts: Vec<TargetVerdict>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn cell(config_hash: &str, strategy: Strategy, loss: LossKind, verdicts: &[&TargetVerdict]) -> EvaluationReport {
    let scored: Vec<&&TargetVerdict> = verdicts.iter().filter(|v| v.error.is_none()).collect();
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    EvaluationReport {
        config_hash: config_hash.to_string(),
        strategy,
        loss,
        match_rate: mean(scored.iter().map(|v| flag(v.matched))),
        top1: mean(scored.iter().filter_map(|v| v.top1).map(flag)),
        top5: mean(scored.iter().filter_map(|v| v.top5).map(flag)),
        delta_eval: mean(scored.iter().filter_map(|v| v.delta_eval)),
        delta_face: mean(scored.iter().filter_map(|v| v.delta_face)),
        n_targets: verdicts.iter().map(|v| v.target).collect::<BTreeSet<_>>().len(),
        n_runs: verdicts.len(),
        excluded: verdicts.len() - scored.len(),
        missing: verdicts.is_empty(),
        attacc_m: None,
        attacc_h: None,
    }
}

/// One cell per entry of `grid`, in grid order. Cells without verdicts are
/// marked missing rather than filled with defaults.
pub fn build_report(verdicts: &[TargetVerdict], grid: &[(Strategy, LossKind)], config_hash: &str) -> GridReport {
    let mut sorted = verdicts.to_vec();
    sorted.sort_by(|a, b| {
        (a.strategy.as_str(), a.loss.as_str(), a.target, a.seed).cmp(&(b.strategy.as_str(), b.loss.as_str(), b.target, b.seed))
    });
    let cells = grid
        .iter()
        .map(|&(s, l)| {
            let vs: Vec<&TargetVerdict> = sorted.iter().filter(|v| v.strategy == s && v.loss == l).collect();
            cell(config_hash, s, l, &vs)
        })
        .collect();
    GridReport {
        config_hash: config_hash.to_string(),
        cells,
        verdicts: sorted,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "missing".into())
}

fn opt_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

impl GridReport {
    pub fn metrics_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(&self.cells)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// One row per cell.
    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "loss",
            "match_rate",
            "top1",
            "top5",
            "delta_eval",
            "delta_face",
            "n_targets",
            "n_runs",
            "excluded",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.strategy.to_string(),
                c.loss.to_string(),
                opt(c.match_rate),
                opt(c.top1),
                opt(c.top5),
                opt(c.delta_eval),
                opt(c.delta_face),
                c.n_targets.to_string(),
                c.n_runs.to_string(),
                c.excluded.to_string(),
            ])?;
        }
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error().into())
    }

    pub fn per_target_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "loss",
            "target",
            "seed",
            "answer",
            "decoded",
            "matched",
            "top1",
            "top5",
            "delta_eval",
            "delta_face",
            "error",
        ])?;
        for v in &self.verdicts {
            w.write_record([
                v.strategy.to_string(),
                v.loss.to_string(),
                v.target.to_string(),
                v.seed.to_string(),
                v.answer.clone(),
                v.decoded.clone(),
                v.matched.to_string(),
                opt_bool(v.top1),
                opt_bool(v.top5),
                v.delta_eval.map(|x| x.to_string()).unwrap_or_default(),
                v.delta_face.map(|x| x.to_string()).unwrap_or_default(),
                v.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error().into())
    }

    /// Writes `metrics.json`, `summary.csv`, `per_target.csv`,
    /// `match_rate.png` and, when curves are given, `loss_curves.png`.
    pub fn write(&self, dir: &Path, curves: &BTreeMap<String, Vec<f64>>) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            write_atomic(&p, &bytes)?;
            written.push(p);
            Ok(())
        };
        put("metrics.json", self.metrics_json()?)?;
        put("summary.csv", self.summary_csv()?)?;
        put("per_target.csv", self.per_target_csv()?)?;
        let rates: Vec<Option<f64>> = self.cells.iter().map(|c| c.match_rate).collect();
        put("match_rate.png", png_bytes(&bar_chart(&rates))?)?;
        if !curves.is_empty() {
            let series: Vec<&[f64]> = curves.values().map(Vec::as_slice).collect();
            put("loss_curves.png", png_bytes(&line_chart(&series))?)?;
        }
        Ok(written)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// One bar per value on a [0, 1] axis; missing values are drawn as a thin
/// grey hatch at the baseline.
pub fn bar_chart(values: &[Option<f64>]) -> RgbImage {
    let (w, h, margin, bar) = (40 + 30 * values.len() as u32, 220u32, 20u32, 20u32);
    let mut img = RgbImage::from_pixel(w.max(60), h, Rgb([255, 255, 255]));
    let base = h - margin;
    for x in margin..img.width() - margin / 2 {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for y in margin..=base {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    for (i, v) in values.iter().enumerate() {
        let x0 = margin + 10 + 30 * i as u32;
        match v {
            Some(v) => {
                let height = (v.clamp(0.0, 1.0) * (base - margin) as f64).round() as u32;
                let color = Rgb(PALETTE[(i / 3) % PALETTE.len()]);
                for x in x0..x0 + bar {
                    for y in base - height..base {
                        img.put_pixel(x, y, color);
                    }
                }
            }
            None => {
                for x in (x0..x0 + bar).step_by(3) {
                    for y in base - 6..base {
                        img.put_pixel(x, y, Rgb([160, 160, 160]));
                    }
                }
            }
        }
    }
    img
}

/// Overlaid polylines, each series scaled to the shared value range.
pub fn line_chart(series: &[&[f64]]) -> RgbImage {
    let (w, h, margin) = (420u32, 260u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let finite = series.iter().flat_map(|s| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let longest = series.iter().map(|s| s.len()).max().unwrap_or(0).max(2);
    let to_px = |i: usize, v: f64| {
        let x = margin as f64 + i as f64 / (longest - 1) as f64 * (w - 2 * margin) as f64;
        let y = (h - margin) as f64 - (v - lo) / span * (h - 2 * margin) as f64;
        (x, y)
    };
    for x in margin..w - margin {
        img.put_pixel(x, h - margin, Rgb([0, 0, 0]));
    }
    for y in margin..=h - margin {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for i in 1..s.len() {
            if !(s[i - 1].is_finite() && s[i].is_finite()) {
                continue;
            }
            let (x0, y0) = to_px(i - 1, s[i - 1]);
            let (x1, y1) = to_px(i, s[i]);
            let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for t in 0..=n {
                let f = t as f64 / n as f64;
                let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
                if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(strategy: Strategy, target: u32, matched: bool, top1: bool) -> TargetVerdict {
        TargetVerdict {
            strategy,
            loss: LossKind::Lom,
            target,
            seed: 0,
            answer: "a b".into(),
            decoded: if matched { "a b".into() } else { "c".into() },
            matched,
            top1: Some(top1),
            top5: Some(true),
            delta_eval: Some(1.0),
            delta_face: None,
            error: None,
        }
    }

    fn full_grid() -> Vec<(Strategy, LossKind)> {
        Strategy::ALL
            .iter()
            .flat_map(|&s| LossKind::ALL.iter().map(move |&l| (s, l)))
            .collect()
    }

    #[test]
    fn empty_results_give_missing_cells() {
        let r = build_report(&[], &full_grid(), "h");
        assert_eq!(r.cells.len(), 12);
        assert!(r.cells.iter().all(|c| c.missing && c.n_targets == 0 && c.match_rate.is_none()));
        let summary = String::from_utf8(r.summary_csv().unwrap()).unwrap();
        assert_eq!(summary.lines().count(), 13);
        assert!(summary.contains("missing"));
    }

    #[test]
    fn cell_rates_and_order_independence() {
        let vs = vec![
            verdict(Strategy::Smi, 0, true, true),
            verdict(Strategy::Smi, 1, true, false),
            verdict(Strategy::Smi, 2, false, false),
            verdict(Strategy::Smi, 3, true, true),
        ];
        let grid = [(Strategy::Smi, LossKind::Lom)];
        let a = build_report(&vs, &grid, "h");
        let c = &a.cells[0];
        assert_eq!(c.match_rate, Some(0.75));
        assert_eq!(c.top1, Some(0.5));
        assert!(c.top1 <= c.top5);
        let mut rev = vs.clone();
        rev.reverse();
        let b = build_report(&rev, &grid, "h");
        assert_eq!(a.metrics_json().unwrap(), b.metrics_json().unwrap());
        let json = String::from_utf8(a.metrics_json().unwrap()).unwrap();
        assert!(!json.contains("delta_face"));
        assert!(!json.contains("AttAcc_M"));
    }

    #[test]
    fn errored_targets_are_excluded() {
        let mut bad = verdict(Strategy::Tmi, 4, false, false);
        bad.error = Some("no private images".into());
        let r = build_report(&[bad, verdict(Strategy::Tmi, 5, true, true)], &[(Strategy::Tmi, LossKind::Lom)], "h");
        assert_eq!(r.cells[0].excluded, 1);
        assert_eq!(r.cells[0].match_rate, Some(1.0));
    }

    #[test]
    fn plots_are_written() {
        let r = build_report(&[verdict(Strategy::Smi, 0, true, true)], &full_grid(), "h");
        let dir = tempfile::tempdir().unwrap();
        let mut curves = BTreeMap::new();
        curves.insert("smi".to_string(), vec![3.0, 2.0, 1.5, 1.0]);
        let files = r.write(dir.path(), &curves).unwrap();
        assert_eq!(files.len(), 5);
        let img = image::open(dir.path().join("match_rate.png")).unwrap();
        assert!(img.width() > 0);
    }
}
