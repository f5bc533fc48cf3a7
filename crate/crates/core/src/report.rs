//! Run output: per-seed `metrics.csv`, `summary.json`, `run.json`, SVG
//! accuracy-vs-step charts and anomaly heatmap PNGs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::data::write_rgb;
use crate::error::{Error, Result};
use crate::metrics::{forgetting_metric, MetricKind, MetricsHistory, ObjectMetrics};
use crate::run::{step_means, Heatmap, MeanStd, RunReport};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,object,iauroc,pauroc,aupro";

/// One row per `(step, object)`; floats use the shortest exact repr.
pub fn metrics_csv(history: &MetricsHistory) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (step, object, m) in history.records() {
        let _ = writeln!(s, "{step},{object},{},{},{}", m.iauroc, m.pauroc, m.aupro);
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<MetricsHistory> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Precondition(format!("metrics CSV must start with {CSV_HEADER:?}")));
    }
    let mut h = MetricsHistory::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Precondition(format!("metrics CSV line {}: {line:?}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        h.insert(
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            ObjectMetrics {
                iauroc: num(2)?,
                pauroc: num(3)?,
                aupro: num(4)?,
            },
        );
    }
    Ok(h)
}

fn fm_value(v: Option<MeanStd>) -> Value {
    match v {
        Some(m) => json!({ "mean": m.mean, "std": m.std }),
        None => json!("--"),
    }
}

pub fn summary_json(r: &RunReport) -> Value {
    let per_kind = |f: &dyn Fn(MetricKind) -> Value| -> Value {
        MetricKind::ALL.iter().map(|&k| (k.as_str().to_string(), f(k))).collect()
    };
    json!({
        "config_hash": r.config_hash,
        "setting": r.config.setting,
        "objects": r.object_names,
        "final": per_kind(&|k| {
            let m = r.final_mean.get(k);
            json!({ "mean": m.mean, "std": m.std })
        }),
        "forgetting": per_kind(&|k| fm_value(r.forgetting.get(k))),
        "seeds": r.seeds.iter().map(|s| json!({
            "seed": s.seed,
            "final": per_kind(&|k| json!(s.final_mean.get(k))),
            "forgetting": per_kind(&|k| s.forgetting.get(k).map_or(json!("--"), |v| json!(v))),
        })).collect::<Vec<_>>(),
        "metrics_digest": r.metrics_digest(),
        "wall_clock_secs": r.wall_clock_secs,
    })
}

/// Formats a forgetting value the way tables show it.
pub fn fm_display(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |x| format!("{x:.2}"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Mean metric over seen objects vs. step, one polyline per seed.
pub fn line_chart_svg(title: &str, series: &[(String, Vec<(usize, f64)>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let max_step = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).max().unwrap_or(0).max(1) as f64;
    let lo = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold(100.0f64, f64::min)
        .min(90.0);
    let lo = (lo / 10.0).floor() * 10.0;
    let x = |s: f64| pad + s / max_step * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / (100.0 - lo) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<polyline points="{pad},{} {pad},{} {},{}" fill="none" stroke="black"/>"#,
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    for k in 0..=max_step as usize {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{k}</text>"#,
            x(k as f64),
            h - pad + 18.0
        );
    }
    let mut v = lo;
    while v <= 100.0 + 1e-9 {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">{v:.0}</text>"#,
            pad - 6.0,
            y(v) + 4.0
        );
        v += 10.0;
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let p: Vec<String> = pts.iter().map(|&(st, val)| format!("{:.2},{:.2}", x(st as f64), y(val))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, p.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>"#,
            w - pad - 80.0,
            pad + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Three panels side by side: input RGB, min-max normalized score map, and
/// the ground-truth mask.
pub fn heatmap_panel(hm: &Heatmap) -> Tensor {
    let (h, w) = hm.rgb.hw();
    let m = hm.map.data();
    let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::from_fn(&[3, h, 3 * w], |i| {
        let c = i / (h * 3 * w);
        let (y, xx) = ((i / (3 * w)) % h, i % (3 * w));
        let (panel, x) = (xx / w, xx % w);
        let p = y * w + x;
        match panel {
            0 => hm.rgb.data()[c * h * w + p],
            1 => colormap((m[p] - lo) / span)[c],
            _ => hm.mask.as_ref().map_or(0.0, |mk| mk.data()[p]),
        }
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_tables(r: &RunReport, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for s in &r.seeds {
        let sd = dir.join(format!("seed_{}", s.seed));
        mkdir(&sd)?;
        write_text(&sd.join("metrics.csv"), &metrics_csv(&s.history))?;
    }
    let summary = serde_json::to_string_pretty(&summary_json(r)).expect("summary serializes");
    write_text(&dir.join("summary.json"), &(summary + "\n"))?;
    let charts = dir.join("charts");
    mkdir(&charts)?;
    for kind in MetricKind::ALL {
        let series: Vec<(String, Vec<(usize, f64)>)> = r
            .seeds
            .iter()
            .map(|s| {
                let pts = step_means(&s.history).into_iter().map(|(st, m)| (st, m.get(kind))).collect();
                (format!("seed {}", s.seed), pts)
            })
            .collect();
        let title = format!("{} vs. step ({})", kind.as_str(), r.config.setting);
        write_text(&charts.join(format!("{}.svg", kind.as_str())), &line_chart_svg(&title, &series))?;
    }
    Ok(())
}

/// Writes every report file under `dir`, replacing earlier output.
pub fn write_report(r: &RunReport, dir: &Path) -> Result<()> {
    write_tables(r, dir)?;
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    write_text(&dir.join("run.json"), &(json + "\n"))?;
    let heat = dir.join("heatmaps");
    if heat.exists() {
        fs::remove_dir_all(&heat).map_err(|e| Error::io(&heat, e))?;
    }
    if let Some(s) = r.seeds.first().filter(|s| !s.heatmaps.is_empty()) {
        mkdir(&heat)?;
        for hm in &s.heatmaps {
            let name = format!("{}_{:04}.png", r.object_names[hm.object], hm.index);
            write_rgb(&heat.join(name), &heatmap_panel(hm))?;
        }
    }
    Ok(())
}

pub fn read_run(dir: &Path) -> Result<RunReport> {
    let path = dir.join("run.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Precondition(format!("{}: {e}", path.display())))
}

/// Rebuilds CSV, summary and charts from `run.json` and checks that the
/// forgetting recomputed from each CSV matches the stored value.
pub fn regenerate(dir: &Path) -> Result<RunReport> {
    let r = read_run(dir)?;
    write_tables(&r, dir)?;
    for s in &r.seeds {
        let path = dir.join(format!("seed_{}", s.seed)).join("metrics.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h = parse_metrics_csv(&text)?;
        for kind in MetricKind::ALL {
            let from_csv = forgetting_metric(&h, kind).ok();
            if from_csv != s.forgetting.get(kind) {
                return Err(Error::Precondition(format!(
                    "seed {}: {} forgetting {from_csv:?} from CSV differs from stored {:?}",
                    s.seed,
                    kind.as_str(),
                    s.forgetting.get(kind)
                )));
            }
        }
    }
    Ok(r)
}
