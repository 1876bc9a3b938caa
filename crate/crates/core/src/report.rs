//! Training history export: CSV and SVG learning curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{EpochRecord, TrainingHistory};

pub const HISTORY_HEADER: &str = "epoch,phase,train_loss,train_acc,val_loss,val_acc";

/// Reals are printed with 17 significant digits so they parse back exactly.
fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn history_csv(history: &TrainingHistory) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in &history.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.phase,
            real(r.train_loss),
            real(r.train_acc),
            real(r.val_loss),
            real(r.val_acc)
        );
    }
    s
}

pub fn write_history_csv(history: &TrainingHistory, path: &Path) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

pub fn parse_history_csv(text: &str, path: &Path) -> Result<TrainingHistory> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(bad(format!("expected header `{HISTORY_HEADER}`")));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let row = || bad(format!("malformed row {}: `{line}`", i + 2));
        if f.len() != 6 {
            return Err(row());
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| row());
        records.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| row())?,
            phase: f[1].parse().map_err(|_| row())?,
            train_loss: num(2)?,
            train_acc: num(3)?,
            val_loss: num(4)?,
            val_acc: num(5)?,
        });
    }
    Ok(TrainingHistory { records })
}

pub fn read_history_csv(path: &Path) -> Result<TrainingHistory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_history_csv(&text, path)
}

/// Tick step from {1, 2, 5} x 10^k giving at most about six ticks.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let step = nice_step(hi - lo);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn label(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

const CHART_W: f64 = 440.0;
const CHART_H: f64 = 300.0;
const MARGIN: f64 = 55.0;

fn chart(
    svg: &mut String,
    id: &str,
    title: &str,
    x0: f64,
    history: &TrainingHistory,
    pick: fn(&EpochRecord) -> (f64, f64),
) {
    let n = history.records.len();
    let (lo, hi, step) = axis_range(history.records.iter().flat_map(|r| {
        let (a, b) = pick(r);
        [a, b]
    }));
    let (left, top) = (x0 + MARGIN, 40.0);
    let (pw, ph) = (CHART_W - MARGIN - 15.0, CHART_H - 60.0);
    let px = |epoch: usize| {
        if n <= 1 {
            left + pw / 2.0
        } else {
            left + (epoch - 1) as f64 / (n - 1) as f64 * pw
        }
    };
    let py = |v: f64| top + (hi - v) / (hi - lo) * ph;

    let _ = writeln!(svg, r#"<g id="{id}" class="chart">"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{title}</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
    );
    let mut v = lo;
    while v <= hi + step * 1e-6 {
        let y = py(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{left:.1}" y2="{y:.1}" stroke="#444"/><text class="ytick" x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##,
            left - 5.0,
            left - 8.0,
            y + 4.0,
            label(v, step)
        );
        v += step;
    }
    let xstep = n.div_ceil(10).max(1);
    for epoch in (1..=n).filter(|e| (e - 1) % xstep == 0 || *e == n) {
        let x = px(epoch);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text class="xtick" x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{epoch}</text>"##,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">epoch</text>"#,
        left + pw / 2.0,
        top + ph + 36.0
    );
    for (series, color, which) in [("train", "#1f77b4", 0), ("validation", "#d62728", 1)] {
        let points: Vec<String> = history
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let (a, b) = pick(r);
                format!("{:.2},{:.2}", px(i + 1), py(if which == 0 { a } else { b }))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-series="{series}" fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{series}</title></polyline>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 16.0 * which as f64;
        let lx = left + pw - 110.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text class="legend" x="{:.1}" y="{:.1}" font-size="12">{series}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    let _ = writeln!(svg, "</g>");
}

/// Two side-by-side charts (accuracy, loss), each with a train and a
/// validation series over epochs `1..=N`.
pub fn curves_svg(history: &TrainingHistory) -> Result<String> {
    if history.records.is_empty() {
        return Err(Error::Data("cannot plot an empty history".into()));
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#,
        w = 2.0 * CHART_W,
        h = CHART_H
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    chart(
        &mut svg,
        "accuracy",
        "Training and validation accuracy",
        0.0,
        history,
        |r| (r.train_acc, r.val_acc),
    );
    chart(
        &mut svg,
        "loss",
        "Training and validation loss",
        CHART_W,
        history,
        |r| (r.train_loss, r.val_loss),
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn render_curves_svg(history: &TrainingHistory, path: &Path) -> Result<()> {
    fs::write(path, curves_svg(history)?).map_err(|e| Error::io(path, e))
}
