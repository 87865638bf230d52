//! SVG rendering of prediction traces: one panel per OSATS dimension with
//! gesture bands behind the predicted curves.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ingest::{GestureSegment, OSATS_DIMS, OSATS_NAMES};
use crate::trainer::PredictionTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("no trace rows to render")]
    EmptyTrace,
    #[error("dimension {0} is outside 1..=6")]
    BadDimension(usize),
}

const WIDTH: f64 = 800.0;
const PANEL_HEIGHT: f64 = 150.0;
const GAP: f64 = 30.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 50.0;
const MODEL_COLORS: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];
const GESTURE_COLORS: [&str; 6] = [
    "#fde0dd", "#e0ecf4", "#e5f5e0", "#fee6ce", "#efedf5", "#ffffcc",
];

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn gesture_color(index: u8) -> &'static str {
    GESTURE_COLORS[(index as usize + GESTURE_COLORS.len() - 1) % GESTURE_COLORS.len()]
}

/// Options for [`render_trace`].
#[derive(Clone, Debug)]
pub struct TraceFigure<'a> {
    /// One trace per model, all over the same trial.
    pub traces: &'a [PredictionTrace],
    pub gestures: &'a [GestureSegment],
    /// 1-based OSATS dimensions, one panel each.
    pub dims: &'a [usize],
    pub rate_hz: f64,
}

/// Stacked panels with y fixed to [1, 5]: gesture bands, the ground-truth
/// score as a dashed line and one polyline per model.
pub fn render_trace(fig: &TraceFigure) -> Result<String, ReportError> {
    if fig.traces.iter().all(|t| t.rows.is_empty()) || fig.dims.is_empty() {
        return Err(ReportError::EmptyTrace);
    }
    if let Some(&d) = fig.dims.iter().find(|&&d| !(1..=OSATS_DIMS).contains(&d)) {
        return Err(ReportError::BadDimension(d));
    }
    let t_end = fig
        .traces
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| r.time_s))
        .chain(
            fig.gestures
                .iter()
                .map(|g| (g.end_frame + 1) as f64 / fig.rate_hz),
        )
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let plot_w = WIDTH - LEFT - RIGHT;
    let height = TOP + fig.dims.len() as f64 * (PANEL_HEIGHT + GAP) + 20.0;
    let x = |t: f64| LEFT + plot_w * t / t_end;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect class="background" width="{WIDTH}" height="{height}" fill="white"/>"#
    )
    .unwrap();
    legend(&mut s, fig);

    for (i, &d) in fig.dims.iter().enumerate() {
        let top = TOP + i as f64 * (PANEL_HEIGHT + GAP);
        let y = |v: f64| top + PANEL_HEIGHT * (5.0 - v.clamp(1.0, 5.0)) / 4.0;
        writeln!(s, r#"<g class="panel" data-dim="{d}">"#).unwrap();
        writeln!(
            s,
            r#"<text class="panel-title" x="{LEFT}" y="{:.2}">{}</text>"#,
            top - 6.0,
            escape(OSATS_NAMES[d - 1])
        )
        .unwrap();
        for g in fig.gestures {
            let (x0, x1) = (
                x(g.start_frame as f64 / fig.rate_hz),
                x((g.end_frame + 1) as f64 / fig.rate_hz),
            );
            writeln!(
                s,
                r#"<rect class="gesture-band" data-gesture="{}" x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{PANEL_HEIGHT:.2}" fill="{}"/>"#,
                g.label,
                (x1 - x0).max(0.0),
                gesture_color(g.label.index())
            )
            .unwrap();
        }
        writeln!(
            s,
            r##"<rect class="frame" x="{LEFT}" y="{top:.2}" width="{plot_w:.2}" height="{PANEL_HEIGHT:.2}" fill="none" stroke="#444"/>"##
        )
        .unwrap();
        for v in 1..=5 {
            let yy = y(v as f64);
            writeln!(
                s,
                r##"<text class="tick" x="{:.2}" y="{:.2}" text-anchor="end">{v}</text>"##,
                LEFT - 6.0,
                yy + 4.0
            )
            .unwrap();
        }
        if let Some(truth) = fig.traces.iter().find_map(|t| t.truth) {
            let yy = y(truth[d - 1]);
            writeln!(
                s,
                r##"<line class="truth" x1="{LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#000" stroke-dasharray="6 4"/>"##,
                LEFT + plot_w
            )
            .unwrap();
        }
        for (m, trace) in fig.traces.iter().enumerate() {
            let points: Vec<String> = trace
                .rows
                .iter()
                .map(|r| format!("{:.2},{:.2}", x(r.time_s), y(r.scores[d - 1])))
                .collect();
            writeln!(
                s,
                r#"<polyline class="trace" data-model="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                escape(&trace.model),
                points.join(" "),
                MODEL_COLORS[m % MODEL_COLORS.len()]
            )
            .unwrap();
        }
        writeln!(s, "</g>").unwrap();
    }
    writeln!(
        s,
        r#"<text class="axis-label" x="{:.2}" y="{:.2}" text-anchor="middle">time (s)</text>"#,
        LEFT + plot_w / 2.0,
        height - 6.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

enum Swatch {
    Line { color: &'static str, dashed: bool },
    Band(&'static str),
}

fn legend(s: &mut String, fig: &TraceFigure) {
    let mut items: Vec<(Swatch, String)> = Vec::new();
    if fig.traces.iter().any(|t| t.truth.is_some()) {
        items.push((
            Swatch::Line {
                color: "#000",
                dashed: true,
            },
            "ground truth".into(),
        ));
    }
    for (m, t) in fig.traces.iter().enumerate() {
        let label = if t.model.is_empty() {
            format!("model {}", m + 1)
        } else {
            t.model.clone()
        };
        let color = MODEL_COLORS[m % MODEL_COLORS.len()];
        items.push((
            Swatch::Line {
                color,
                dashed: false,
            },
            label,
        ));
    }
    let mut seen: Vec<u8> = fig.gestures.iter().map(|g| g.label.index()).collect();
    seen.sort_unstable();
    seen.dedup();
    items.extend(
        seen.into_iter()
            .map(|g| (Swatch::Band(gesture_color(g)), format!("G{g}"))),
    );

    writeln!(s, r#"<g class="legend">"#).unwrap();
    let mut x = LEFT;
    for (swatch, label) in items {
        match swatch {
            Swatch::Line { color, dashed } => writeln!(
                s,
                r#"<line x1="{x:.2}" y1="14" x2="{:.2}" y2="14" stroke="{color}" stroke-width="2"{}/>"#,
                x + 18.0,
                if dashed { r#" stroke-dasharray="6 4""# } else { "" }
            ),
            Swatch::Band(color) => writeln!(
                s,
                r#"<rect class="legend-swatch" x="{x:.2}" y="8" width="18" height="12" fill="{color}"/>"#
            ),
        }
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="18">{}</text>"#,
            x + 22.0,
            escape(&label)
        )
        .unwrap();
        x += 30.0 + 7.0 * label.chars().count() as f64;
    }
    writeln!(s, "</g>").unwrap();
}

/// Gesture runs recovered from the labels on trace rows, in frame units.
pub fn gestures_from_trace(trace: &PredictionTrace) -> Vec<GestureSegment> {
    let mut out: Vec<GestureSegment> = Vec::new();
    for r in &trace.rows {
        let Some(label) = r.gesture else { continue };
        match out.last_mut() {
            Some(last) if last.label == label => last.end_frame = r.window_end_frame,
            _ => out.push(GestureSegment {
                start_frame: r.window_end_frame,
                end_frame: r.window_end_frame,
                label,
            }),
        }
    }
    out
}
