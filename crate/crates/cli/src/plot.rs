use std::fmt::Write as _;
use std::path::PathBuf;

use aerolog_core::storage::{AggregateFn, AggregatePoint, FIELD_COUNT};
use aerolog_core::timefmt;
use anyhow::{anyhow, Context};
use chrono::{DateTime, Duration, Utc};
use clap::Args;

use crate::config::CliConfig;
use crate::export::{field_label, open_store};
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub channel: u64,
    /// Field number
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=FIELD_COUNT as i64))]
    pub field: u8,
    #[arg(long, value_parser = crate::parse_time)]
    pub start: Option<DateTime<Utc>>,
    #[arg(long, value_parser = crate::parse_time)]
    pub end: Option<DateTime<Utc>>,
    /// Aggregation window in seconds
    #[arg(long, default_value_t = 60, value_parser = clap::value_parser!(u32).range(1..))]
    pub window: u32,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 800)]
    pub width: u32,
    #[arg(long, default_value_t = 400)]
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct Chart<'a> {
    pub title: &'a str,
    pub y_label: &'a str,
    pub width: u32,
    pub height: u32,
}

const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 56.0;
const Y_TICKS: usize = 5;
const X_TICKS: usize = 5;

fn escape(s: &str) -> String {
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

/// Line chart of `points[i].mean` against `points[i].window_start`.
/// Output depends only on the inputs.
pub fn render_svg(points: &[AggregatePoint], chart: &Chart) -> String {
    let (w, h) = (f64::from(chart.width), f64::from(chart.height));
    let plot_w = (w - MARGIN_LEFT - MARGIN_RIGHT).max(1.0);
    let plot_h = (h - MARGIN_TOP - MARGIN_BOTTOM).max(1.0);
    let (x0, y0) = (MARGIN_LEFT, MARGIN_TOP + plot_h);

    let ms = |p: &AggregatePoint| p.window_start.timestamp_millis() as f64;
    let (t_lo, t_hi) = match (points.first(), points.last()) {
        (Some(a), Some(b)) => (ms(a), ms(b)),
        _ => (0.0, 0.0),
    };
    let mut v_lo = points.iter().map(|p| p.mean).fold(f64::INFINITY, f64::min);
    let mut v_hi = points.iter().map(|p| p.mean).fold(f64::NEG_INFINITY, f64::max);
    if !v_lo.is_finite() {
        (v_lo, v_hi) = (0.0, 1.0);
    }
    if v_hi - v_lo < 1e-9 {
        (v_lo, v_hi) = (v_lo - 1.0, v_hi + 1.0);
    } else {
        let pad = 0.05 * (v_hi - v_lo);
        (v_lo, v_hi) = (v_lo - pad, v_hi + pad);
    }
    let sx = |t: f64| {
        if t_hi > t_lo {
            x0 + (t - t_lo) / (t_hi - t_lo) * plot_w
        } else {
            x0 + plot_w / 2.0
        }
    };
    let sy = |v: f64| y0 - (v - v_lo) / (v_hi - v_lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        chart.width, chart.height, chart.width, chart.height
    );
    let _ = writeln!(s, "<title>{}</title>", escape(chart.title));
    let _ = writeln!(
        s,
        r#"<rect width="{}" height="{}" fill="white"/>"#,
        chart.width, chart.height
    );
    let _ = writeln!(
        s,
        r#"<text class="title" x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(chart.title)
    );

    s.push_str("<g class=\"grid\" stroke=\"#dddddd\">\n");
    for i in 0..Y_TICKS {
        let v = v_lo + (v_hi - v_lo) * i as f64 / (Y_TICKS - 1) as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}"/>"#,
            x0 + plot_w,
            y = sy(v)
        );
    }
    s.push_str("</g>\n");

    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{x0:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}"/><line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{MARGIN_TOP:.2}"/></g>"#,
        x0 + plot_w
    );

    s.push_str("<g class=\"y-ticks\" text-anchor=\"end\">\n");
    for i in 0..Y_TICKS {
        let v = v_lo + (v_hi - v_lo) * i as f64 / (Y_TICKS - 1) as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{v:.2}</text>"#, x0 - 6.0, sy(v) + 4.0);
    }
    s.push_str("</g>\n");

    s.push_str("<g class=\"x-ticks\" text-anchor=\"middle\">\n");
    let x_ticks = if t_hi > t_lo { X_TICKS } else { 1 };
    for i in 0..x_ticks {
        let t = if x_ticks == 1 {
            t_lo
        } else {
            t_lo + (t_hi - t_lo) * i as f64 / (x_ticks - 1) as f64
        };
        let label = DateTime::<Utc>::from_timestamp_millis(t.round() as i64)
            .map(|d| d.format("%H:%M:%S").to_string())
            .unwrap_or_default();
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{label}</text>"#, sx(t), y0 + 18.0);
    }
    s.push_str("</g>\n");

    let origin = points
        .first()
        .map(|p| timefmt::format_seconds(&p.window_start))
        .unwrap_or_default();
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle">time (UTC) from {origin}</text>"#,
        x0 + plot_w / 2.0,
        h - 12.0
    );
    let (lx, ly) = (18.0, MARGIN_TOP + plot_h / 2.0);
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="{lx:.2}" y="{ly:.2}" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"#,
        escape(chart.y_label)
    );

    let coords: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(ms(p)), sy(p.mean)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline class="series" fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
        coords.join(" ")
    );
    s.push_str("<g class=\"points\" fill=\"#1f77b4\">\n");
    for (p, c) in points.iter().zip(&coords) {
        let (cx, cy) = c.split_once(',').unwrap_or_default();
        let _ = writeln!(
            s,
            r#"<circle cx="{cx}" cy="{cy}" r="2.5" data-window-start="{}" data-count="{}" data-mean="{:?}"/>"#,
            timefmt::format_seconds(&p.window_start),
            p.count,
            p.mean
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

pub fn run(cfg: &CliConfig, args: &PlotArgs) -> CmdResult {
    let store = open_store(cfg)?;
    let field = usize::from(args.field);
    let meta = store.channel(args.channel)?;
    let label = field_label(&store, args.channel, field)?;
    let agg = store.aggregate(
        args.channel,
        field,
        Duration::seconds(i64::from(args.window)),
        args.start,
        args.end,
        AggregateFn::Mean,
    )?;
    if agg.points.is_empty() {
        return Err(Failure::usage(anyhow!(
            "channel {} has no parseable field{field} values in range",
            args.channel
        )));
    }
    if agg.skipped > 0 {
        eprintln!("warning: {} non-numeric values skipped", agg.skipped);
    }
    let title = format!("{}: {label}", meta.name);
    let svg = render_svg(
        &agg.points,
        &Chart {
            title: &title,
            y_label: &label,
            width: args.width,
            height: args.height,
        },
    );
    std::fs::write(&args.out, svg)
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(Failure::usage)?;
    eprintln!("wrote {} points to {}", agg.points.len(), args.out.display());
    Ok(())
}
