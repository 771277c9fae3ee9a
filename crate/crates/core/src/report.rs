//! Reproducible report artifacts: JSON with 17 significant digits, checks
//! that carry their tolerance, CSV tables and deterministic SVG plots.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};

/// Pretty JSON formatter printing every float as `{:.16e}`.
struct SigFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for SigFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{}", sig17(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{}", sig17(value as f64))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Compact variant of [`SigFormatter`].
struct CompactSig;

impl Formatter for CompactSig {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{}", sig17(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{}", sig17(value as f64))
    }
}

/// A float with 17 significant digits; round-trips exactly.
pub fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// JSON text with every float at 17 significant digits.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T, pretty: bool) -> Result<String> {
    let mut buf = Vec::new();
    if pretty {
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFormatter(PrettyFormatter::new()));
        value.serialize(&mut ser)?;
        buf.push(b'\n');
    } else {
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, CompactSig);
        value.serialize(&mut ser)?;
    }
    String::from_utf8(buf).map_err(|e| Error::Input(e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value, true)?)?;
    Ok(())
}

/// CSV with a header row and numbers at 17 significant digits.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Dimension(format!("row has {} fields, header has {}", r.len(), header.len())));
        }
        w.write_record(r.iter().map(|v| sig17(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// How a measured value is judged.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// `value ≤ bound`.
    AtMost { bound: f64 },
    /// `|value − expected| ≤ tolerance`.
    Near { expected: f64, tolerance: f64 },
    /// `lo ≤ value ≤ hi`.
    Within { lo: f64, hi: f64 },
}

/// A quantitative claim with the tolerance it was judged against.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub criterion: Criterion,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, pass: value <= bound, criterion: Criterion::AtMost { bound } }
    }

    pub fn near(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            pass: (value - expected).abs() <= tolerance,
            criterion: Criterion::Near { expected, tolerance },
        }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Check { name: name.into(), value, pass: lo <= value && value <= hi, criterion: Criterion::Within { lo, hi } }
    }
}

/// Summary written as `report.json` by every command.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub inputs: serde_json::Value,
    /// Descriptive values that are not judged (sizes, timings excluded).
    pub info: serde_json::Map<String, serde_json::Value>,
    pub checks: Vec<Check>,
    pub outputs: Vec<String>,
    pub pass: bool,
}

impl Report {
    pub fn new<T: Serialize>(command: &str, inputs: &T) -> Result<Self> {
        Ok(Report {
            command: command.into(),
            inputs: serde_json::to_value(inputs)?,
            info: serde_json::Map::new(),
            checks: Vec::new(),
            outputs: Vec::new(),
            pass: true,
        })
    }

    pub fn info<T: Serialize>(&mut self, key: &str, value: T) -> Result<()> {
        self.info.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn check(&mut self, c: Check) {
        self.pass &= c.pass;
        self.checks.push(c);
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.into());
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    LogLog,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesStyle {
    /// Point glyphs joined by a polyline.
    Markers,
    /// Polyline only, e.g. a fitted curve.
    Line,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub label: String,
    pub style: SeriesStyle,
}

impl Series {
    pub fn markers(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { points, label: label.into(), style: SeriesStyle::Markers }
    }

    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { points, label: label.into(), style: SeriesStyle::Line }
    }
}

pub const CANVAS: (f64, f64) = (640.0, 480.0);
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 30.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Data-to-pixel map of a plot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotFrame {
    pub scale: Scale,
    /// Range of the (possibly log10) x and y coordinates.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl PlotFrame {
    pub fn fit(series: &[Series], scale: Scale) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in series {
            for &(x, y) in &s.points {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::Domain("plot data must be finite".into()));
                }
                if scale == Scale::LogLog && (x <= 0.0 || y <= 0.0) {
                    return Err(Error::Domain(format!("log-log plot needs positive data, got ({x}, {y})")));
                }
                let (tx, ty) = transform(scale, x, y);
                xs.push(tx);
                ys.push(ty);
            }
        }
        if xs.is_empty() {
            return Err(Error::InsufficientData("nothing to plot".into()));
        }
        Ok(PlotFrame { scale, x_range: padded(&xs), y_range: padded(&ys) })
    }

    /// Pixels per unit of transformed x and y.
    pub fn pixels_per_unit(&self) -> (f64, f64) {
        let (w, h) = plot_area();
        (w / (self.x_range.1 - self.x_range.0), h / (self.y_range.1 - self.y_range.0))
    }

    /// Pixel position of a data point; y grows downward.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let (tx, ty) = transform(self.scale, x, y);
        let (sx, sy) = self.pixels_per_unit();
        (MARGIN.0 + (tx - self.x_range.0) * sx, MARGIN.2 + (self.y_range.1 - ty) * sy)
    }
}

fn plot_area() -> (f64, f64) {
    (CANVAS.0 - MARGIN.0 - MARGIN.1, CANVAS.1 - MARGIN.2 - MARGIN.3)
}

fn transform(scale: Scale, x: f64, y: f64) -> (f64, f64) {
    match scale {
        Scale::LogLog => (x.log10(), y.log10()),
        Scale::Linear => (x, y),
    }
}

fn padded(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn ticks(range: (f64, f64), scale: Scale) -> Vec<f64> {
    match scale {
        Scale::LogLog => {
            let (a, b) = (range.0.ceil() as i64, range.1.floor() as i64);
            let mut t: Vec<f64> = (a..=b).map(|k| k as f64).collect();
            if t.len() < 2 {
                t = vec![range.0, range.1];
            }
            t
        }
        Scale::Linear => (0..=4).map(|k| range.0 + (range.1 - range.0) * k as f64 / 4.0).collect(),
    }
}

fn tick_label(v: f64, scale: Scale) -> String {
    match scale {
        Scale::LogLog if v.fract() == 0.0 => format!("1e{}", v as i64),
        Scale::LogLog => format!("{:.3e}", 10f64.powf(v)),
        Scale::Linear => format!("{v:.3}"),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Axis titles of a plot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labels {
    pub title: String,
    pub x: String,
    pub y: String,
}

/// SVG text of the plot; identical inputs give identical bytes.
pub fn render_svg(series: &[Series], scale: Scale, labels: &Labels) -> Result<String> {
    let frame = PlotFrame::fit(series, scale)?;
    let (w, h) = plot_area();
    let mut s = String::new();
    let mut line = |t: String| {
        s.push_str(&t);
        s.push('\n');
    };
    line(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
        CANVAS.0, CANVAS.1, CANVAS.0, CANVAS.1
    ));
    line(format!(r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#, CANVAS.0, CANVAS.1));
    line(format!(
        r#"<rect x="{:.3}" y="{:.3}" width="{w:.3}" height="{h:.3}" fill="none" stroke="black"/>"#,
        MARGIN.0, MARGIN.2
    ));
    let (sx, sy) = frame.pixels_per_unit();
    for t in ticks(frame.x_range, scale) {
        let px = MARGIN.0 + (t - frame.x_range.0) * sx;
        let base = MARGIN.2 + h;
        line(format!(r#"<line x1="{px:.3}" y1="{base:.3}" x2="{px:.3}" y2="{:.3}" stroke="black"/>"#, base + 5.0));
        line(format!(
            r#"<text x="{px:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
            base + 18.0,
            tick_label(t, scale)
        ));
    }
    for t in ticks(frame.y_range, scale) {
        let py = MARGIN.2 + (frame.y_range.1 - t) * sy;
        line(format!(r#"<line x1="{:.3}" y1="{py:.3}" x2="{:.3}" y2="{py:.3}" stroke="black"/>"#, MARGIN.0 - 5.0, MARGIN.0));
        line(format!(
            r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"#,
            MARGIN.0 - 8.0,
            py + 4.0,
            tick_label(t, scale)
        ));
    }
    line(format!(
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
        MARGIN.0 + w / 2.0,
        CANVAS.1 - 12.0,
        escape(&labels.x)
    ));
    line(format!(
        r#"<text x="14" y="{:.3}" text-anchor="middle" transform="rotate(-90 14 {:.3})">{}</text>"#,
        MARGIN.2 + h / 2.0,
        MARGIN.2 + h / 2.0,
        escape(&labels.y)
    ));
    line(format!(
        r#"<text x="{:.3}" y="18" text-anchor="middle">{}</text>"#,
        MARGIN.0 + w / 2.0,
        escape(&labels.title)
    ));
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let px: Vec<(f64, f64)> = ser.points.iter().map(|&(x, y)| frame.map(x, y)).collect();
        if px.len() >= 2 {
            let pts: Vec<String> = px.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
            line(format!(r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, pts.join(" ")));
        }
        if ser.style == SeriesStyle::Markers {
            for (x, y) in &px {
                line(format!(r#"<circle cx="{x:.3}" cy="{y:.3}" r="3" fill="{color}"/>"#));
            }
        }
        line(format!(
            r#"<text x="{:.3}" y="{:.3}" fill="{color}">{}</text>"#,
            MARGIN.0 + 10.0,
            MARGIN.2 + 16.0 + 14.0 * k as f64,
            escape(&ser.label)
        ));
    }
    line("</svg>".into());
    Ok(s)
}

/// Writes [`render_svg`] to `path`.
pub fn emit_plot(series: &[Series], scale: Scale, labels: &Labels, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(series, scale, labels)?)?;
    Ok(())
}
