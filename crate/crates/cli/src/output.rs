//! CSV, SVG and manifest emission with per-file checksums.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Columns repeated on every CSV row so each row reproduces in isolation.
#[derive(Debug, Clone)]
pub struct RowContext {
    names: Vec<&'static str>,
    values: Vec<String>,
}

impl RowContext {
    pub fn new(pairs: &[(&'static str, String)]) -> Self {
        Self { names: pairs.iter().map(|p| p.0).collect(), values: pairs.iter().map(|p| p.1.clone()).collect() }
    }
}

pub struct OutputSink {
    dir: PathBuf,
    svg: bool,
    files: Vec<OutputFile>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl OutputSink {
    pub fn create(dir: &Path, svg: bool) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), svg, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.push(OutputFile { file: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    /// RFC-4180 table with the context columns prepended.
    pub fn table<I>(&mut self, name: &str, ctx: &RowContext, header: &[&str], rows: I) -> CliResult<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ctx.names.iter().copied().chain(header.iter().copied()))?;
        for row in rows {
            if row.len() != header.len() {
                return Err(CliError::Validation(format!("{name}: row has {} fields, header {}", row.len(), header.len())));
            }
            w.write_record(ctx.values.iter().chain(row.iter()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Validation(format!("{name}: {e}")))?;
        self.write_bytes(name, &bytes)
    }

    pub fn chart(&mut self, name: &str, chart: &LineChart) -> CliResult<()> {
        if self.svg {
            self.write_bytes(name, chart.render().as_bytes())?;
        }
        Ok(())
    }

    /// Writes `manifest.json`; it is not listed among its own outputs.
    pub fn manifest<T: Serialize>(&self, manifest: &T) -> CliResult<PathBuf> {
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(manifest)?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Formats a float so that NaN and infinities stay readable in CSV.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Self-contained SVG line chart with optional log axes.
#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            log_y: false,
            series: Vec::new(),
        }
    }

    pub fn log_axes(mut self, log_x: bool, log_y: bool) -> Self {
        self.log_x = log_x;
        self.log_y = log_y;
        self
    }

    pub fn with_series(mut self, name: &str, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series { name: name.into(), points });
        self
    }

    fn project(&self, (x, y): (f64, f64)) -> Option<(f64, f64)> {
        let x = if self.log_x { x.log10() } else { x };
        let y = if self.log_y { y.log10() } else { y };
        (x.is_finite() && y.is_finite()).then_some((x, y))
    }

    pub fn render(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 60.0);
        let pts: Vec<Vec<(f64, f64)>> =
            self.series.iter().map(|s| s.points.iter().filter_map(|&p| self.project(p)).collect()).collect();
        let all = pts.iter().flatten();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 <= 0.0 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 <= 0.0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(&self.title));
        let _ = writeln!(
            s,
            r#"<path d="M{pad},{} L{pad},{} L{},{}" stroke="black" fill="none"/>"#,
            pad,
            h - pad,
            w - pad,
            h - pad
        );
        let tick = |v: f64, log: bool| if log { format!("1e{v:.1}") } else { format!("{v:.3e}") };
        for frac in [0.0, 0.5, 1.0] {
            let xv = x0 + frac * (x1 - x0);
            let yv = y0 + frac * (y1 - y0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), h - pad + 16.0, tick(xv, self.log_x));
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, pad - 4.0, sy(yv) + 4.0, tick(yv, self.log_y));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 15.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
            h / 2.0,
            h / 2.0,
            escape(&self.y_label)
        );
        for (k, (series, p)) in self.series.iter().zip(&pts).enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            if !p.is_empty() {
                let d: Vec<String> = p
                    .iter()
                    .enumerate()
                    .map(|(i, &(x, y))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, sx(x), sy(y)))
                    .collect();
                let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, d.join(" "));
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                w - pad - 150.0,
                40.0 + 14.0 * k as f64,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_prepends_context_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = OutputSink::create(dir.path(), true).unwrap();
        let ctx = RowContext::new(&[("seed", "7".into())]);
        sink.table("a.csv", &ctx, &["x", "y"], vec![vec!["1".into(), "a,b".into()]]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(text, "seed,x,y\n7,1,\"a,b\"\n");
        assert_eq!(sink.files()[0].sha256, sha256_hex(text.as_bytes()));
        assert!(sink.table("b.csv", &ctx, &["x"], vec![vec![]]).is_err());
    }

    #[test]
    fn chart_skips_nonpositive_on_log_axes() {
        let c = LineChart::new("t", "x", "y").log_axes(true, true).with_series("s", vec![(1.0, 1.0), (0.0, 2.0), (10.0, 5.0)]);
        let svg = c.render();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        // two axis segments plus one data segment
        assert_eq!(svg.matches(" L").count(), 3);
    }

    #[test]
    fn num_handles_specials() {
        assert_eq!(num(f64::NEG_INFINITY), "-inf");
        assert_eq!(num(0.1), "0.1");
    }
}
