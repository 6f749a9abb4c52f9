//! CSV and SVG emitters.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use crate::error::CliResult;

/// A CSV table: first line `# manifest-sha256: <hash>`, then a header row.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path, hash: &str) -> CliResult<()> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|v| fmt_num(*v)).collect())
            .collect();
        write_rows(path, hash, &self.header, &rows)
    }

    fn column(&self, i: usize) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r[0], r[i])).collect()
    }

    /// Line chart of every column against the first. Columns whose name
    /// ends in `_lo`/`_hi` are drawn dashed.
    pub fn svg(&self, title: &str, log_y: bool) -> String {
        let series: Vec<(String, Vec<(f64, f64)>)> = (1..self.header.len())
            .map(|i| (self.header[i].clone(), self.column(i)))
            .collect();
        line_chart(title, &series, log_y)
    }
}

pub fn write_rows(path: &Path, hash: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut file = File::create(path)?;
    writeln!(file, "# manifest-sha256: {hash}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip representation; non-finite values as `nan`/`inf`.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> String {
    let (w, h, pad, legend) = (860.0, 400.0, 50.0, 140.0);
    let ty = |y: f64| if log_y { y.max(1e-300).log10() } else { y };
    let pts = series
        .iter()
        .flat_map(|(_, s)| s.iter())
        .filter(|(x, y)| x.is_finite() && ty(*y).is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(ty(y));
        y1 = y1.max(ty(y));
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad - legend);
    let sy = |y: f64| h - pad - (ty(y) - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r##"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        w - 2.0 * pad - legend,
        h - 2.0 * pad
    );
    let ylab = |v: f64| if log_y { format!("1e{v:.1}") } else { format!("{v:.4}") };
    let _ = writeln!(out, r#"<text x="4" y="{}">{}</text>"#, pad + 4.0, ylab(y1));
    let _ = writeln!(out, r#"<text x="4" y="{}">{}</text>"#, h - pad, ylab(y0));
    let _ = writeln!(out, r#"<text x="{pad}" y="{}">{x0}</text>"#, h - pad + 16.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}">{x1}</text>"#, w - pad - legend - 30.0, h - pad + 16.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if name.ends_with("_lo") || name.ends_with("_hi") {
            r#" stroke-dasharray="4 3""#
        } else {
            ""
        };
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in pts {
            if !(x.is_finite() && ty(y).is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, sx(x), sy(y));
            pen_down = true;
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.2"{dash}/>"#,
            d.trim_end()
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - legend + 8.0,
            pad + 12.0 * i as f64 + 8.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
