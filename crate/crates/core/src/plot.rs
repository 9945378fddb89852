//! Static SVG line charts of the training loss log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::LOG_COLUMNS;

/// Parsed loss log: column names and one row of values per step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn parse_log(text: &str) -> Result<LossTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("unreadable loss log header: {e}")))?;
    if header.is_empty() {
        return Err(Error::Data("loss log is empty".into()));
    }
    let columns: Vec<String> = header.iter().map(str::to_string).collect();
    for required in ["step", "total"] {
        if !columns.iter().any(|c| c == required) {
            return Err(Error::Data(format!("loss log header lacks column `{required}`")));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Data(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != columns.len() {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, found {}",
                columns.len(),
                rec.len()
            )));
        }
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {line}: `{v}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("loss log has no data rows".into()));
    }
    Ok(LossTable { columns, rows })
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#393b79", "#637939",
];

fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let k = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    k * mag
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// One chart with any number of `(label, xs, ys)` series.
pub fn line_chart(title: &str, x_label: &str, series: &[(&str, &[f64], &[f64])]) -> String {
    let (w, h) = (800.0, 480.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let finite = |v: &&f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.1.iter()).filter(finite);
    let ys = series.iter().flat_map(|s| s.2.iter()).filter(finite);
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = y0.abs().max(1.0) * 0.05;
        y0 -= pad;
        y1 += pad;
    }
    let sx = |v: f64| left + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| top + ph - (v - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for (lo, hi, horizontal) in [(x0, x1, true), (y0, y1, false)] {
        let step = nice_step(hi - lo);
        let mut t = (lo / step).ceil() * step;
        while t <= hi + step * 1e-9 {
            if horizontal {
                let x = sx(t);
                let _ = writeln!(
                    s,
                    r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ddd"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
                    top,
                    top + ph,
                    top + ph + 16.0,
                    fmt_tick(t)
                );
            } else {
                let y = sy(t);
                let _ = writeln!(
                    s,
                    r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                    left + pw,
                    left - 6.0,
                    y + 4.0,
                    fmt_tick(t)
                );
            }
            t += step;
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    for (i, (label, xs, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `losses.svg` (all loss terms), one `<term>.svg` per loss term and
/// `lr.svg`; returns the written paths.
pub fn plot_log(table: &LossTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let steps = table.column("step").expect("validated");
    let terms: Vec<&str> = LOG_COLUMNS[3..]
        .iter()
        .copied()
        .filter(|c| table.columns.iter().any(|k| k == c))
        .collect();
    let cols: Vec<Vec<f64>> = terms.iter().map(|t| table.column(t).unwrap()).collect();
    let mut written = Vec::new();
    let mut write = |name: String, svg: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    let series: Vec<(&str, &[f64], &[f64])> = terms
        .iter()
        .zip(&cols)
        .map(|(t, c)| (*t, steps.as_slice(), c.as_slice()))
        .collect();
    write("losses.svg".into(), line_chart("Loss terms", "step", &series))?;
    for (t, c) in terms.iter().zip(&cols) {
        write(format!("{t}.svg"), line_chart(t, "step", &[(t, &steps, c)]))?;
    }
    if let Some(lr) = table.column("lr") {
        write("lr.svg".into(), line_chart("Learning rate", "step", &[("lr", &steps, &lr)]))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(parse_log("").is_err());
        assert!(parse_log("step,total\n").is_err());
        match parse_log("step,total\n1,2\n2,x\n") {
            Err(Error::Data(m)) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_log("step,total\n1,2,3\n") {
            Err(Error::Data(m)) => assert!(m.contains("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        let t = parse_log("step,total\n1,2\n2,1.5\n").unwrap();
        assert_eq!(t.column("total").unwrap(), vec![2.0, 1.5]);
    }

    #[test]
    fn chart_is_deterministic_svg() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [1.0, 0.5, 0.25];
        let a = line_chart("t", "step", &[("total", &xs, &ys)]);
        assert_eq!(a, line_chart("t", "step", &[("total", &xs, &ys)]));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("polyline"));
        let flat = line_chart("t", "step", &[("c", &xs, &[1.0, 1.0, 1.0])]);
        assert!(!flat.contains("NaN"));
    }
}
