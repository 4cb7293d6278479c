//! File emitters: CSV tables, SVG heatmaps, aligned text tables, PGM/PPM.
//!
//! Every CSV and text table starts with `#` comment lines naming the
//! experiment kind, seed, and artifact version, followed by the header row.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = concat!("arbench-", env!("CARGO_PKG_VERSION"));

/// Provenance lines written at the top of every table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub kind: String,
    pub seed: u64,
    pub extra: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(kind: &str, seed: u64) -> Self {
        Provenance {
            kind: kind.to_string(),
            seed,
            extra: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }

    fn lines(&self) -> String {
        let mut s = format!(
            "# kind={}\n# seed={}\n# version={}\n",
            self.kind, self.seed, ARTIFACT_VERSION
        );
        for (k, v) in &self.extra {
            let _ = writeln!(s, "# {k}={v}");
        }
        s
    }
}

/// Seventeen significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A numeric table with named columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub provenance: Provenance,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn new(provenance: Provenance, columns: &[&str]) -> Self {
        CsvTable {
            provenance,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} values for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn render(&self) -> String {
        let mut s = self.provenance.lines();
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let fmt = |line: usize, msg: String| Error::Format {
            what: "csv",
            offset: line,
            msg,
        };
        let mut prov = Provenance::default();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if let Some(c) = line.strip_prefix("# ") {
                if let Some((k, v)) = c.split_once('=') {
                    match k {
                        "kind" => prov.kind = v.to_string(),
                        "seed" => prov.seed = v.parse().map_err(|_| fmt(ln, format!("bad seed {v:?}")))?,
                        "version" => {}
                        _ => prov.extra.push((k.to_string(), v.to_string())),
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            match &columns {
                None => columns = Some(line.split(',').map(str::to_string).collect()),
                Some(cols) => {
                    let row: Vec<f64> = line
                        .split(',')
                        .map(|c| c.parse().map_err(|_| fmt(ln, format!("bad number {c:?}"))))
                        .collect::<Result<_>>()?;
                    if row.len() != cols.len() {
                        return Err(fmt(ln, format!("{} cells for {} columns", row.len(), cols.len())));
                    }
                    rows.push(row);
                }
            }
        }
        Ok(CsvTable {
            provenance: prov,
            columns: columns.ok_or_else(|| fmt(0, "no header row".into()))?,
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Maps `v` in `[lo, hi]` to a byte.
fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Binary PGM (P5) of a `height × width` plane with values in `[lo, hi]`.
pub fn pgm_bytes(plane: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if plane.len() != height * width {
        return Err(Error::invalid(format!("{} values for a {height}×{width} image", plane.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|v| to_byte(*v, lo, hi)));
    Ok(out)
}

/// Binary PPM (P6) from three planar channels laid out `[3, height, width]`.
pub fn ppm_bytes(planes: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let n = height * width;
    if planes.len() != 3 * n {
        return Err(Error::invalid(format!("{} values for a 3×{height}×{width} image", planes.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in 0..n {
        for c in 0..3 {
            out.push(to_byte(planes[c * n + p], lo, hi));
        }
    }
    Ok(out)
}

/// Parses a binary PGM or PPM back to `(channels, height, width, bytes)`.
pub fn parse_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let fmt = |offset: usize, msg: &str| Error::Format {
        what: "pnm",
        offset,
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt(pos, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(fmt(0, "unsupported magic")),
    };
    let num = |i: usize| fields[i].parse::<usize>().map_err(|_| fmt(0, "bad header number"));
    let (w, h) = (num(1)?, num(2)?);
    let need = channels * w * h;
    if bytes.len() < pos + need {
        return Err(fmt(bytes.len(), "truncated pixel data"));
    }
    Ok((channels, h, w, bytes[pos..pos + need].to_vec()))
}

/// Monotone dark-blue to yellow ramp.
pub fn ramp(t: f64) -> (u8, u8, u8) {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let stops = [
        (0.0, (13.0, 8.0, 135.0)),
        (0.5, (204.0, 71.0, 120.0)),
        (1.0, (240.0, 249.0, 33.0)),
    ];
    let (i, s) = if t <= 0.5 { (0, t / 0.5) } else { (1, (t - 0.5) / 0.5) };
    let (a, b) = (stops[i].1, stops[i + 1].1);
    let mix = |x: f64, y: f64| (x + (y - x) * s).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// SVG heatmap of a row-major grid (`rows` from bottom to top in data
/// coordinates), one `<rect>` per cell, with axis labels and a title.
pub fn svg_heatmap(
    values: &[f64],
    rows: usize,
    cols: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    title: &str,
    x_label: &str,
    y_label: &str,
) -> Result<String> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("{} values for a {rows}×{cols} grid", values.len())));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = (480.0 / rows.max(cols) as f64).max(1.0);
    let (pw, ph) = (cell * cols as f64, cell * rows as f64);
    let (ox, oy) = (60.0, 30.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        pw + ox + 20.0,
        ph + oy + 50.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{title}</text>"#, ox + pw / 2.0);
    for r in 0..rows {
        for c in 0..cols {
            let v = values[r * cols + c];
            let (red, g, b) = ramp((v - lo) / span);
            let y = oy + ph - (r + 1) as f64 * cell;
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="rgb({red},{g},{b})"/>"#,
                ox + c as f64 * cell,
                y,
                cell,
                cell
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label} [{}, {}]</text>"#,
        ox + pw / 2.0,
        oy + ph + 30.0,
        x_range.0,
        x_range.1
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{y_label} [{}, {}]</text>"#,
        oy + ph / 2.0,
        oy + ph / 2.0,
        y_range.0,
        y_range.1
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Left-aligned first column, right-aligned numeric cells with one decimal.
pub fn text_table(provenance: &Provenance, corner: &str, columns: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut out = provenance.lines();
    let first = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain(std::iter::once(corner.chars().count()))
        .max()
        .unwrap_or(0);
    let widths: Vec<usize> = columns.iter().map(|c| c.chars().count().max(5)).collect();
    let _ = write!(out, "{corner:<first$}");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (name, vals) in rows {
        let _ = write!(out, "{name:<first$}");
        for (v, w) in vals.iter().zip(&widths) {
            let cell = format!("{v:.1}");
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(vals in proptest::collection::vec(-1e300f64..1e300, 0..30)) {
            let mut t = CsvTable::new(Provenance::new("test", 7).with("note", "x"), &["a", "b", "c"]);
            for ch in vals.chunks_exact(3) {
                t.push(ch.to_vec()).unwrap();
            }
            let back = CsvTable::parse(&t.render()).unwrap();
            prop_assert_eq!(&back, &t);
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = CsvTable::new(Provenance::new("detect", 1), &["dataset", "x"]);
        let text = t.render();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, vec!["dataset,x"]);
    }

    #[test]
    fn svg_two_by_two() {
        let svg = svg_heatmap(&[0.0, 1.0, 1.0, 0.0], 2, 2, (0.0, 1.0), (0.0, 1.0), "t", "x1", "x2").unwrap();
        assert_eq!(svg.matches("<rect").count(), 4);
        assert_eq!(svg.matches("rgb(13,8,135)").count(), 2);
        assert_eq!(svg.matches("rgb(240,249,33)").count(), 2);
        assert!(svg.contains("x1") && svg.contains("x2"));
    }

    #[test]
    fn pnm_round_trip() {
        let plane = [-1.0, 0.0, 1.0, 0.5, -0.5, 1.0];
        let (c, h, w, px) = parse_pnm(&pgm_bytes(&plane, 2, 3, -1.0, 1.0).unwrap()).unwrap();
        assert_eq!((c, h, w), (1, 2, 3));
        assert_eq!(px, vec![0, 128, 255, 191, 64, 255]);
        let rgb: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let (c, h, w, px) = parse_pnm(&ppm_bytes(&rgb, 2, 2, 0.0, 1.0).unwrap()).unwrap();
        assert_eq!((c, h, w, px.len()), (3, 2, 2, 12));
        assert_eq!(px[0], 0);
        assert_eq!(px[11], 255);
    }

    #[test]
    fn table_is_aligned() {
        let t = text_table(
            &Provenance::new("detect", 0),
            "dataset",
            &["AR-2SD".into(), "CCG".into()],
            &[("test".into(), vec![95.0, 94.25]), ("noise".into(), vec![0.0, 0.0])],
        );
        let body: Vec<&str> = t.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body[0], "dataset  AR-2SD    CCG");
        assert_eq!(body[1], "test       95.0   94.2");
        assert!(body.iter().all(|l| l.len() == body[0].len()));
    }
}
