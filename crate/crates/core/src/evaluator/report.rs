use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub offset: usize,
    pub iou: f64,
    pub n_anchors: usize,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "variant,offset,iou,n_anchors,config_fingerprint";

impl EvalReport {
    /// Appends one row per offset of `curve`.
    pub fn push_curve(&mut self, variant: &str, iou: &[f64], n_anchors: usize, fingerprint: &str) {
        for (offset, &v) in iou.iter().enumerate() {
            self.rows.push(ReportRow {
                variant: variant.to_string(),
                offset,
                iou: v,
                n_anchors,
                config_fingerprint: fingerprint.to_string(),
            });
        }
    }

    pub fn get(&self, variant: &str, offset: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.offset == offset)
            .map(|r| r.iou)
    }

    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{}",
                r.variant, r.offset, r.iou, r.n_anchors, r.config_fingerprint
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Data("report CSV header mismatch".into()));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Data(format!("malformed report row: {l}"));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(ReportRow {
                    variant: f[0].to_string(),
                    offset: f[1].parse().map_err(|_| bad())?,
                    iou: f[2].parse().map_err(|_| bad())?,
                    n_anchors: f[3].parse().map_err(|_| bad())?,
                    config_fingerprint: f[4].to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// IoU-versus-offset curves. Variants without history are dashed.
pub fn plot_svg(report: &EvalReport, title: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 180.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let max_off = report.rows.iter().map(|r| r.offset).max().unwrap_or(0).max(1) as f64;
    let x = |o: f64| left + pw * o / max_off;
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-size="14">{}</text>"#, left, escape(title));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{v:.1}</text>"##,
            y(v),
            left + pw,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for o in 0..=max_off as usize {
        let label = if o == 0 { "t".to_string() } else { format!("t+{o}") };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            x(o as f64),
            top + ph + 20.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" transform="rotate(-90 18 {:.1})" text-anchor="middle">IoU</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, variant) in report.variants().iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dashed = variant.starts_with("base") || variant.contains("ego_only");
        let pts: Vec<String> = report
            .rows
            .iter()
            .filter(|r| &r.variant == variant)
            .map(|r| format!("{:.1},{:.1}", x(r.offset as f64), y(r.iou)))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').expect("point");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 + 20.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(variant)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
