use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{cpm, CpmReport, FrocPoint};
use crate::data::write_text;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    PlotData,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::PlotData];

    fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::PlotData => "dat",
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn report_json(r: &CpmReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(r).map_err(|e| Error::data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Curve rows followed by a `cpm` row carrying the seven operating points.
pub fn report_csv(r: &CpmReport) -> String {
    let mut s = String::from("kind,threshold,fps_per_scan,sensitivity\n");
    for p in &r.curve {
        s.push_str(&format!("curve,{},{},{}\n", p.threshold, p.fps_per_scan, p.sensitivity));
    }
    for (f, v) in r.fps_per_scan.iter().zip(&r.sensitivities) {
        s.push_str(&format!("operating_point,,{f},{v}\n"));
    }
    s.push_str(&format!("cpm,,,{}\n", r.cpm));
    s
}

/// Whitespace-separated step curve for gnuplot (`plot 'x.dat' with steps`).
pub fn report_plot_data(r: &CpmReport) -> String {
    let mut s = format!("# cpm {}\n# fps_per_scan sensitivity threshold\n", r.cpm);
    for p in &r.curve {
        s.push_str(&format!("{} {} {}\n", p.fps_per_scan, p.sensitivity, p.threshold));
    }
    s
}

pub fn parse_report_json(text: &str) -> Result<CpmReport> {
    serde_json::from_str(text).map_err(|e| Error::parse("report", format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

/// Rebuilds the report from the curve rows; the CPM rows are checked against it.
pub fn parse_report_csv(text: &str) -> Result<CpmReport> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut curve = Vec::new();
    let mut stated = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse("report", format!("{:?}", e.position()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::parse("report", format!("line {line}"), format!("bad number in column {}", i + 1)))
        };
        match rec.get(0) {
            Some("curve") => curve.push(FrocPoint {
                threshold: num(1)?,
                fps_per_scan: num(2)?,
                sensitivity: num(3)?,
            }),
            Some("cpm") => stated = Some(num(3)?),
            Some("operating_point") => {}
            other => return Err(Error::parse("report", format!("line {line}"), format!("unknown row kind {other:?}"))),
        }
    }
    let r = cpm(&curve);
    if stated != Some(r.cpm) {
        return Err(Error::data(format!("report states cpm {stated:?}, curve gives {}", r.cpm)));
    }
    Ok(r)
}

/// Writes `<prefix>.json`, `.csv` and/or `.dat`; returns the paths written.
pub fn write_report(prefix: &Path, r: &CpmReport, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for &f in formats {
        let path = PathBuf::from(format!("{}.{}", prefix.display(), f.extension()));
        let text = match f {
            ReportFormat::Json => report_json(r)?,
            ReportFormat::Csv => report_csv(r),
            ReportFormat::PlotData => report_plot_data(r),
        };
        write_text(&path, &text)?;
        out.push(path);
    }
    Ok(out)
}
