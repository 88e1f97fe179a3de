use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::rmse::RmseReport;
use crate::dataio::Scenario;
use crate::error::{Error, Result};

pub const RMSE_DEFINITION: &str =
    "pooled per-axis RMSE: sqrt(sum_t ||e_t||^2 / (3T)); norm variant: sqrt(sum_t ||e_t||^2 / T); rotation error on XYZ Euler deltas";
pub const REFERENCE_LABEL: &str = "reference values, not reproduced";

/// One published number for a method on a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub sequence: String,
    pub value: f64,
}

/// Literature RMSE values on the harbor sequences h01 and h07. The source
/// table does not name the quantity beyond "RMSE".
pub fn harbor_baselines() -> Vec<BaselineRow> {
    const ROWS: [(&str, f64, f64); 4] = [
        ("OKVIS", 0.0406, 0.1171),
        ("ORB-SLAM3", 0.0198, 0.0212),
        ("VINet", 0.0497, 0.1495),
        ("DU-VIO", 0.0111, 0.0188),
    ];
    ROWS.iter()
        .flat_map(|&(m, h01, h07)| {
            [("h01", h01), ("h07", h07)].map(|(s, v)| BaselineRow { method: m.into(), sequence: s.into(), value: v })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub v_rmse: String,
    pub phi_rmse: String,
}

impl Default for Units {
    fn default() -> Self {
        Units { v_rmse: "m".into(), phi_rmse: "rad".into() }
    }
}

/// What `report.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub rmse_definition: String,
    pub units: Units,
    pub reports: Vec<RmseReport>,
    pub reference_label: String,
    pub reference_values: Vec<BaselineRow>,
}

impl ReportDocument {
    pub fn new(reports: Vec<RmseReport>, baselines: Vec<BaselineRow>) -> Self {
        ReportDocument {
            rmse_definition: RMSE_DEFINITION.into(),
            units: Units::default(),
            reports,
            reference_label: REFERENCE_LABEL.into(),
            reference_values: baselines,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub table: PathBuf,
    pub charts: Vec<PathBuf>,
}

pub fn text_table(doc: &ReportDocument) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "RMSE ({})", doc.rmse_definition);
    let _ = writeln!(s, "units: v_rmse [{}], phi_rmse [{}]", doc.units.v_rmse, doc.units.phi_rmse);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<12} {:<11} {:>3} {:>7} {:>6} {:>11} {:>11} {:>11} {:>11}",
        "sequence", "scenario", "sub", "dehazed", "steps", "v_rmse", "phi_rmse", "v_norm", "phi_norm"
    );
    for r in &doc.reports {
        let _ = writeln!(
            s,
            "{:<12} {:<11} {:>3} {:>7} {:>6} {:>11.6} {:>11.6} {:>11.6} {:>11.6}",
            r.sequence_id,
            r.scenario.as_str(),
            r.sub_sequence_index,
            if r.dehazed { "yes" } else { "no" },
            r.steps,
            r.v_rmse,
            r.phi_rmse,
            r.v_rmse_norm,
            r.phi_rmse_norm
        );
    }
    if !doc.reference_values.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Baselines ({})", doc.reference_label);
        let seqs: Vec<&str> = {
            let mut v: Vec<&str> = doc.reference_values.iter().map(|b| b.sequence.as_str()).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut methods: Vec<&str> = Vec::new();
        for b in &doc.reference_values {
            if !methods.contains(&b.method.as_str()) {
                methods.push(&b.method);
            }
        }
        let _ = write!(s, "{:<12}", "method");
        for q in &seqs {
            let _ = write!(s, " {q:>9}");
        }
        let _ = writeln!(s);
        for m in methods {
            let _ = write!(s, "{m:<12}");
            for q in &seqs {
                match doc.reference_values.iter().find(|b| b.method == m && b.sequence == *q) {
                    Some(b) => {
                        let _ = write!(s, " {:>9.4}", b.value);
                    }
                    None => {
                        let _ = write!(s, " {:>9}", "-");
                    }
                }
            }
            let _ = writeln!(s);
        }
    }
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart for one sequence: a panel for v_rmse and one for
/// phi_rmse, groups are scenario × sub-sequence, bars are without/with
/// dehazing.
pub fn bar_chart_svg(sequence_id: &str, reports: &[&RmseReport]) -> String {
    let mut groups: BTreeMap<(Scenario, usize), [Option<&RmseReport>; 2]> = BTreeMap::new();
    for r in reports {
        groups.entry((r.scenario, r.sub_sequence_index)).or_default()[usize::from(r.dehazed)] = Some(r);
    }
    let (bar_w, gap, left, panel_h, top) = (14.0, 12.0, 60.0, 160.0, 40.0);
    let width = left + groups.len() as f64 * (2.0 * bar_w + gap) + 20.0;
    let height = top + 2.0 * (panel_h + 60.0) + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, xml_escape(sequence_id));
    let colors = ["#9e9e9e", "#1f77b4"];
    let _ = writeln!(s, r##"<rect x="{}" y="8" width="10" height="10" fill="{}"/><text x="{}" y="17">without dehazing</text>"##, width - 230.0, colors[0], width - 216.0);
    let _ = writeln!(s, r##"<rect x="{}" y="8" width="10" height="10" fill="{}"/><text x="{}" y="17">with dehazing</text>"##, width - 120.0, colors[1], width - 106.0);
    for (panel, (label, pick)) in [("v_rmse [m]", 0usize), ("phi_rmse [rad]", 1)].into_iter().enumerate() {
        let value = |r: &RmseReport| if pick == 0 { r.v_rmse } else { r.phi_rmse };
        let y0 = top + panel as f64 * (panel_h + 60.0);
        let base = y0 + panel_h;
        let max = groups
            .values()
            .flat_map(|g| g.iter().flatten().map(|r| value(r)))
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let _ = writeln!(s, r#"<text x="4" y="{}">{label}</text>"#, y0 + 10.0);
        let _ = writeln!(s, r#"<text x="4" y="{}">{max:.4}</text>"#, y0 + 24.0);
        let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, width - 20.0);
        for (gi, ((scenario, sub), pair)) in groups.iter().enumerate() {
            let gx = left + gi as f64 * (2.0 * bar_w + gap);
            for (k, r) in pair.iter().enumerate() {
                if let Some(r) = r {
                    let h = value(r) / max * (panel_h - 20.0);
                    let _ = writeln!(
                        s,
                        r#"<rect x="{}" y="{:.2}" width="{bar_w}" height="{:.2}" fill="{}"/>"#,
                        gx + k as f64 * bar_w,
                        base - h,
                        h,
                        colors[k]
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" transform="rotate(45 {} {})">{}-{}</text>"#,
                gx,
                base + 12.0,
                gx,
                base + 12.0,
                scenario.as_str(),
                sub
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `report.json`, `report.txt` and one `chart_<sequence>.svg` per
/// sequence into `out_dir`.
pub fn render_reports(reports: &[RmseReport], baselines: &[BaselineRow], out_dir: &Path) -> Result<ReportFiles> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to render".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let doc = ReportDocument::new(reports.to_vec(), baselines.to_vec());
    let json = out_dir.join("report.json");
    fs::write(&json, doc.to_json()?).map_err(|e| Error::io(&json, e))?;
    let table = out_dir.join("report.txt");
    fs::write(&table, text_table(&doc)).map_err(|e| Error::io(&table, e))?;

    let mut by_seq: BTreeMap<&str, Vec<&RmseReport>> = BTreeMap::new();
    for r in reports {
        by_seq.entry(&r.sequence_id).or_default().push(r);
    }
    let mut charts = Vec::new();
    for (seq, reps) in by_seq {
        let path = out_dir.join(format!("chart_{}.svg", file_stem(seq)));
        fs::write(&path, bar_chart_svg(seq, &reps)).map_err(|e| Error::io(&path, e))?;
        charts.push(path);
    }
    Ok(ReportFiles { json, table, charts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(seq: &str, scenario: Scenario, sub: usize, dehazed: bool, v: f64) -> RmseReport {
        RmseReport {
            sequence_id: seq.into(),
            scenario,
            sub_sequence_index: sub,
            steps: 10,
            v_rmse: v,
            phi_rmse: v / 2.0,
            v_rmse_norm: v * 3f64.sqrt(),
            phi_rmse_norm: v * 3f64.sqrt() / 2.0,
            dehazed,
        }
    }

    #[test]
    fn baseline_constants() {
        let b = harbor_baselines();
        let get = |m: &str, s: &str| b.iter().find(|r| r.method == m && r.sequence == s).unwrap().value;
        assert_eq!(get("OKVIS", "h01"), 0.0406);
        assert_eq!(get("ORB-SLAM3", "h01"), 0.0198);
        assert_eq!(get("VINet", "h01"), 0.0497);
        assert_eq!(get("DU-VIO", "h01"), 0.0111);
        assert_eq!(get("DU-VIO", "h07"), 0.0188);
        assert_eq!(b.len(), 8);
    }

    #[test]
    fn one_report() {
        let dir = tempfile::tempdir().unwrap();
        let r = rep("seq0", Scenario::Turbid, 1, true, 0.02);
        let files = render_reports(std::slice::from_ref(&r), &harbor_baselines(), dir.path()).unwrap();
        assert_eq!(files.charts.len(), 1);
        let table = fs::read_to_string(&files.table).unwrap();
        let rows = table.lines().filter(|l| l.starts_with("seq0")).count();
        assert_eq!(rows, 1);
        assert!(table.contains(REFERENCE_LABEL));
        assert!(table.contains("0.0111"));
        let doc = ReportDocument::read(&files.json).unwrap();
        assert_eq!(doc.reports, vec![r]);
        let svg = fs::read_to_string(&files.charts[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn json_round_trip_and_charts_per_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let mut reps = Vec::new();
        for seq in ["a", "b/c"] {
            for sc in Scenario::ALL {
                for sub in 1..=3 {
                    for dh in [false, true] {
                        reps.push(rep(seq, sc, sub, dh, 0.01 * sub as f64 + if dh { 0.0 } else { 0.005 }));
                    }
                }
            }
        }
        let files = render_reports(&reps, &[], dir.path()).unwrap();
        assert_eq!(files.charts.len(), 2);
        assert!(files.charts.iter().all(|p| p.exists()));
        let doc = ReportDocument::read(&files.json).unwrap();
        assert_eq!(doc.reports, reps);
        assert_eq!(doc.units.phi_rmse, "rad");
        let svg = fs::read_to_string(&files.charts[0]).unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 2 + 2 * 18);
        assert!(render_reports(&[], &[], dir.path()).is_err());
    }
}
