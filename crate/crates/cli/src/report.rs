//! Report artifacts: table1.csv, table2.csv, dq.json and ROC plots.

use std::fmt::Write as _;
use std::path::Path;

use colony_core::dq::{dq_report, AccuracyGrid, DqMode, DqReport, KdeConfig};
use colony_core::eval::{collective_decide, per_class_f1, roc_one_vs_rest, CollectiveMode, ConfusionMatrix, RocCurve, ScoreMatrix};
use colony_core::registry::FamilyRecord;
use colony_core::{ColonyError, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::workspace::{self, EvalRecord};

pub const TABLE1: &str = "table1.csv";
pub const TABLE2: &str = "table2.csv";
pub const DQ_JSON: &str = "dq.json";

/// Roster order: intra families by archetype, then inter families.
fn roster_key(f: &FamilyRecord) -> (bool, u16, u16, u16) {
    (f.p != f.q, f.p, f.q, f.r)
}

/// Evaluations that belong to a family, in roster order.
pub fn family_rows(evals: &[EvalRecord]) -> Vec<(FamilyRecord, &EvalRecord)> {
    let mut rows: Vec<_> = evals.iter().filter_map(|e| e.family.map(|f| (f, e))).collect();
    rows.sort_by(|a, b| roster_key(&a.0).cmp(&roster_key(&b.0)).then(a.1.agent.cmp(&b.1.agent)));
    rows
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ColonyError::State(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.into_inner().map_err(|e| ColonyError::State(e.to_string()))
}

pub fn table1_csv(rows: &[(FamilyRecord, &EvalRecord)]) -> Result<Vec<u8>> {
    let classes = rows.first().map_or(10, |r| r.1.test_f1.len());
    let mut header = vec!["family".to_string()];
    header.extend((0..classes).map(|c| c.to_string()));
    header.push("avg".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(f, e)| {
            let mut row = vec![f.to_string()];
            row.extend(e.test_f1.iter().map(|v| format!("{v:.4}")));
            row.push(format!("{:.4}", e.test_macro_f1));
            row
        })
        .collect();
    csv_bytes(&header, &body)
}

pub fn table2_csv(rows: &[(FamilyRecord, &EvalRecord)]) -> Result<Vec<u8>> {
    let header: Vec<String> = ["family", "train", "valid", "test", "duration_s"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(f, e)| {
            vec![
                f.to_string(),
                format!("{:.4}", e.train_macro_f1),
                format!("{:.4}", e.valid_macro_f1),
                format!("{:.4}", e.test_macro_f1),
                format!("{:.1}", e.duration_seconds),
            ]
        })
        .collect();
    csv_bytes(&header, &body)
}

/// Published five-score values for the reference grid, in order
/// disagreement, entropy, variance, mean tau, std tau.
pub const REFERENCE_PLAIN: [f64; 5] = [0.085, 2.30, 0.007, 0.25, 0.27];
pub const REFERENCE_KDE: [f64; 5] = [0.084, 2.28, 0.007, 0.58, 0.35];
/// Calibration tolerances, same order.
pub const TOLERANCES: [f64; 5] = [0.010, 0.03, 0.001, 0.05, 0.05];
pub const GATES: [Gate; 5] = [Gate::Soft, Gate::Hard, Gate::Hard, Gate::Soft, Gate::Soft];
pub const SCORE_NAMES: [&str; 5] = [
    "pairwise_disagreement",
    "system_entropy",
    "accuracy_variance",
    "mean_tau",
    "std_tau",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Hard,
    Soft,
}

pub fn five_scores(r: &DqReport) -> [Option<f64>; 5] {
    [
        Some(r.pairwise_disagreement),
        Some(r.system_entropy),
        Some(r.accuracy_variance),
        r.mean_tau,
        r.std_tau,
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct Formulas {
    pub pairwise_disagreement: &'static str,
    pub system_entropy: &'static str,
    pub accuracy_variance: &'static str,
    pub pooled_variance: &'static str,
    pub kendall_tau: &'static str,
    pub kde: &'static str,
}

pub const FORMULAS: Formulas = Formulas {
    pairwise_disagreement: "mean over model pairs i<j and labels d of |F1_i(d) - F1_j(d)|",
    system_entropy: "mean over models of -sum_d p(d) ln p(d), p = F1 row / row sum",
    accuracy_variance: "mean over labels d of the population variance of F1_i(d) across models i",
    pooled_variance: "population variance of all model x label entries",
    kendall_tau: "Kendall tau-b between each pair of model rows; mean and population std over pairs with defined tau",
    kde: "each entry x of a row replaced by the mean of that row's Laplace-kernel density restricted to [x-h, x+h]; h = max(0.01, 0.9 min(s, IQR/1.34) n^-1/5) per row",
};

#[derive(Debug, Clone, Serialize)]
pub struct ScoreCheck {
    pub score: &'static str,
    pub computed: Option<f64>,
    pub reference: f64,
    pub tolerance: f64,
    pub gate: Gate,
    pub pass: bool,
}

/// Compare plain-mode scores against the published reference values.
pub fn calibration(plain: &DqReport) -> Vec<ScoreCheck> {
    five_scores(plain)
        .iter()
        .enumerate()
        .map(|(i, v)| ScoreCheck {
            score: SCORE_NAMES[i],
            computed: *v,
            reference: REFERENCE_PLAIN[i],
            tolerance: TOLERANCES[i],
            gate: GATES[i],
            pass: v.is_some_and(|v| (v - REFERENCE_PLAIN[i]).abs() <= TOLERANCES[i]),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceValues {
    pub plain: [f64; 5],
    pub kde: [f64; 5],
    pub order: [&'static str; 5],
}

#[derive(Debug, Clone, Serialize)]
pub struct CollectiveSummary {
    pub mode: CollectiveMode,
    pub members: usize,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DqDocument {
    pub families: Vec<String>,
    pub grid: Vec<Vec<f64>>,
    pub plain: DqReport,
    pub kde: DqReport,
    pub formulas: Formulas,
    pub reference: ReferenceValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Vec<ScoreCheck>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collective: Option<CollectiveSummary>,
}

pub fn dq_document(grid: &AccuracyGrid, kde: &KdeConfig, with_calibration: bool) -> Result<DqDocument> {
    let plain = dq_report(grid, DqMode::Plain, kde)?;
    let smoothed = dq_report(grid, DqMode::Kde, kde)?;
    Ok(DqDocument {
        families: grid.row_labels.clone(),
        grid: grid.values.clone(),
        calibration: with_calibration.then(|| calibration(&plain)),
        plain,
        kde: smoothed,
        formulas: FORMULAS,
        reference: ReferenceValues {
            plain: REFERENCE_PLAIN,
            kde: REFERENCE_KDE,
            order: SCORE_NAMES,
        },
        collective: None,
    })
}

fn score_matrix(e: &EvalRecord) -> Result<ScoreMatrix> {
    ScoreMatrix::new(e.test_f1.len(), e.test_scores.clone(), e.test_labels.clone())
}

/// Colony decision over a shared test set, members weighted by their
/// per-class validation F1. `None` when the members saw different test sets.
pub fn collective(rows: &[(FamilyRecord, &EvalRecord)], mode: CollectiveMode) -> Result<Option<CollectiveSummary>> {
    let Some((_, first)) = rows.first() else {
        return Ok(None);
    };
    if rows.iter().any(|(_, e)| e.test_labels != first.test_labels || e.test_f1.len() != first.test_f1.len()) {
        return Ok(None);
    }
    let matrices: Vec<ScoreMatrix> = rows.iter().map(|(_, e)| score_matrix(e)).collect::<Result<_>>()?;
    let weights: Vec<&[f64]> = rows.iter().map(|(_, e)| e.valid_f1.as_slice()).collect();
    let predicted: Vec<usize> = (0..first.test_labels.len())
        .map(|i| {
            let scores: Vec<&[f64]> = matrices.iter().map(|m| m.row(i)).collect();
            collective_decide(&scores, &weights, mode)
        })
        .collect::<Result<_>>()?;
    let classes = first.test_f1.len();
    let cm = ConfusionMatrix::from_predictions(&first.test_labels, &predicted, classes)?;
    Ok(Some(CollectiveSummary {
        mode,
        members: rows.len(),
        test_accuracy: cm.accuracy(),
        test_macro_f1: per_class_f1(&cm)?.average,
    }))
}

const SIZE: f64 = 360.0;
const MARGIN: f64 = 50.0;
const PLOT: f64 = SIZE - 2.0 * MARGIN;

fn px(x: f64) -> f64 {
    MARGIN + x * PLOT
}

fn py(y: f64) -> f64 {
    SIZE - MARGIN - y * PLOT
}

/// Standalone SVG 1.1 plot of one ROC curve.
pub fn roc_svg(title: &str, curve: &RocCurve) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="13">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<path d="M{x:.2} {y0:.2} L{x:.2} {y1:.2} M{x0:.2} {y:.2} L{x1:.2} {y:.2}" stroke="black"/>"#,
            x = px(t),
            y0 = py(0.0),
            y1 = py(0.0) + 4.0,
            x0 = px(0.0) - 4.0,
            x1 = px(0.0),
            y = py(t)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            px(t),
            py(0.0) + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#,
            px(0.0) - 6.0,
            py(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">False positive rate</text>"#,
        SIZE / 2.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">True positive rate</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{:.2} {:.2} L{:.2} {:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let mut d = String::new();
    for (i, &(x, y)) in curve.points.iter().enumerate() {
        let _ = write!(d, "{}{:.2} {:.2}", if i == 0 { "M" } else { " L" }, px(x), py(y));
    }
    let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="steelblue" stroke-width="2"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">AUC = {:.4}</text>"#,
        px(1.0) - 6.0,
        py(0.0) - 8.0,
        curve.auc
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub families: Vec<(String, f64)>,
    pub collective: Option<CollectiveSummary>,
    pub plots: usize,
}

/// Write every report artifact for the family evaluations into `out`.
pub fn write_report(out: &Path, evals: &[EvalRecord], cfg: &RunConfig) -> Result<ReportSummary> {
    let rows = family_rows(evals);
    if rows.is_empty() {
        return Err(ColonyError::State("no evaluated family members to report".into()));
    }
    workspace::create_dir(out)?;
    workspace::write_bytes(&out.join(TABLE1), &table1_csv(&rows)?)?;
    workspace::write_bytes(&out.join(TABLE2), &table2_csv(&rows)?)?;

    let labels: Vec<String> = rows.iter().map(|(f, _)| f.to_string()).collect();
    let grid = AccuracyGrid::new(
        labels.clone(),
        (0..rows[0].1.test_f1.len()).map(|c| c.to_string()).collect(),
        rows.iter().map(|(_, e)| e.test_f1.clone()).collect(),
    )?;
    let mut doc = dq_document(&grid, &cfg.kde, false)?;
    doc.collective = collective(&rows, cfg.collective)?;
    workspace::write_json(&out.join(DQ_JSON), &doc)?;

    let mut plots = 0;
    for (f, e) in &rows {
        let m = score_matrix(e)?;
        for c in 0..m.classes {
            let curve = roc_one_vs_rest(&m, c)?;
            let name = format!("roc_{}_{c}.svg", f.triple());
            workspace::write_bytes(&out.join(name), roc_svg(&format!("{f} class {c}"), &curve).as_bytes())?;
            plots += 1;
        }
    }
    Ok(ReportSummary {
        families: rows.iter().map(|(f, e)| (f.to_string(), e.test_macro_f1)).collect(),
        collective: doc.collective,
        plots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(agent: &str, p: u16, q: u16, r: u16, f1: f64) -> EvalRecord {
        EvalRecord {
            agent: agent.into(),
            family: Some(FamilyRecord::new(p, q, r, 10_000, 3).unwrap()),
            train_macro_f1: f1,
            valid_macro_f1: f1,
            test_macro_f1: f1,
            test_accuracy: f1,
            test_f1: vec![f1; 10],
            valid_f1: vec![f1; 10],
            duration_seconds: 1.0,
            test_scores: (0..20).map(|i| if i % 11 == 0 { 0.9 } else { 0.01 }).collect(),
            test_labels: vec![0, 1],
        }
    }

    #[test]
    fn rows_follow_roster_order() {
        let evals = vec![
            record("a", 16, 50, 50, 0.9),
            record("b", 19, 19, 19, 0.8),
            record("c", 16, 16, 16, 0.7),
            record("d", 16, 19, 16, 0.6),
        ];
        let order: Vec<String> = family_rows(&evals).iter().map(|(f, _)| f.triple()).collect();
        assert_eq!(order, ["16_16_16", "19_19_19", "16_19_16", "16_50_50"]);
    }

    #[test]
    fn table1_has_eleven_value_columns() {
        let evals = vec![record("c", 16, 16, 16, 0.5)];
        let text = String::from_utf8(table1_csv(&family_rows(&evals)).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "family,0,1,2,3,4,5,6,7,8,9,avg");
        assert_eq!(lines[1], "\"F(16, 16, 16, 10k, 3)\",0.5000,0.5000,0.5000,0.5000,0.5000,0.5000,0.5000,0.5000,0.5000,0.5000,0.5000");
    }

    #[test]
    fn reference_calibration_hard_gates_pass() {
        let doc = dq_document(&AccuracyGrid::reference(), &KdeConfig::default(), true).unwrap();
        let checks = doc.calibration.unwrap();
        for c in checks.iter().filter(|c| c.gate == Gate::Hard) {
            assert!(c.pass, "{} = {:?}", c.score, c.computed);
        }
    }

    #[test]
    fn collective_of_identical_members_matches_member() {
        let evals = vec![record("a", 16, 16, 16, 0.5), record("b", 19, 19, 19, 0.5)];
        let summary = collective(&family_rows(&evals), CollectiveMode::F1WeightedSoft)
            .unwrap()
            .unwrap();
        assert_eq!(summary.members, 2);
        assert_eq!(summary.test_accuracy, 1.0);
    }

    #[test]
    fn svg_contains_axes_diagonal_and_auc() {
        let curve = RocCurve {
            class: 0,
            points: vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)],
            auc: 1.0,
        };
        let svg = roc_svg("F(16, 16, 16, 10k, 3) class 0", &curve);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("AUC = 1.0000"));
        assert!(svg.contains("M50.00 50.00 L50.00 310.00 L310.00 310.00"));
    }
}
