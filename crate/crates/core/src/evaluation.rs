//! Deception metrics over attacker/expert annotations.
//!
//! A "positive" here is an output that reveals the honeypot. Attackers flag
//! outputs as FORGED (honeypot) or REAL, experts say whether the output was
//! actually revealing. A perfect honeypot yields only true negatives.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Real,
    Forged,
}

impl FromStr for Label {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "REAL" => Ok(Label::Real),
            "FORGED" => Ok(Label::Forged),
            other => Err(EvalError::InvalidLabel(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

/// Maps an (attacker, expert) label pair onto its confusion-matrix cell.
pub fn classify(attacker: Label, expert: Label) -> Cell {
    match (attacker, expert) {
        (Label::Forged, Label::Forged) => Cell::TruePositive,
        (Label::Forged, Label::Real) => Cell::FalsePositive,
        (Label::Real, Label::Forged) => Cell::FalseNegative,
        (Label::Real, Label::Real) => Cell::TrueNegative,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub turn_index: usize,
    pub command: String,
    pub attacker_label: Label,
    pub expert_label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("duplicate annotation for session {session_id} turn {turn_index}")]
    DuplicateRecord { session_id: String, turn_index: usize },
    #[error("invalid label {0:?}, expected REAL or FORGED")]
    InvalidLabel(String),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("annotation file: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, cell: Cell) {
        match cell {
            Cell::TruePositive => self.tp += 1,
            Cell::FalsePositive => self.fp += 1,
            Cell::FalseNegative => self.fn_ += 1,
            Cell::TrueNegative => self.tn += 1,
        }
    }

    /// Parses `tp=41,fp=17,fn=1,tn=167`. Missing cells default to zero.
    pub fn parse_spec(spec: &str) -> Result<Self, EvalError> {
        let mut counts = Self::default();
        let mut seen = HashSet::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| EvalError::InvalidCounts(format!("expected key=value, got {part:?}")))?;
            let key = key.trim().to_ascii_lowercase();
            let value: u64 = value
                .trim()
                .parse()
                .map_err(|_| EvalError::InvalidCounts(format!("{key} is not a non-negative integer")))?;
            if !seen.insert(key.clone()) {
                return Err(EvalError::InvalidCounts(format!("{key} given twice")));
            }
            match key.as_str() {
                "tp" => counts.tp = value,
                "fp" => counts.fp = value,
                "fn" => counts.fn_ = value,
                "tn" => counts.tn = value,
                other => return Err(EvalError::InvalidCounts(format!("unknown cell {other:?}"))),
            }
        }
        Ok(counts)
    }

    pub fn from_json(json: &str) -> Result<Self, EvalError> {
        serde_json::from_str(json).map_err(|e| EvalError::InvalidCounts(e.to_string()))
    }
}

/// Folds [`classify`] over the records. Each (session, turn) may appear once.
pub fn aggregate(records: &[AnnotationRecord]) -> Result<ConfusionCounts, EvalError> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut counts = ConfusionCounts::default();
    for r in records {
        if !seen.insert((r.session_id.as_str(), r.turn_index)) {
            return Err(EvalError::DuplicateRecord {
                session_id: r.session_id.clone(),
                turn_index: r.turn_index,
            });
        }
        counts.add(classify(r.attacker_label, r.expert_label));
    }
    Ok(counts)
}

/// A rate whose denominator may be zero; undefined rates read as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub defined: bool,
}

impl Metric {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Self {
                value: 0.0,
                defined: false,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                defined: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// (TP + TN) / (TP + TN + FP + FN)
    pub accuracy: Metric,
    /// FN / (FN + TP)
    pub fnr: Metric,
    /// TN / (TN + FP)
    pub tnr: Metric,
    /// FP / (FP + TP)
    pub fdr: Metric,
    /// FP / (FP + TN), the complement of TNR.
    pub fpr_supplementary: Metric,
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    MetricsReport {
        accuracy: Metric::ratio(c.tp + c.tn, c.total()),
        fnr: Metric::ratio(c.fn_, c.fn_ + c.tp),
        tnr: Metric::ratio(c.tn, c.tn + c.fp),
        fdr: Metric::ratio(c.fp, c.fp + c.tp),
        fpr_supplementary: Metric::ratio(c.fp, c.fp + c.tn),
    }
}

pub fn render_metrics(counts: &ConfusionCounts, m: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "               Experts");
    let _ = writeln!(out, "  Attackers    REAL  FORGED");
    let _ = writeln!(out, "     REAL    {:>6}  {:>6}", counts.tn, counts.fn_);
    let _ = writeln!(out, "     FORGED  {:>6}  {:>6}", counts.fp, counts.tp);
    let _ = writeln!(out);
    let rows = [
        ("Accuracy", m.accuracy),
        ("False Negative Rate", m.fnr),
        ("True Negative Rate", m.tnr),
        ("False Discovery Rate", m.fdr),
        ("False Positive Rate", m.fpr_supplementary),
    ];
    for (name, metric) in rows {
        let suffix = if metric.defined { "" } else { "  (undefined)" };
        let _ = writeln!(out, "{name:>22} : {:.4}{suffix}", metric.value);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRow {
    pub user: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
}

// Numeric ids sort numerically ("2" before "10"), everything else after.
fn user_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// One row per session id. Empty groups never appear.
pub fn per_user_report(records: &[AnnotationRecord]) -> Result<Vec<UserRow>, EvalError> {
    aggregate(records)?;
    let mut groups: BTreeMap<&str, ConfusionCounts> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.session_id.as_str())
            .or_default()
            .add(classify(r.attacker_label, r.expert_label));
    }
    let mut rows: Vec<UserRow> = groups
        .into_iter()
        .filter(|(_, c)| c.total() > 0)
        .map(|(user, counts)| user_row(user, counts))
        .collect();
    rows.sort_by(|a, b| user_order(&a.user, &b.user));
    Ok(rows)
}

pub fn user_row(user: impl Into<String>, counts: ConfusionCounts) -> UserRow {
    UserRow {
        user: user.into(),
        counts,
        metrics: compute_metrics(&counts),
    }
}

/// Rounds to three decimals the way the per-user table prints.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn render_user_table(rows: &[UserRow]) -> String {
    let width = rows.iter().map(|r| r.user.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>6}  {:>6}  {:>6}",
        "User", "Accuracy", "FNR", "TNR", "FDR"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.3}  {:>6.3}  {:>6.3}  {:>6.3}",
            r.user, m.accuracy.value, m.fnr.value, m.tnr.value, m.fdr.value
        );
    }
    out
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    session_id: String,
    turn_index: usize,
    command: String,
    attacker_label: String,
    expert_label: String,
}

const CSV_HEADER: [&str; 5] = ["session_id", "turn_index", "command", "attacker_label", "expert_label"];

/// Reads `session_id,turn_index,command,attacker_label,expert_label` CSV.
pub fn read_annotations<R: Read>(reader: R) -> Result<Vec<AnnotationRecord>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| EvalError::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers != CSV_HEADER {
        return Err(EvalError::Csv(format!(
            "expected header {}, got {}",
            CSV_HEADER.join(","),
            headers.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| EvalError::Csv(e.to_string()))?;
        out.push(AnnotationRecord {
            session_id: row.session_id,
            turn_index: row.turn_index,
            command: row.command,
            attacker_label: row.attacker_label.parse()?,
            expert_label: row.expert_label.parse()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(session: &str, turn: usize, a: Label, e: Label) -> AnnotationRecord {
        AnnotationRecord {
            session_id: session.into(),
            turn_index: turn,
            command: "ls".into(),
            attacker_label: a,
            expert_label: e,
        }
    }

    #[test]
    fn classify_cells() {
        use Label::*;
        assert_eq!(classify(Forged, Forged), Cell::TruePositive);
        assert_eq!(classify(Forged, Real), Cell::FalsePositive);
        assert_eq!(classify(Real, Forged), Cell::FalseNegative);
        assert_eq!(classify(Real, Real), Cell::TrueNegative);
    }

    #[test]
    fn aggregate_small_cases() {
        assert_eq!(aggregate(&[]).unwrap(), ConfusionCounts::default());
        let recs: Vec<_> = (0..3).map(|i| rec("u", i, Label::Real, Label::Real)).collect();
        assert_eq!(aggregate(&recs).unwrap(), ConfusionCounts::new(0, 0, 0, 3));
    }

    #[test]
    fn duplicates_rejected() {
        let recs = [rec("u", 0, Label::Real, Label::Real), rec("u", 0, Label::Forged, Label::Real)];
        assert_eq!(
            aggregate(&recs).unwrap_err(),
            EvalError::DuplicateRecord {
                session_id: "u".into(),
                turn_index: 0
            }
        );
    }

    #[test]
    fn perfect_honeypot_metrics() {
        let m = compute_metrics(&ConfusionCounts::new(0, 0, 0, 10));
        assert_eq!(m.accuracy, Metric { value: 1.0, defined: true });
        assert_eq!(m.tnr, Metric { value: 1.0, defined: true });
        assert_eq!(m.fnr, Metric { value: 0.0, defined: false });
        assert_eq!(m.fdr, Metric { value: 0.0, defined: false });
    }

    #[test]
    fn empty_counts_all_undefined() {
        let m = compute_metrics(&ConfusionCounts::default());
        assert!(!m.accuracy.defined && !m.tnr.defined && !m.fnr.defined && !m.fdr.defined);
    }

    #[test]
    fn counts_spec_parsing() {
        assert_eq!(
            ConfusionCounts::parse_spec("tp=41,fp=17,fn=1,tn=167").unwrap(),
            ConfusionCounts::new(41, 17, 1, 167)
        );
        assert_eq!(ConfusionCounts::parse_spec(" TN = 3 ").unwrap(), ConfusionCounts::new(0, 0, 0, 3));
        assert!(ConfusionCounts::parse_spec("tp=1,tp=2").is_err());
        assert!(ConfusionCounts::parse_spec("xx=1").is_err());
        assert!(ConfusionCounts::parse_spec("tp=-1").is_err());
        assert!(ConfusionCounts::parse_spec("tp").is_err());
    }

    #[test]
    fn counts_json() {
        let c = ConfusionCounts::from_json(r#"{"tp": 41, "fp": 17, "fn": 1, "tn": 167}"#).unwrap();
        assert_eq!(c.total(), 226);
    }

    #[test]
    fn per_user_rows_sorted_and_nonempty() {
        let recs = vec![
            rec("10", 0, Label::Real, Label::Real),
            rec("2", 0, Label::Forged, Label::Forged),
            rec("2", 1, Label::Real, Label::Forged),
        ];
        let rows = per_user_report(&recs).unwrap();
        assert_eq!(rows.iter().map(|r| r.user.as_str()).collect::<Vec<_>>(), ["2", "10"]);
        assert_eq!(rows[0].metrics.fnr.value, 0.5);
        assert!(per_user_report(&[]).unwrap().is_empty());
        let table = render_user_table(&rows);
        assert!(table.contains("0.500"));
    }

    #[test]
    fn csv_ingest() {
        let data = "session_id,turn_index,command,attacker_label,expert_label\n\
                    u1,0,\"cat .bashrc\",FORGED,REAL\n\
                    u1,1,w,FORGED,FORGED\n";
        let recs = read_annotations(data.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].command, "cat .bashrc");
        assert_eq!(aggregate(&recs).unwrap(), ConfusionCounts::new(1, 1, 0, 0));
    }

    #[test]
    fn csv_rejects_bad_label_and_header() {
        let bad = "session_id,turn_index,command,attacker_label,expert_label\nu,0,ls,MAYBE,REAL\n";
        assert_eq!(
            read_annotations(bad.as_bytes()).unwrap_err(),
            EvalError::InvalidLabel("MAYBE".into())
        );
        assert!(matches!(read_annotations("a,b\n1,2\n".as_bytes()), Err(EvalError::Csv(_))));
    }
}
