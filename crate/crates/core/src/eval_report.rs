//! Accuracy, confusion matrices and ranked comparison tables.
//!
//! Confusion matrices are indexed `[true][predicted]`.
//!
//! Report CSV schema (`kind,true_class,predicted_class,value`):
//!
//! ```text
//! samples,,,<n>
//! overall_accuracy_pct,,,<pct>
//! class_accuracy_pct,<class>,,<pct>          one row per class
//! confusion,<true>,<predicted>,<count>       16 rows, row-major
//! ```
//!
//! Comparison CSV schema: `run_label,accuracy_pct,rank`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::classifier::MlpModel;
use crate::dataset::ClassLabel;
use crate::error::{Error, Result};

const K: usize = ClassLabel::COUNT;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub per_class_accuracy: [f64; K],
    pub confusion: [[usize; K]; K],
    pub n: usize,
}

impl EvalReport {
    pub fn from_predictions(truth: &[ClassLabel], predicted: &[ClassLabel]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimMismatch {
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        let mut confusion = [[0usize; K]; K];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.ordinal()][p.ordinal()] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: [[usize; K]; K]) -> Result<Self> {
        let n: usize = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::Empty("no samples to evaluate".into()));
        }
        let trace: usize = (0..K).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = std::array::from_fn(|i| {
            let row: usize = confusion[i].iter().sum();
            if row == 0 {
                0.0
            } else {
                confusion[i][i] as f64 / row as f64
            }
        });
        Ok(Self {
            overall_accuracy: trace as f64 / n as f64,
            per_class_accuracy,
            confusion,
            n,
        })
    }

    pub fn correct(&self) -> usize {
        (0..K).map(|i| self.confusion[i][i]).sum()
    }

    pub fn row_sums(&self) -> [usize; K] {
        std::array::from_fn(|i| self.confusion[i].iter().sum())
    }

    pub fn column_sums(&self) -> [usize; K] {
        std::array::from_fn(|j| (0..K).map(|i| self.confusion[i][j]).sum())
    }
}

pub fn evaluate(model: &MlpModel, descriptors: &[Vec<f64>], labels: &[ClassLabel]) -> Result<EvalReport> {
    if descriptors.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: descriptors.len(),
            found: labels.len(),
        });
    }
    if descriptors.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let predicted = descriptors
        .iter()
        .map(|d| model.predict(d).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(labels, &predicted)
}

/// Fraction as a percentage with two decimals, e.g. `0.925` → `"92.50%"`.
pub fn format_percent(fraction: f64) -> String {
    format!("{}%", format_pct_value(fraction))
}

fn format_pct_value(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

pub fn render_report(r: &EvalReport, format: ReportFormat) -> Result<Vec<u8>> {
    if r.n == 0 {
        return Err(Error::Empty("report has no samples".into()));
    }
    let mut s = String::new();
    match format {
        ReportFormat::Text => {
            let _ = writeln!(s, "samples: {}", r.n);
            let _ = writeln!(s, "overall accuracy: {}", format_percent(r.overall_accuracy));
            let _ = writeln!(s, "per-class accuracy:");
            for c in ClassLabel::ALL {
                let _ = writeln!(s, "  {:<9} {:>7}", c.to_string(), format_percent(r.per_class_accuracy[c.ordinal()]));
            }
            let _ = writeln!(s, "confusion (rows true, columns predicted):");
            let _ = write!(s, "  {:<9}", "");
            for c in ClassLabel::ALL {
                let _ = write!(s, " {:>8}", c.to_string());
            }
            s.push('\n');
            for t in ClassLabel::ALL {
                let _ = write!(s, "  {:<9}", t.to_string());
                for p in ClassLabel::ALL {
                    let _ = write!(s, " {:>8}", r.confusion[t.ordinal()][p.ordinal()]);
                }
                s.push('\n');
            }
        }
        ReportFormat::Csv => {
            s.push_str("kind,true_class,predicted_class,value\n");
            let _ = writeln!(s, "samples,,,{}", r.n);
            let _ = writeln!(s, "overall_accuracy_pct,,,{}", format_pct_value(r.overall_accuracy));
            for c in ClassLabel::ALL {
                let _ = writeln!(
                    s,
                    "class_accuracy_pct,{},,{}",
                    c.as_str(),
                    format_pct_value(r.per_class_accuracy[c.ordinal()])
                );
            }
            for t in ClassLabel::ALL {
                for p in ClassLabel::ALL {
                    let _ = writeln!(
                        s,
                        "confusion,{},{},{}",
                        t.as_str(),
                        p.as_str(),
                        r.confusion[t.ordinal()][p.ordinal()]
                    );
                }
            }
        }
    }
    Ok(s.into_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankFlag {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRun {
    pub label: String,
    pub accuracy: f64,
    /// 1-based position in the sorted table.
    pub rank: usize,
    pub flag: Option<RankFlag>,
}

/// Sort by accuracy descending, ties by label; flag the top two rows.
pub fn compare_runs(runs: &[(String, f64)]) -> Vec<RankedRun> {
    let mut sorted: Vec<&(String, f64)> = runs.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, (label, accuracy))| RankedRun {
            label: label.clone(),
            accuracy: *accuracy,
            rank: i + 1,
            flag: match i {
                0 => Some(RankFlag::Best),
                1 => Some(RankFlag::Second),
                _ => None,
            },
        })
        .collect()
}

pub fn compare_reports(reports: &[(String, EvalReport)]) -> Vec<RankedRun> {
    let runs: Vec<(String, f64)> = reports
        .iter()
        .map(|(l, r)| (l.clone(), r.overall_accuracy))
        .collect();
    compare_runs(&runs)
}

pub fn render_comparison(rows: &[RankedRun], format: ReportFormat) -> Vec<u8> {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str("run_label,accuracy_pct,rank\n");
            for r in rows {
                let _ = writeln!(s, "{},{},{}", r.label, format_pct_value(r.accuracy), r.rank);
            }
        }
        ReportFormat::Text => {
            let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(3);
            let _ = writeln!(s, "rank  {:<width$}  accuracy", "run");
            for r in rows {
                let mark = match r.flag {
                    Some(RankFlag::Best) => "  best",
                    Some(RankFlag::Second) => "  second",
                    None => "",
                };
                let _ = writeln!(
                    s,
                    "{:>4}  {:<width$}  {:>8}{mark}",
                    r.rank,
                    r.label,
                    format_percent(r.accuracy)
                );
            }
        }
    }
    s.into_bytes()
}

/// Published image-wise accuracies on the four-class challenge test set, for
/// side-by-side display only. Not produced by this crate.
pub const PUBLISHED_BASELINES_CSV: &str = "\
# published image-wise accuracies (reference values, not reproduced here)
run_label,accuracy_pct
inceptionresnetv2-patches,79.00
handcrafted-features-svm,79.20
alexnet-finetuned,81.25
cnn-features-lightgbm,87.20
inceptionv3-ensemble,87.50
xception-descriptor-mlp,92.50
";

/// `(label, fraction)` rows of [`PUBLISHED_BASELINES_CSV`].
pub fn published_baselines() -> Vec<(String, f64)> {
    let body: String = PUBLISHED_BASELINES_CSV
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    rdr.records()
        .map(|r| {
            let r = r.expect("static table is well formed");
            let pct: f64 = r[1].parse().expect("static table is well formed");
            (r[0].to_string(), pct / 100.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    #[test]
    fn two_decimal_percent() {
        assert_eq!(format_percent(0.925), "92.50%");
        assert_eq!(format_percent(1.0), "100.00%");
        assert_eq!(format_percent(0.0), "0.00%");
        assert_eq!(format_percent(0.9), "90.00%");
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let truth = [Normal, Benign, InSitu, Invasive, Benign];
        let r = EvalReport::from_predictions(&truth, &truth).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.per_class_accuracy, [1.0; 4]);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(r.confusion[i][j], 0);
                }
            }
        }
        assert_eq!(r.confusion[1][1], 2);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let truth: Vec<ClassLabel> = ClassLabel::ALL.iter().flat_map(|&c| [c; 5]).collect();
        let pred = vec![InSitu; truth.len()];
        let r = EvalReport::from_predictions(&truth, &pred).unwrap();
        assert_eq!(r.overall_accuracy, 0.25);
        assert_eq!(r.per_class_accuracy, [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.column_sums(), [0, 0, 20, 0]);
        assert_eq!(r.row_sums(), [5; 4]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(EvalReport::from_predictions(&[], &[]), Err(Error::Empty(_))));
        assert!(EvalReport::from_predictions(&[Normal], &[]).is_err());
        let empty = EvalReport {
            overall_accuracy: 0.0,
            per_class_accuracy: [0.0; 4],
            confusion: [[0; 4]; 4],
            n: 0,
        };
        assert!(render_report(&empty, ReportFormat::Text).is_err());
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!(matches!("xml".parse::<ReportFormat>(), Err(Error::UnknownFormat(_))));
        assert_eq!("CSV".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    }

    #[test]
    fn text_report_shows_percentages() {
        let mut conf = [[0; 4]; 4];
        conf[0][0] = 37;
        conf[1][1] = 37;
        conf[2][2] = 37;
        conf[3][3] = 37;
        conf[3][2] = 12;
        let r = EvalReport::from_confusion(conf).unwrap();
        assert_eq!(r.overall_accuracy, 148.0 / 160.0);
        let text = String::from_utf8(render_report(&r, ReportFormat::Text).unwrap()).unwrap();
        assert!(text.contains("overall accuracy: 92.50%"), "{text}");
        assert_eq!(render_report(&r, ReportFormat::Text).unwrap(), text.into_bytes());
    }

    #[test]
    fn ranking_orders_and_flags() {
        let rows = compare_runs(&[("inceptionv3".into(), 0.90), ("xception".into(), 0.925)]);
        assert_eq!(rows[0].label, "xception");
        assert_eq!(rows[0].flag, Some(RankFlag::Best));
        assert_eq!(rows[1].flag, Some(RankFlag::Second));
        assert_eq!(rows[1].rank, 2);

        let single = compare_runs(&[("only".into(), 0.5)]);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].flag, Some(RankFlag::Best));

        let tied = compare_runs(&[("b".into(), 0.8), ("a".into(), 0.8), ("c".into(), 0.9)]);
        let order: Vec<&str> = tied.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
        let csv = String::from_utf8(render_comparison(&tied, ReportFormat::Csv)).unwrap();
        assert_eq!(csv, "run_label,accuracy_pct,rank\nc,90.00,1\na,80.00,2\nb,80.00,3\n");
    }

    #[test]
    fn published_table_loads() {
        let rows = published_baselines();
        let pcts: Vec<String> = rows.iter().map(|r| format_percent(r.1)).collect();
        assert_eq!(pcts, ["79.00%", "79.20%", "81.25%", "87.20%", "87.50%", "92.50%"]);
        assert_eq!(compare_runs(&rows)[0].label, "xception-descriptor-mlp");
    }
}
