//! Confusion matrices, per-class precision/recall/F1, macro and weighted
//! aggregation, and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// `C × C` counts; rows are gold classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<usize>]) -> Result<Self> {
        let c = rows.len();
        let mut cm = Self::zeros(c);
        for (g, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::LengthMismatch { left: row.len(), right: c });
            }
            for (p, &n) in row.iter().enumerate() {
                cm.counts[g * c + p] = n;
            }
        }
        Ok(cm)
    }

    pub fn from_indices(classes: usize, gold: &[usize], pred: &[usize]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::LengthMismatch {
                left: gold.len(),
                right: pred.len(),
            });
        }
        let mut cm = Self::zeros(classes);
        for (&g, &p) in gold.iter().zip(pred) {
            for i in [g, p] {
                if i >= classes {
                    return Err(Error::IndexOutOfRange { index: i, len: classes });
                }
            }
            cm.counts[g * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gold: usize, pred: usize) -> usize {
        self.counts[gold * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn support(&self, c: usize) -> usize {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn predicted(&self, c: usize) -> usize {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Relabels classes so that old class `perm[i]` becomes class `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let c = self.classes;
        let mut out = Self::zeros(c);
        for g in 0..c {
            for p in 0..c {
                out.counts[g * c + p] = self.get(perm[g], perm[p]);
            }
        }
        out
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.counts.chunks(self.classes.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Confusion matrix over the canonical three labels.
pub fn confusion(gold: &[Label], pred: &[Label]) -> Result<ConfusionMatrix> {
    let g: Vec<usize> = gold.iter().map(|l| l.index()).collect();
    let p: Vec<usize> = pred.iter().map(|l| l.index()).collect();
    ConfusionMatrix::from_indices(Label::COUNT, &g, &p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

/// Harmonic mean of `p` and `r`, 0 when both are 0.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn per_class_prf(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let tp = cm.get(c, c);
    let (precision, p_undef) = ratio(tp, cm.predicted(c));
    let (recall, r_undef) = ratio(tp, cm.support(c));
    ClassMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        support: cm.support(c),
        undefined: p_undef || r_undef || precision + recall == 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub classes: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub total: usize,
}

/// Macro averages run over every class, zero-support ones included.
pub fn aggregate_report(cm: &ConfusionMatrix, class_names: &[String]) -> Result<EvaluationReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::InsufficientData("cannot report on zero samples".into()));
    }
    if class_names.len() != cm.classes() {
        return Err(Error::LengthMismatch {
            left: class_names.len(),
            right: cm.classes(),
        });
    }
    let classes: Vec<ClassMetrics> = (0..cm.classes()).map(|c| per_class_prf(cm, c)).collect();
    let k = classes.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / k;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        classes.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / n as f64
    };
    Ok(EvaluationReport {
        class_names: class_names.to_vec(),
        macro_avg: Averages {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
            support: n,
        },
        weighted_avg: Averages {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
            support: n,
        },
        accuracy: cm.trace() as f64 / n as f64,
        total: n,
        classes,
    })
}

/// Display names of the canonical labels in report order.
pub fn label_names() -> Vec<String> {
    Label::ALL.iter().map(|l| l.name().to_string()).collect()
}

impl EvaluationReport {
    /// Aligned text: class rows, then macro and weighted averages, 4 decimals.
    pub fn render_text(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|s| s.chars().count())
            .chain([12])
            .max()
            .unwrap_or(12);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "", "precision", "recall", "f1-score", "support"
        );
        for (name, m) in self.class_names.iter().zip(&self.classes) {
            let flag = if m.undefined { " *" } else { "" };
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}{flag}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        out.push('\n');
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9.4}  {:>7}", "Accuracy", "", "", self.accuracy, self.total);
        for (name, a) in [("Macro Avg", &self.macro_avg), ("Weighted Avg", &self.weighted_avg)] {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                a.precision, a.recall, a.f1, a.support
            );
        }
        if self.classes.iter().any(|m| m.undefined) {
            out.push_str("* zero denominator; reported as 0\n");
        }
        out
    }

    /// `class,precision,recall,f1,support` rows at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for (name, m) in self.class_names.iter().zip(&self.classes) {
            let _ = writeln!(out, "{name},{:?},{:?},{:?},{}", m.precision, m.recall, m.f1, m.support);
        }
        for (name, a) in [("macro_avg", &self.macro_avg), ("weighted_avg", &self.weighted_avg)] {
            let _ = writeln!(out, "{name},{:?},{:?},{:?},{}", a.precision, a.recall, a.f1, a.support);
        }
        let _ = writeln!(out, "accuracy,{:?},{:?},{:?},{}", self.accuracy, self.accuracy, self.accuracy, self.total);
        out
    }
}

/// One line of a model comparison grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub architecture: String,
    pub embedding: String,
    pub dev_weighted_f1: f64,
    pub test_weighted_f1: Option<f64>,
}

/// Sorts by test weighted-F1, best first; rows without a test score go last.
pub fn sort_comparison(rows: &mut [ComparisonRow]) {
    rows.sort_by(|a, b| {
        let key = |r: &ComparisonRow| r.test_weighted_f1.unwrap_or(f64::NEG_INFINITY);
        key(b)
            .total_cmp(&key(a))
            .then_with(|| b.dev_weighted_f1.total_cmp(&a.dev_weighted_f1))
            .then_with(|| a.architecture.cmp(&b.architecture))
            .then_with(|| a.embedding.cmp(&b.embedding))
    });
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("architecture,embedding,dev_weighted_f1,test_weighted_f1\n");
    for r in rows {
        let test = r.test_weighted_f1.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{:.4},{test}", r.architecture, r.embedding, r.dev_weighted_f1);
    }
    out
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let aw = rows.iter().map(|r| r.architecture.len()).chain([12]).max().unwrap_or(12);
    let ew = rows.iter().map(|r| r.embedding.len()).chain([9]).max().unwrap_or(9);
    let mut out = String::new();
    let _ = writeln!(out, "{:<aw$}  {:<ew$}  {:>10}  {:>10}", "Architecture", "Embedding", "Dev W-F1", "Test W-F1");
    for r in rows {
        let test = r.test_weighted_f1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<aw$}  {:<ew$}  {:>10.4}  {:>10}",
            r.architecture, r.embedding, r.dev_weighted_f1, test
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Hope as H, NotHope as N, OtherLanguage as O};

    #[test]
    fn counting_example() {
        let cm = confusion(&[H, H, N, N, O], &[H, N, N, N, O]).unwrap();
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2)), (1, 2, 1));
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn diagonal_and_empty() {
        let gold = [H, N, O, H, H, N, O];
        let cm = confusion(&gold, &gold).unwrap();
        assert_eq!(cm.trace(), 7);
        let empty = confusion(&[], &[]).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(confusion(&[H], &[]).is_err());
    }

    #[test]
    fn zero_denominator_convention() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 0], vec![0, 0]]).unwrap();
        let m = per_class_prf(&cm, 1);
        assert_eq!((m.precision, m.recall, m.f1, m.support), (0.0, 0.0, 0.0, 0));
        assert!(m.undefined);
        assert!(!per_class_prf(&cm, 0).undefined);
    }

    #[test]
    fn weighted_f1_example() {
        let cm = confusion(&[H, H, N, N, O], &[H, N, N, N, O]).unwrap();
        let r = aggregate_report(&cm, &label_names()).unwrap();
        let expected = (2.0 * (2.0 / 3.0) + 2.0 * 0.8 + 1.0) / 5.0;
        assert!((r.weighted_avg.f1 - expected).abs() < 1e-12);
        assert!((r.weighted_avg.f1 - 0.7867).abs() < 5e-5);
        assert_eq!(r.accuracy, 0.8);
    }

    #[test]
    fn perfect_predictions() {
        let g = [H, N, O, N];
        let r = aggregate_report(&confusion(&g, &g).unwrap(), &label_names()).unwrap();
        for v in [r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1, r.weighted_avg.f1, r.accuracy] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(aggregate_report(&ConfusionMatrix::zeros(3), &label_names()).is_err());
    }

    #[test]
    fn rendering_has_all_rows() {
        let cm = confusion(&[H, H, N, N, O], &[H, N, N, N, H]).unwrap();
        let r = aggregate_report(&cm, &label_names()).unwrap();
        let text = r.render_text();
        for needle in ["Hope", "NotHope", "OtherLanguage", "Macro Avg", "Weighted Avg", "0.6667", "*"] {
            assert!(text.contains(needle), "{needle} missing from\n{text}");
        }
        let csv = r.to_csv();
        assert!(csv.starts_with("class,precision,recall,f1,support\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn comparison_sorts_by_test_f1() {
        let row = |a: &str, d, t| ComparisonRow {
            architecture: a.into(),
            embedding: "e".into(),
            dev_weighted_f1: d,
            test_weighted_f1: t,
        };
        let mut rows = vec![row("a", 0.9, Some(0.5)), row("b", 0.1, None), row("c", 0.2, Some(0.7))];
        sort_comparison(&mut rows);
        let order: Vec<_> = rows.iter().map(|r| r.architecture.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
        assert!(comparison_csv(&rows).contains("c,e,0.2000,0.7000"));
    }
}
