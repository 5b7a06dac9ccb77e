//! Confusion-matrix construction and derived performance measures.
//!
//! All derived values are computed in f64. Zero-count rows or columns make
//! individual precision/recall terms undefined; reports flag those classes
//! explicitly instead of silently substituting zero, and macro averages run
//! over the defined terms only.

use crate::error::{Error, Result};
use crate::label::QualityLabel;

/// 3x3 integer counts; row = true class, column = predicted class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; 3]; 3]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (QualityLabel, QualityLabel)>) -> Self {
        let mut cm = Self::new();
        for (truth, predicted) in pairs {
            cm.record(truth, predicted);
        }
        cm
    }

    pub fn record(&mut self, truth: QualityLabel, predicted: QualityLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn counts(&self) -> &[[u64; 3]; 3] {
        &self.counts
    }

    pub fn count(&self, truth: QualityLabel, predicted: QualityLabel) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, class: QualityLabel) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn column_total(&self, class: QualityLabel) -> u64 {
        self.counts.iter().map(|r| r[class.index()]).sum()
    }

    /// Fraction of correctly classified samples; NaN for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..3).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total() as f64
    }

    /// Three CSV rows of raw counts, row order good/usable/unusable.
    pub fn to_csv(&self) -> String {
        self.counts
            .iter()
            .map(|r| format!("{},{},{}\n", r[0], r[1], r[2]))
            .collect()
    }
}

/// Row-normalized matrix; rows with zero count are flagged and left zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMatrix {
    pub rows: [[f64; 3]; 3],
    pub undefined_rows: Vec<usize>,
}

pub fn normalize_rows(cm: &ConfusionMatrix) -> NormalizedMatrix {
    let mut rows = [[0.0f64; 3]; 3];
    let mut undefined_rows = Vec::new();
    for i in 0..3 {
        let total: u64 = cm.counts()[i].iter().sum();
        if total == 0 {
            undefined_rows.push(i);
            continue;
        }
        for j in 0..3 {
            rows[i][j] = cm.counts()[i][j] as f64 / total as f64;
        }
    }
    NormalizedMatrix { rows, undefined_rows }
}

/// Per-class precision: true predictions over all predictions of the class.
/// None when the class was never predicted.
pub fn precision_terms(cm: &ConfusionMatrix) -> [Option<f64>; 3] {
    let mut terms = [None; 3];
    for (j, term) in terms.iter_mut().enumerate() {
        let col: u64 = cm.counts().iter().map(|r| r[j]).sum();
        if col > 0 {
            *term = Some(cm.counts()[j][j] as f64 / col as f64);
        }
    }
    terms
}

/// Per-class recall (class-conditional accuracy). None when the class has
/// no true samples.
pub fn recall_terms(cm: &ConfusionMatrix) -> [Option<f64>; 3] {
    let mut terms = [None; 3];
    for (i, term) in terms.iter_mut().enumerate() {
        let row: u64 = cm.counts()[i].iter().sum();
        if row > 0 {
            *term = Some(cm.counts()[i][i] as f64 / row as f64);
        }
    }
    terms
}

fn mean_of_defined(terms: &[Option<f64>; 3]) -> f64 {
    let defined: Vec<f64> = terms.iter().flatten().copied().collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// Macro precision over the defined class terms.
pub fn precision_macro(cm: &ConfusionMatrix) -> f64 {
    mean_of_defined(&precision_terms(cm))
}

/// Macro recall over the defined class terms.
pub fn recall_macro(cm: &ConfusionMatrix) -> f64 {
    mean_of_defined(&recall_terms(cm))
}

/// Harmonic mean of precision and recall.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        return 0.0;
    }
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f_score: f64,
    pub normalized: NormalizedMatrix,
    /// Classes whose precision term is undefined (never predicted).
    pub undefined_precision: Vec<usize>,
    /// Classes whose recall term is undefined (no true samples).
    pub undefined_recall: Vec<usize>,
}

impl MetricsReport {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Self {
        let p_terms = precision_terms(cm);
        let r_terms = recall_terms(cm);
        let p = mean_of_defined(&p_terms);
        let r = mean_of_defined(&r_terms);
        MetricsReport {
            accuracy: cm.accuracy(),
            precision_macro: p,
            recall_macro: r,
            f_score: f_score(p, r),
            normalized: normalize_rows(cm),
            undefined_precision: (0..3).filter(|&j| p_terms[j].is_none()).collect(),
            undefined_recall: (0..3).filter(|&i| r_terms[i].is_none()).collect(),
        }
    }

    pub fn has_undefined_terms(&self) -> bool {
        !self.undefined_precision.is_empty() || !self.undefined_recall.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("accuracy        {:.4}\n", self.accuracy));
        out.push_str(&format!("precision_macro {:.4}\n", self.precision_macro));
        out.push_str(&format!("recall_macro    {:.4}\n", self.recall_macro));
        out.push_str(&format!("f_score         {:.4}\n", self.f_score));
        out.push_str("normalized confusion matrix (rows = true good/usable/unusable):\n");
        for (i, row) in self.normalized.rows.iter().enumerate() {
            if self.normalized.undefined_rows.contains(&i) {
                out.push_str("  [no samples]\n");
            } else {
                out.push_str(&format!("  {:.4} {:.4} {:.4}\n", row[0], row[1], row[2]));
            }
        }
        for j in &self.undefined_precision {
            out.push_str(&format!(
                "note: precision undefined for class {} (never predicted)\n",
                QualityLabel::from_index(*j).unwrap()
            ));
        }
        for i in &self.undefined_recall {
            out.push_str(&format!(
                "note: recall undefined for class {} (no true samples)\n",
                QualityLabel::from_index(*i).unwrap()
            ));
        }
        out
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\naccuracy,{:.6}\nprecision_macro,{:.6}\nrecall_macro,{:.6}\nf_score,{:.6}\n",
            self.accuracy, self.precision_macro, self.recall_macro, self.f_score
        )
    }
}

/// Among candidates whose accuracy lies in `[band.0, band.1]`, pick the one
/// maximizing the class-conditional accuracy of `target`; ties break toward
/// higher overall accuracy, then first occurrence. Returns the index.
pub fn scenario_select(
    candidates: &[ConfusionMatrix],
    target: QualityLabel,
    band: (f64, f64),
) -> Result<usize> {
    let t = target.index();
    let mut best: Option<(usize, f64, f64)> = None; // (index, diag, accuracy)
    for (i, cm) in candidates.iter().enumerate() {
        let acc = cm.accuracy();
        if !(acc >= band.0 && acc <= band.1) {
            continue;
        }
        let norm = normalize_rows(cm);
        if norm.undefined_rows.contains(&t) {
            continue;
        }
        let diag = norm.rows[t][t];
        let better = match best {
            None => true,
            Some((_, bd, ba)) => diag > bd || (diag == bd && acc > ba),
        };
        if better {
            best = Some((i, diag, acc));
        }
    }
    best.map(|(i, _, _)| i).ok_or_else(|| {
        Error::Metric(format!(
            "no candidate with defined {target} row has accuracy within [{}, {}]",
            band.0, band.1
        ))
    })
}
