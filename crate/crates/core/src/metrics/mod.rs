//! Image-wise and patient-wise evaluation: confusion metrics, majority voting
//! with malignant tie-breaks, recognition rates, PPV samples, Welch t-tests
//! and fold aggregation.

pub mod report;
pub mod ttest;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax_class, check_distribution, Label, ProbRow};

pub use self::report::{build_report, render_report, CVReport, CellKey, ReportFormat};
pub use self::ttest::{welch_ttest, TTest};

/// One test-image prediction, as stored in run directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub patient_id: String,
    pub true_label: Label,
    pub p_benign: f64,
    pub p_malignant: f64,
}

impl Prediction {
    pub fn probs(&self) -> ProbRow {
        [self.p_benign, self.p_malignant]
    }

    pub fn predicted(&self) -> Label {
        argmax_class(self.probs())
    }

    pub fn correct(&self) -> bool {
        self.predicted() == self.true_label
    }
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in preds {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let p: Prediction = row?;
        check_distribution(p.probs())?;
        out.push(p);
    }
    Ok(out)
}

/// Counts with malignant as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(predicted: &[Label], truth: &[Label]) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in predicted.iter().zip(truth) {
        match (p, t) {
            (Label::Malignant, Label::Malignant) => cm.tp += 1,
            (Label::Malignant, Label::Benign) => cm.fp += 1,
            (Label::Benign, Label::Benign) => cm.tn += 1,
            (Label::Benign, Label::Malignant) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Fractions in `[0, 1]`; a ratio with a zero denominator is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["accuracy", "precision", "specificity", "sensitivity", "f1"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [
            Some(self.accuracy),
            self.precision,
            self.specificity,
            self.sensitivity,
            self.f1,
        ]
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix"));
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let sensitivity = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    Ok(Metrics {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        sensitivity,
        f1,
    })
}

/// Patient diagnosis from image predictions: benign only on a strict benign
/// majority, so ties go to malignant.
pub fn patient_vote(predicted: &[Label]) -> Result<Label> {
    if predicted.is_empty() {
        return Err(Error::EmptyInput("patient images"));
    }
    let n_p = predicted.len();
    let b_p = predicted.iter().filter(|l| **l == Label::Benign).count();
    Ok(if b_p > n_p - b_p {
        Label::Benign
    } else {
        Label::Malignant
    })
}

/// Mean over patients of the fraction of that patient's images classified
/// correctly. Entries are `(n_correct, n_images)`.
pub fn patient_recognition_rate(per_patient: &[(usize, usize)]) -> Result<f64> {
    if per_patient.is_empty() {
        return Err(Error::EmptyInput("patient set"));
    }
    let mut sum = 0.0;
    for &(n_cor, n_p) in per_patient {
        if n_p == 0 {
            return Err(Error::EmptyInput("patient images"));
        }
        if n_cor > n_p {
            return Err(Error::LengthMismatch(n_cor, n_p));
        }
        sum += n_cor as f64 / n_p as f64;
    }
    Ok(sum / per_patient.len() as f64)
}

/// Probability assigned to the true class of each row.
pub fn ppv_extract(rows: &[ProbRow], truth: &[Label]) -> Result<Vec<f64>> {
    if rows.len() != truth.len() {
        return Err(Error::LengthMismatch(rows.len(), truth.len()));
    }
    rows.iter()
        .zip(truth)
        .map(|(&r, t)| {
            check_distribution(r)?;
            Ok(r[t.index()])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpvSample {
    pub image_id: String,
    pub true_label: Label,
    pub ppv: f64,
}

pub fn ppv_samples(preds: &[Prediction]) -> Result<Vec<PpvSample>> {
    let rows: Vec<ProbRow> = preds.iter().map(Prediction::probs).collect();
    let truth: Vec<Label> = preds.iter().map(|p| p.true_label).collect();
    Ok(ppv_extract(&rows, &truth)?
        .into_iter()
        .zip(preds)
        .map(|(ppv, p)| PpvSample {
            image_id: p.image_id.clone(),
            true_label: p.true_label,
            ppv,
        })
        .collect())
}

/// A patient's images gathered for voting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientVoteInput {
    pub patient_id: String,
    pub predicted: Vec<Label>,
    pub probs: Vec<ProbRow>,
    pub truth: Label,
}

impl PatientVoteInput {
    pub fn n_correct(&self) -> usize {
        self.predicted.iter().filter(|l| **l == self.truth).count()
    }

    pub fn mean_ppv(&self) -> f64 {
        self.probs.iter().map(|r| r[self.truth.index()]).sum::<f64>() / self.probs.len() as f64
    }

    /// `(B_p − (N_p − B_p)) / N_p`: positive leans benign, negative malignant.
    pub fn vote_margin(&self) -> f64 {
        let n = self.predicted.len() as f64;
        let b = self.predicted.iter().filter(|l| **l == Label::Benign).count() as f64;
        (2.0 * b - n) / n
    }
}

/// Group predictions by patient, ordered by patient id.
pub fn group_by_patient(preds: &[Prediction]) -> Result<Vec<PatientVoteInput>> {
    let mut map: BTreeMap<&str, PatientVoteInput> = BTreeMap::new();
    for p in preds {
        let entry = map.entry(&p.patient_id).or_insert_with(|| PatientVoteInput {
            patient_id: p.patient_id.clone(),
            predicted: Vec::new(),
            probs: Vec::new(),
            truth: p.true_label,
        });
        if entry.truth != p.true_label {
            return Err(Error::DuplicatePatientId(p.patient_id.clone()));
        }
        entry.predicted.push(p.predicted());
        entry.probs.push(p.probs());
    }
    Ok(map.into_values().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub sd: f64,
    pub n: usize,
}

pub fn mean_sd(values: &[f64]) -> Result<MeanSd> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewFolds(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(MeanSd {
        mean,
        sd: var.sqrt(),
        n,
    })
}

/// Per-metric mean ± SD across folds; a metric defined in fewer than two
/// folds is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: MeanSd,
    pub precision: Option<MeanSd>,
    pub specificity: Option<MeanSd>,
    pub sensitivity: Option<MeanSd>,
    pub f1: Option<MeanSd>,
}

impl AggregateMetrics {
    pub fn values(&self) -> [Option<MeanSd>; 5] {
        [
            Some(self.accuracy),
            self.precision,
            self.specificity,
            self.sensitivity,
            self.f1,
        ]
    }
}

pub fn aggregate_cv(folds: &[Metrics]) -> Result<AggregateMetrics> {
    if folds.len() < 2 {
        return Err(Error::TooFewFolds(folds.len()));
    }
    let pick = |f: fn(&Metrics) -> Option<f64>| -> Option<MeanSd> {
        let v: Vec<f64> = folds.iter().filter_map(f).collect();
        mean_sd(&v).ok()
    };
    Ok(AggregateMetrics {
        accuracy: mean_sd(&folds.iter().map(|m| m.accuracy).collect::<Vec<_>>())?,
        precision: pick(|m| m.precision),
        specificity: pick(|m| m.specificity),
        sensitivity: pick(|m| m.sensitivity),
        f1: pick(|m| m.f1),
    })
}
