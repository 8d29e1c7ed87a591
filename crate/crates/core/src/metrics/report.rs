//! Cross-validation report: per-fold and aggregated metrics per
//! model × modality × crop cell, PPV t-test grids, and a per-patient audit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ttest::{welch_ttest, TTest, ALPHA};
use super::{
    aggregate_cv, compute_metrics, confusion, group_by_patient, mean_sd, patient_recognition_rate,
    patient_vote, ppv_samples, AggregateMetrics, ConfusionMatrix, MeanSd, Metrics, PpvSample,
    Prediction,
};
use crate::error::{Error, Result};
use crate::types::{Label, Modality};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub modality: Modality,
    pub crop: bool,
}

impl CellKey {
    pub fn new(model: &str, modality: Modality, crop: bool) -> Self {
        Self {
            model: model.to_string(),
            modality,
            crop,
        }
    }

    fn sort_key(&self) -> (bool, usize, usize, String) {
        let modality = Modality::ALL.iter().position(|m| *m == self.modality).unwrap_or(0);
        (self.crop, modality, model_rank(&self.model), self.model.clone())
    }

    pub fn label(&self) -> String {
        format!(
            "{} {} {}",
            model_display(&self.model),
            self.modality.display_name(),
            if self.crop { "cropped" } else { "full" }
        )
    }
}

fn model_rank(model: &str) -> usize {
    ["alexnet", "resnet18", "ensemble", "voting"]
        .iter()
        .position(|m| *m == model)
        .unwrap_or(usize::MAX)
}

pub fn model_display(model: &str) -> String {
    match model {
        "alexnet" => "AlexNet".into(),
        "resnet18" => "ResNet".into(),
        "ensemble" => "Ensemble".into(),
        "voting" => "Ensemble (voting)".into(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientVerdict {
    pub patient_id: String,
    pub truth: Label,
    pub predicted: Label,
    pub n_images: usize,
    pub n_correct: usize,
    pub mean_ppv: f64,
    pub vote_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub fold: usize,
    pub image_confusion: ConfusionMatrix,
    pub patient_confusion: ConfusionMatrix,
    pub image: Metrics,
    pub patient: Metrics,
    pub recognition_rate: f64,
    pub votes: Vec<PatientVerdict>,
    pub ppv: Vec<PpvSample>,
}

/// Image-wise and patient-wise evaluation of one fold's test predictions.
pub fn evaluate_fold(fold: usize, preds: &[Prediction]) -> Result<FoldEval> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("fold predictions"));
    }
    let predicted: Vec<Label> = preds.iter().map(Prediction::predicted).collect();
    let truth: Vec<Label> = preds.iter().map(|p| p.true_label).collect();
    let image_confusion = confusion(&predicted, &truth)?;
    let groups = group_by_patient(preds)?;
    let mut votes = Vec::with_capacity(groups.len());
    for g in &groups {
        votes.push(PatientVerdict {
            patient_id: g.patient_id.clone(),
            truth: g.truth,
            predicted: patient_vote(&g.predicted)?,
            n_images: g.predicted.len(),
            n_correct: g.n_correct(),
            mean_ppv: g.mean_ppv(),
            vote_margin: g.vote_margin(),
        });
    }
    let pv: Vec<Label> = votes.iter().map(|v| v.predicted).collect();
    let pt: Vec<Label> = votes.iter().map(|v| v.truth).collect();
    let patient_confusion = confusion(&pv, &pt)?;
    let counts: Vec<(usize, usize)> = votes.iter().map(|v| (v.n_correct, v.n_images)).collect();
    Ok(FoldEval {
        fold,
        image: compute_metrics(&image_confusion)?,
        patient: compute_metrics(&patient_confusion)?,
        image_confusion,
        patient_confusion,
        recognition_rate: patient_recognition_rate(&counts)?,
        votes,
        ppv: ppv_samples(preds)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub key: CellKey,
    pub folds: Vec<FoldEval>,
    pub image: AggregateMetrics,
    pub patient: AggregateMetrics,
    pub recognition_rate: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueEntry {
    /// `model` compares models on one modality; `modality` compares
    /// modalities for one model.
    pub comparison: String,
    pub a: CellKey,
    pub b: CellKey,
    /// `pooled` or `fold_<k>`.
    pub scope: String,
    pub test: Option<TTest>,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub key: CellKey,
    pub patient_id: String,
    pub truth: Label,
    pub misdiagnosed_folds: usize,
    pub n_folds: usize,
    pub mean_ppv: f64,
    pub mean_vote_margin: f64,
    pub histological_type: Option<String>,
    pub strain_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub standard_deviation: String,
    pub t_test: String,
    pub alpha: f64,
    pub positive_class: String,
    pub patient_tie_rule: String,
}

impl Default for ReportMeta {
    fn default() -> Self {
        Self {
            standard_deviation: "sample (n-1)".into(),
            t_test: "welch two-sided on per-image PPV".into(),
            alpha: ALPHA,
            positive_class: "malignant".into(),
            patient_tie_rule: "malignant".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub meta: ReportMeta,
    pub cells: Vec<CellReport>,
    pub pvalues: Vec<PValueEntry>,
    pub audit: Vec<AuditEntry>,
}

/// Optional per-patient metadata surfaced in the audit.
pub type PatientInfo = BTreeMap<String, (Option<String>, Option<f64>)>;

/// Build a report from per-fold test predictions of each cell.
pub fn build_report(cells: Vec<(CellKey, Vec<Vec<Prediction>>)>, info: &PatientInfo) -> Result<CVReport> {
    if cells.is_empty() {
        return Err(Error::EmptyInput("report"));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (key, folds) in cells {
        if folds.len() < 2 {
            return Err(Error::TooFewFolds(folds.len()));
        }
        let evals = folds
            .iter()
            .enumerate()
            .map(|(k, p)| evaluate_fold(k, p))
            .collect::<Result<Vec<_>>>()?;
        let image = aggregate_cv(&evals.iter().map(|e| e.image).collect::<Vec<_>>())?;
        let patient = aggregate_cv(&evals.iter().map(|e| e.patient).collect::<Vec<_>>())?;
        let recognition_rate = mean_sd(&evals.iter().map(|e| e.recognition_rate).collect::<Vec<_>>())?;
        out.push(CellReport {
            key,
            folds: evals,
            image,
            patient,
            recognition_rate,
        });
    }
    out.sort_by_key(|c| c.key.sort_key());
    let pvalues = pvalue_grid(&out);
    let audit = audit(&out, info);
    Ok(CVReport {
        meta: ReportMeta::default(),
        cells: out,
        pvalues,
        audit,
    })
}

fn ppv_values(fold: &FoldEval) -> Vec<f64> {
    fold.ppv.iter().map(|s| s.ppv).collect()
}

fn compare(kind: &str, a: &CellReport, b: &CellReport, out: &mut Vec<PValueEntry>) {
    let mut push = |scope: String, x: Vec<f64>, y: Vec<f64>| {
        let test = welch_ttest(&x, &y).ok();
        out.push(PValueEntry {
            comparison: kind.into(),
            a: a.key.clone(),
            b: b.key.clone(),
            scope,
            significant: test.map(|t| t.significant()),
            test,
        });
    };
    let pooled = |c: &CellReport| c.folds.iter().flat_map(ppv_values).collect::<Vec<_>>();
    push("pooled".into(), pooled(a), pooled(b));
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        push(format!("fold_{}", fa.fold), ppv_values(fa), ppv_values(fb));
    }
}

fn pvalue_grid(cells: &[CellReport]) -> Vec<PValueEntry> {
    let mut out = Vec::new();
    for (i, a) in cells.iter().enumerate() {
        for b in &cells[i + 1..] {
            let same_setting = a.key.crop == b.key.crop;
            if same_setting && a.key.modality == b.key.modality {
                compare("model", a, b, &mut out);
            } else if same_setting && a.key.model == b.key.model {
                compare("modality", a, b, &mut out);
            }
        }
    }
    out
}

fn audit(cells: &[CellReport], info: &PatientInfo) -> Vec<AuditEntry> {
    let mut out = Vec::new();
    for c in cells {
        let mut per: BTreeMap<&str, Vec<&PatientVerdict>> = BTreeMap::new();
        for f in &c.folds {
            for v in &f.votes {
                per.entry(&v.patient_id).or_default().push(v);
            }
        }
        for (pid, vs) in per {
            let n = vs.len() as f64;
            let (hist, strain) = info.get(pid).cloned().unwrap_or((None, None));
            out.push(AuditEntry {
                key: c.key.clone(),
                patient_id: pid.to_string(),
                truth: vs[0].truth,
                misdiagnosed_folds: vs.iter().filter(|v| v.predicted != v.truth).count(),
                n_folds: vs.len(),
                mean_ppv: vs.iter().map(|v| v.mean_ppv).sum::<f64>() / n,
                mean_vote_margin: vs.iter().map(|v| v.vote_margin).sum::<f64>() / n,
                histological_type: hist,
                strain_ratio: strain,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// `90.00 ± 2.15` in percent.
pub fn format_pct(m: Option<MeanSd>) -> String {
    match m {
        Some(m) => format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.sd),
        None => "n/a".into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the requested formats into `dir`, returning the written paths.
pub fn render_report(report: &CVReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if report.cells.is_empty() {
        return Err(Error::EmptyInput("report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Csv) {
        let key_cols = |k: &CellKey| {
            vec![
                model_display(&k.model),
                k.modality.display_name().to_string(),
                if k.crop { "cropped" } else { "full" }.to_string(),
            ]
        };

        let mut rows = Vec::new();
        for c in &report.cells {
            for (granularity, agg) in [("image", &c.image), ("patient", &c.patient)] {
                let mut row = key_cols(&c.key);
                row.push(granularity.into());
                row.extend(agg.values().into_iter().map(format_pct));
                rows.push(row);
            }
        }
        let path = dir.join("table1.csv");
        write_csv(
            &path,
            &["model", "modality", "images", "granularity", "accuracy", "precision", "specificity", "sensitivity", "f1"],
            rows,
        )?;
        written.push(path);

        let rows = report
            .cells
            .iter()
            .map(|c| {
                let mut row = key_cols(&c.key);
                row.push(format!("{:.2}", 100.0 * c.recognition_rate.mean));
                row.push(format_pct(Some(c.recognition_rate)));
                row
            })
            .collect();
        let path = dir.join("table3.csv");
        write_csv(&path, &["model", "modality", "images", "recognition_rate", "mean_sd"], rows)?;
        written.push(path);

        let rows = report
            .pvalues
            .iter()
            .map(|e| {
                vec![
                    e.comparison.clone(),
                    e.a.label(),
                    e.b.label(),
                    e.scope.clone(),
                    fmt_opt(e.test.map(|t| t.t)),
                    fmt_opt(e.test.map(|t| t.df)),
                    fmt_opt(e.test.map(|t| t.p)),
                    e.significant.map(|s| s.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        let path = dir.join("pvalues.csv");
        write_csv(&path, &["comparison", "a", "b", "scope", "t", "df", "p", "significant"], rows)?;
        written.push(path);

        let rows = report
            .audit
            .iter()
            .map(|a| {
                let mut row = key_cols(&a.key);
                row.extend([
                    a.patient_id.clone(),
                    a.truth.code().to_string(),
                    a.misdiagnosed_folds.to_string(),
                    a.n_folds.to_string(),
                    format!("{:.4}", a.mean_ppv),
                    format!("{:.4}", a.mean_vote_margin),
                    a.histological_type.clone().unwrap_or_default(),
                    a.strain_ratio.map(|s| format!("{s}")).unwrap_or_default(),
                ]);
                row
            })
            .collect();
        let path = dir.join("audit.csv");
        write_csv(
            &path,
            &[
                "model", "modality", "images", "patient_id", "truth", "misdiagnosed_folds", "n_folds",
                "mean_ppv", "mean_vote_margin", "histological_type", "strain_ratio",
            ],
            rows,
        )?;
        written.push(path);
    }
    Ok(written)
}
