use std::collections::BTreeMap;
use std::path::PathBuf;

use bsefuse::dataio::{split_patients, DatasetManifest, ImageRecord, PatientRecord};
use bsefuse::ensemble::soft_vote;
use bsefuse::metrics::{
    compute_metrics, group_by_patient, patient_recognition_rate, patient_vote, ppv_extract, welch_ttest,
    ConfusionMatrix, Prediction,
};
use bsefuse::{Error, Label, ProbRow};
use proptest::prelude::*;

fn manifest(n_benign: usize, n_malignant: usize) -> DatasetManifest {
    let mut patients = BTreeMap::new();
    let mut images = Vec::new();
    for i in 0..n_benign + n_malignant {
        let pid = format!("P{i:03}");
        let label = if i < n_benign { Label::Benign } else { Label::Malignant };
        patients.insert(
            pid.clone(),
            PatientRecord {
                patient_id: pid.clone(),
                label,
                histological_type: None,
                strain_ratio: None,
            },
        );
        images.push(ImageRecord {
            image_id: format!("{pid}_0"),
            patient_id: pid,
            bmode_path: PathBuf::new(),
            elasto_path: PathBuf::new(),
            roi: None,
        });
    }
    DatasetManifest {
        root: PathBuf::new(),
        patients,
        images,
    }
}

fn label(malignant: bool) -> Label {
    if malignant {
        Label::Malignant
    } else {
        Label::Benign
    }
}

fn row() -> impl Strategy<Value = ProbRow> {
    (0.0f64..=1.0).prop_map(|p| [1.0 - p, p])
}

#[test]
fn vote_matches_brute_force_for_small_patients() {
    for n in 1..=7usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<Label> = (0..n).map(|i| label(mask >> i & 1 == 1)).collect();
            let malignant = mask.count_ones() as usize;
            let benign = n - malignant;
            let want = if benign > malignant { Label::Benign } else { Label::Malignant };
            assert_eq!(patient_vote(&labels).unwrap(), want, "n={n} mask={mask:b}");
        }
    }
    assert!(patient_vote(&[]).is_err());
}

#[test]
fn vote_ties_go_to_malignant() {
    for half in 1..=4 {
        let mut labels = vec![Label::Benign; half];
        labels.extend(vec![Label::Malignant; half]);
        assert_eq!(patient_vote(&labels).unwrap(), Label::Malignant);
        labels.reverse();
        assert_eq!(patient_vote(&labels).unwrap(), Label::Malignant);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn recognition_rate_is_mean_of_patient_fractions(
        table in prop::collection::vec(
            (any::<bool>(), prop::collection::vec(any::<bool>(), 1..8)),
            1..20,
        )
    ) {
        let mut preds = Vec::new();
        for (i, (malignant, correct)) in table.iter().enumerate() {
            let truth = label(*malignant);
            for (j, ok) in correct.iter().enumerate() {
                let predicted = if *ok { truth } else { truth.other() };
                let p_m = if predicted == Label::Malignant { 0.9 } else { 0.1 };
                preds.push(Prediction {
                    image_id: format!("{i}_{j}"),
                    patient_id: format!("P{i:02}"),
                    true_label: truth,
                    p_benign: 1.0 - p_m,
                    p_malignant: p_m,
                });
            }
        }
        let groups = group_by_patient(&preds).unwrap();
        prop_assert_eq!(groups.len(), table.len());
        let counts: Vec<(usize, usize)> = groups.iter().map(|g| (g.n_correct(), g.predicted.len())).collect();
        let rr = patient_recognition_rate(&counts).unwrap();

        // Common denominator of all image counts (1..8 divides 840).
        let num: usize = table.iter().map(|(_, c)| c.iter().filter(|x| **x).count() * 840 / c.len()).sum();
        let want = num as f64 / (840 * table.len()) as f64;
        prop_assert!((rr - want).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&rr));
        prop_assert_eq!(rr == 1.0, table.iter().all(|(_, c)| c.iter().all(|x| *x)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn metrics_satisfy_identities(tp in 0usize..60, fp in 0usize..60, tn in 0usize..60, fn_ in 0usize..60) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let cm = ConfusionMatrix { tp, fp, tn, fn_ };
        let m = compute_metrics(&cm).unwrap();
        let total = (tp + fp + tn + fn_) as f64;
        prop_assert!((m.accuracy * total - (tp + tn) as f64).abs() < 1e-9);
        if let (Some(sens), Some(spec)) = (m.sensitivity, m.specificity) {
            let acc = (sens * (tp + fn_) as f64 + spec * (tn + fp) as f64) / total;
            prop_assert!((acc - m.accuracy).abs() < 1e-12);
        }
        match m.f1 {
            Some(f1) => prop_assert!((f1 - 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64).abs() < 1e-12),
            None => prop_assert_eq!(tp, 0),
        }
        prop_assert_eq!(m.precision.is_none(), tp + fp == 0);
        prop_assert_eq!(m.sensitivity.is_none(), tp + fn_ == 0);
        prop_assert_eq!(m.specificity.is_none(), tn + fp == 0);
        for v in m.values().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_never_leaks(seed in any::<u64>(), nb in 8usize..40, nm in 8usize..40, k in 2usize..6) {
        let m = manifest(nb, nm);
        let plan = split_patients(&m, 0.2, k, seed).unwrap();
        plan.validate(&m).unwrap();
        prop_assert_eq!(plan.n_folds(), k);
        for l in Label::ALL {
            prop_assert!(plan.test_patients.iter().any(|p| m.label_of(p) == Some(l)));
        }
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            let (train, val) = plan.fold_partition(f);
            prop_assert!(train.is_disjoint(&val));
            prop_assert!(train.is_disjoint(&plan.test_patients));
            prop_assert!(val.is_disjoint(&plan.test_patients));
            prop_assert_eq!(train.len() + val.len() + plan.test_patients.len(), nb + nm);
        }
        prop_assert_eq!(&plan, &split_patients(&m, 0.2, k, seed).unwrap());
    }

    #[test]
    fn corrupted_plans_are_rejected(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let m = manifest(15, 15);
        let plan = split_patients(&m, 0.2, 5, seed).unwrap();
        let test: Vec<String> = plan.test_patients.iter().cloned().collect();
        let victim = pick.get(&test).clone();

        let mut dup = plan.clone();
        dup.folds[0].insert(victim.clone());
        prop_assert!(matches!(dup.validate(&m), Err(Error::Leakage(_))));

        let mut missing = plan.clone();
        missing.test_patients.remove(&victim);
        prop_assert!(matches!(missing.validate(&m), Err(Error::Leakage(_))));

        let mut unknown = plan;
        unknown.folds[1].insert("ZZZ".into());
        prop_assert!(matches!(unknown.validate(&m), Err(Error::Leakage(_))));
    }

    #[test]
    fn welch_is_antisymmetric_and_shift_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 2..30),
        b in prop::collection::vec(-5.0f64..5.0, 2..30),
        shift in -3.0f64..3.0,
    ) {
        let (Ok(ab), Ok(ba)) = (welch_ttest(&a, &b), welch_ttest(&b, &a)) else {
            return Ok(());
        };
        prop_assert!((ab.t + ba.t).abs() < 1e-9 * ab.t.abs().max(1.0));
        prop_assert!((ab.df - ba.df).abs() < 1e-9 * ab.df);
        prop_assert!((ab.p - ba.p).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab.p));
        let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let s = welch_ttest(&a2, &b2).unwrap();
        prop_assert!((s.t - ab.t).abs() < 1e-6 * ab.t.abs().max(1.0));
    }

    #[test]
    fn ppv_of_both_classes_sums_to_one(rows in prop::collection::vec(row(), 1..50)) {
        let n = rows.len();
        let benign = ppv_extract(&rows, &vec![Label::Benign; n]).unwrap();
        let malignant = ppv_extract(&rows, &vec![Label::Malignant; n]).unwrap();
        for (b, m) in benign.iter().zip(&malignant) {
            prop_assert!((b + m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_vote_is_symmetric(pairs in prop::collection::vec((row(), row()), 1..50)) {
        let (a, b): (Vec<ProbRow>, Vec<ProbRow>) = pairs.into_iter().unzip();
        let (pab, cab) = soft_vote(&a, &b).unwrap();
        let (pba, cba) = soft_vote(&b, &a).unwrap();
        prop_assert_eq!(&cab, &cba);
        for ((x, y), (ra, rb)) in pab.iter().zip(&pba).zip(a.iter().zip(&b)) {
            prop_assert!((x[0] - y[0]).abs() < 1e-15 && (x[1] - y[1]).abs() < 1e-15);
            prop_assert!((x[0] + x[1] - 1.0).abs() < 1e-12);
            prop_assert!(x[1] >= ra[1].min(rb[1]) - 1e-15 && x[1] <= ra[1].max(rb[1]) + 1e-15);
        }
        prop_assert!(soft_vote(&a, &b[..b.len() - 1]).is_err());
    }
}
