//! Five-fold cross-validation with a fixed test set, running the two-stage
//! ensemble recipe: fine-tune each backbone, strip, fuse, fine-tune the head.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{predict_cached, train_loop_with, Partition, PrefixCache, TrainConfig, TrainHistory, TrainOptions};
use crate::checkpoint::{save_backbone, save_ensemble};
use crate::dataio::{prepare_sample, DatasetManifest, SplitPlan, StackedSample};
use crate::ensemble::{build_ensemble, soft_vote};
use crate::error::{Error, Result};
use crate::metrics::{write_predictions, Prediction};
use crate::model::ModelKind;
use crate::nn::{load_backbone, Backbone, FreezePolicy, InflationPolicy, WeightSource};
use crate::types::{rng_stream, Label, ProbRow};

/// How models are built for each fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub model: ModelKind,
    pub weights: WeightSource,
    pub inflation: InflationPolicy,
    pub alexnet_freeze: FreezePolicy,
    pub resnet_freeze: FreezePolicy,
}

impl RecipeConfig {
    pub fn new(model: ModelKind, weights: WeightSource) -> Self {
        Self {
            model,
            weights,
            inflation: InflationPolicy::MeanInit,
            alexnet_freeze: FreezePolicy::AlexNetLast3,
            resnet_freeze: FreezePolicy::ResNetFreezeFirst4,
        }
    }

    /// Backbones trained in stage one.
    pub fn stage_one(&self) -> Vec<&'static str> {
        match self.model {
            ModelKind::AlexNet => vec!["alexnet"],
            ModelKind::ResNet18 => vec!["resnet18"],
            ModelKind::Ensemble => vec!["alexnet", "resnet18"],
        }
    }

    /// Prediction sets produced per fold.
    pub fn outputs(&self) -> Vec<&'static str> {
        match self.model {
            ModelKind::Ensemble => vec!["alexnet", "resnet18", "ensemble", "voting"],
            _ => self.stage_one(),
        }
    }

    pub fn prepare_backbone(&self, arch: &str, channels: usize) -> Result<Backbone> {
        let mut b = load_backbone(arch, &self.weights)?;
        b.inflate_input_channels(channels, self.inflation)?;
        let policy = match b.arch() {
            "alexnet" => &self.alexnet_freeze,
            _ => &self.resnet_freeze,
        };
        b.apply_freeze_policy(policy)?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub histories: BTreeMap<String, TrainHistory>,
    /// Test-set predictions per output (`alexnet`, `resnet18`, `ensemble`, `voting`).
    pub predictions: BTreeMap<String, Vec<Prediction>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRun {
    pub plan: SplitPlan,
    pub folds: Vec<FoldResult>,
}

impl CvRun {
    /// Per-fold predictions of one output.
    pub fn fold_predictions(&self, output: &str) -> Vec<Vec<Prediction>> {
        self.folds
            .iter()
            .map(|f| f.predictions.get(output).cloned().unwrap_or_default())
            .collect()
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn run_json(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn fold_dir(&self, k: usize) -> PathBuf {
        self.root.join(format!("fold_{k}"))
    }

    pub fn checkpoint(&self, k: usize, model: &str) -> PathBuf {
        self.fold_dir(k).join(format!("{model}.ckpt"))
    }

    pub fn predictions(&self, k: usize, model: &str) -> PathBuf {
        self.fold_dir(k).join(format!("predictions_{model}.csv"))
    }

    pub fn history(&self, k: usize, model: &str) -> PathBuf {
        self.fold_dir(k).join(format!("history_{model}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Number of `fold_<k>` directories, counted from 0 without gaps.
    pub fn n_folds(&self) -> usize {
        (0..).take_while(|k| self.fold_dir(*k).is_dir()).count()
    }
}

fn predictions_for(samples: &[&StackedSample], rows: &[ProbRow]) -> Vec<Prediction> {
    samples
        .iter()
        .zip(rows)
        .map(|(s, r)| Prediction {
            image_id: s.image_id.clone(),
            patient_id: s.patient_id.clone(),
            true_label: s.label,
            p_benign: r[0],
            p_malignant: r[1],
        })
        .collect()
}

fn both_classes(samples: &[&StackedSample]) -> bool {
    let labels: BTreeSet<Label> = samples.iter().map(|s| s.label).collect();
    labels.len() == 2
}

/// Load every manifest image once with the run's modality, crop and size.
pub fn load_samples(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Vec<StackedSample>> {
    manifest
        .images
        .iter()
        .map(|rec| prepare_sample(manifest, rec, cfg.modality, cfg.crop, cfg.image_side))
        .collect()
}

fn seed_from(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    rng_stream(seed, name).next_u64()
}

pub fn cross_validate(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    recipe: &RecipeConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<CvRun> {
    cfg.validate()?;
    plan.validate(manifest)?;
    let samples = load_samples(manifest, cfg)?;
    cross_validate_samples(&samples, plan, recipe, cfg, run_dir)
}

/// [`cross_validate`] on preloaded samples.
pub fn cross_validate_samples(
    samples: &[StackedSample],
    plan: &SplitPlan,
    recipe: &RecipeConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<CvRun> {
    cfg.validate()?;
    let layout = run_dir.map(RunLayout::new);
    let channels = cfg.modality.channels();
    let test: Vec<&StackedSample> = samples
        .iter()
        .filter(|s| plan.test_patients.contains(&s.patient_id))
        .collect();
    if test.is_empty() {
        return Err(Error::EmptySet("test"));
    }
    // Frozen prefixes depend only on the initial weights, which every fold
    // shares, so one cache per backbone serves all folds.
    let mut caches: HashMap<&str, PrefixCache> = HashMap::new();
    let mut folds = Vec::with_capacity(plan.n_folds());

    for k in 0..plan.n_folds() {
        let (train_p, val_p) = plan.fold_partition(k);
        let train: Vec<&StackedSample> = samples.iter().filter(|s| train_p.contains(&s.patient_id)).collect();
        let val: Vec<&StackedSample> = samples.iter().filter(|s| val_p.contains(&s.patient_id)).collect();
        if train.is_empty() {
            return Err(Error::EmptySet("train"));
        }
        if val.is_empty() {
            return Err(Error::EmptySet("val"));
        }
        if !both_classes(&train) || !both_classes(&val) {
            return Err(Error::SingleClassFold { fold: k });
        }
        let partition = Partition {
            train: train_p,
            val: val_p,
        };
        if let Some(l) = &layout {
            let d = l.fold_dir(k);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        log::info!("fold {k}: {} train / {} val / {} test images", train.len(), val.len(), test.len());

        let mut histories = BTreeMap::new();
        let mut predictions = BTreeMap::new();
        let mut trained = BTreeMap::new();
        for arch in recipe.stage_one() {
            let model = recipe.prepare_backbone(arch, channels)?;
            let cache = caches.entry(arch).or_default();
            let history = train_loop_with(
                &model,
                &train,
                &val,
                cfg,
                TrainOptions {
                    stream: format!("fold{k}/{arch}"),
                    partition: Some(partition.clone()),
                    cache: Some(cache),
                },
            )?;
            let rows = predict_cached(&model, cache, &test, cfg.batch_size)?;
            predictions.insert(arch.to_string(), predictions_for(&test, &rows));
            histories.insert(arch.to_string(), history);
            trained.insert(arch, model);
        }

        if recipe.model == ModelKind::Ensemble {
            let pa: Vec<ProbRow> = predictions["alexnet"].iter().map(Prediction::probs).collect();
            let pb: Vec<ProbRow> = predictions["resnet18"].iter().map(Prediction::probs).collect();
            let (voted, _) = soft_vote(&pa, &pb)?;
            predictions.insert("voting".into(), predictions_for(&test, &voted));

            if let Some(l) = &layout {
                for (arch, model) in &trained {
                    save_backbone(model, &l.checkpoint(k, arch), fold_meta(k))?;
                }
            }
            let a = trained.remove("alexnet").expect("stage one trains alexnet");
            let b = trained.remove("resnet18").expect("stage one trains resnet18");
            let ensemble = build_ensemble(a, b, seed_from(cfg.seed, &format!("fold{k}/ensemble-head")))?;
            let mut cache = PrefixCache::new();
            let history = train_loop_with(
                &ensemble,
                &train,
                &val,
                cfg,
                TrainOptions {
                    stream: format!("fold{k}/ensemble"),
                    partition: Some(partition.clone()),
                    cache: Some(&mut cache),
                },
            )?;
            let rows = predict_cached(&ensemble, &mut cache, &test, cfg.batch_size)?;
            predictions.insert("ensemble".into(), predictions_for(&test, &rows));
            histories.insert("ensemble".into(), history);
            if let Some(l) = &layout {
                save_ensemble(&ensemble, &l.checkpoint(k, "ensemble"), fold_meta(k))?;
            }
        } else if let Some(l) = &layout {
            for (arch, model) in &trained {
                save_backbone(model, &l.checkpoint(k, arch), fold_meta(k))?;
            }
        }

        if let Some(l) = &layout {
            for (name, preds) in &predictions {
                write_predictions(&l.predictions(k, name), preds)?;
            }
            for (name, h) in &histories {
                h.write_csv(&l.history(k, name))?;
            }
        }
        folds.push(FoldResult {
            fold: k,
            histories,
            predictions,
        });
    }
    Ok(CvRun {
        plan: plan.clone(),
        folds,
    })
}

fn fold_meta(fold: usize) -> BTreeMap<String, String> {
    BTreeMap::from([("fold".to_string(), fold.to_string())])
}
