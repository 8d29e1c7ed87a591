//! Cross-validate the ensemble recipe on a synthetic phantom set and print
//! patient-wise test accuracy per model.
//!
//! `cargo run --example synthetic_cv -- [signal] [model] [modality] [epochs] [lr] [test_fraction]`

use std::time::Instant;

use bsefuse::dataio::{generate_synthetic, split_patients, SignalChannels, SynthConfig};
use bsefuse::metrics::report::evaluate_fold;
use bsefuse::model::ModelKind;
use bsefuse::nn::WeightSource;
use bsefuse::training::{cross_validate, RecipeConfig, TrainConfig};
use bsefuse::Modality;

fn main() -> bsefuse::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let signal = match args.get(1).map(String::as_str) {
        Some("gray") => SignalChannels::GrayOnly,
        Some("color") => SignalChannels::ColorOnly,
        _ => SignalChannels::Both,
    };
    let model: ModelKind = args.get(2).map_or(Ok(ModelKind::Ensemble), |s| s.parse())?;
    let modality: Modality = args.get(3).map_or(Ok(Modality::Bse), |s| s.parse())?;
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let test_fraction: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.2);

    let dir = tempfile::tempdir().expect("temp dir");
    let synth = SynthConfig {
        n_patients: 40,
        images_per_patient: (3, 5),
        class_balance: 0.5,
        signal_channels: signal,
        image_size: 128,
        seed: 1,
    };
    let (manifest, _) = generate_synthetic(&synth, dir.path())?;
    let plan = split_patients(&manifest, test_fraction, 5, 1)?;
    let cfg = TrainConfig {
        learning_rate: lr,
        augment: false,
        image_side: 112,
        crop: true,
        patience: epochs,
        modality,
        ..TrainConfig::new(epochs)
    };
    let recipe = RecipeConfig::new(model, WeightSource::Seeded(0));
    let t = Instant::now();
    let run = cross_validate(&manifest, &plan, &recipe, &cfg, None)?;
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    for model in recipe.outputs() {
        let accs: Vec<f64> = run
            .fold_predictions(model)
            .iter()
            .enumerate()
            .map(|(k, p)| evaluate_fold(k, p).map(|e| e.patient.accuracy))
            .collect::<bsefuse::Result<_>>()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{model:>9}: patient acc {mean:.3} {accs:?}");
    }
    for f in &run.folds {
        for (m, h) in &f.histories {
            println!(
                "fold {} {m}: best epoch {:?} val {:.3} (init {:.3})",
                f.fold, h.best_epoch, h.best_val_loss, h.initial_val_loss
            );
        }
    }
    Ok(())
}
