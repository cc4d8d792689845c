//! Closed-set identification across platforms, raw features against
//! learned embeddings, averaged over folds.

use crossvid::encoder::EncoderConfig;
use crossvid::evaluation::{make_folds, run_closed_set, ClassifierConfig, Representation};
use crossvid::preprocess::{preprocess_dataset, PreprocessConfig};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let seed = 3;
    let ds = gen_synthetic_dataset(&SyntheticSpec::easy_pair(30, 5, seed))?;
    let features = preprocess_dataset(&ds, &PreprocessConfig::default())?;
    let plan = make_folds(ds.classes(), 10, seed, false)?;
    let encoder = EncoderConfig {
        seed,
        ..EncoderConfig::default()
    };
    let classifier = ClassifierConfig::default();

    for rep in [Representation::Raw, Representation::Embedding] {
        let mut accs = Vec::new();
        for fold in &plan.folds {
            let r = run_closed_set(
                &features,
                "P-easy-1",
                "P-easy-2",
                fold,
                &encoder,
                &classifier,
                rep,
            )?;
            accs.push(r.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{rep:?}: per fold {accs:.2?}, mean {mean:.3}");
    }
    Ok(())
}
