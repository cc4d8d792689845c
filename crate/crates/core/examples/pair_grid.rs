//! Accuracy for every (training input, testing platform) pair, including
//! the VBR profile as a training input.

use crossvid::encoder::EncoderConfig;
use crossvid::evaluation::{make_folds, run_pair_grid, ClassifierConfig, FoldPlan};
use crossvid::preprocess::{preprocess_dataset, PreprocessConfig};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let seed = 5;
    let ds = gen_synthetic_dataset(&SyntheticSpec {
        seed,
        n_classes: 30,
        ..SyntheticSpec::default()
    })?;
    let features = preprocess_dataset(&ds, &PreprocessConfig::default())?;
    let plan = make_folds(ds.classes(), 10, seed, false)?;
    let plan = FoldPlan {
        folds: plan.folds.into_iter().take(1).collect(),
        ..plan
    };
    let encoder = EncoderConfig {
        seed,
        ..EncoderConfig::default()
    };
    let grid = run_pair_grid(
        &features,
        &plan,
        &encoder,
        &ClassifierConfig::default(),
        false,
    )?;
    println!("raw");
    print!("{}", grid.raw.to_csv());
    println!("embedding");
    print!("{}", grid.embedding.to_csv());
    Ok(())
}
