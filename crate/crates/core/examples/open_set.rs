//! Open-set identification: reject videos the classifier never saw by
//! thresholding the softmax output.

use crossvid::classifiers::SoftmaxConfig;
use crossvid::encoder::EncoderConfig;
use crossvid::evaluation::{
    make_folds, prepare_open_set, threshold_grid, threshold_sweep, Representation,
};
use crossvid::preprocess::{preprocess_dataset, PreprocessConfig};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let seed = 1;
    let ds = gen_synthetic_dataset(&SyntheticSpec::easy_pair(40, 5, seed))?;
    let features = preprocess_dataset(&ds, &PreprocessConfig::default())?;
    let plan = make_folds(ds.classes(), 20, seed, true)?;
    let fold = &plan.folds[0];
    let encoder = EncoderConfig {
        seed,
        ..EncoderConfig::default()
    };
    let run = prepare_open_set(
        &features,
        "P-easy-1",
        "P-easy-2",
        fold,
        &encoder,
        &SoftmaxConfig::default(),
        Representation::Embedding,
    )?;
    let curve = threshold_sweep(&run, &threshold_grid())?;
    print!("{}", curve.to_csv());
    println!(
        "best precision at threshold {}",
        curve.best_precision_threshold
    );
    Ok(())
}
