//! How accuracy responds to the number of encoder training classes and to
//! the bin size.

use crossvid::encoder::EncoderConfig;
use crossvid::evaluation::{
    make_folds, sweep, AugmentConfig, ClassifierConfig, SweepAxis, SweepContext,
};
use crossvid::preprocess::PreprocessConfig;
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let seed = 2;
    let ds = gen_synthetic_dataset(&SyntheticSpec::easy_pair(30, 5, seed))?;
    let fold = make_folds(ds.classes(), 10, seed, false)?.folds.remove(0);
    let ctx = SweepContext {
        dataset: &ds,
        preprocess: PreprocessConfig::default(),
        train_platform: "P-easy-1".into(),
        test_platform: "P-easy-2".into(),
        fold,
        encoder: EncoderConfig {
            seed,
            ..EncoderConfig::default()
        },
        classifier: ClassifierConfig::default(),
        augment: AugmentConfig::default(),
    };
    for axis in [
        SweepAxis::TrainingClasses(vec![5, 10, 20]),
        SweepAxis::BinS(vec![5.0, 10.0, 20.0]),
    ] {
        print!("{}", sweep(&ctx, &axis)?.to_csv());
    }
    Ok(())
}
