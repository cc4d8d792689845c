//! Decide whether two traces from different platforms show the same video.

use crossvid::classifiers::SoftmaxConfig;
use crossvid::encoder::EncoderConfig;
use crossvid::evaluation::{make_folds, run_binary, Representation};
use crossvid::preprocess::{preprocess_dataset, PreprocessConfig};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let seed = 4;
    let ds = gen_synthetic_dataset(&SyntheticSpec::easy_pair(30, 5, seed))?;
    let features = preprocess_dataset(&ds, &PreprocessConfig::default())?;
    let fold = &make_folds(ds.classes(), 10, seed, false)?.folds[0];
    let encoder = EncoderConfig {
        seed,
        ..EncoderConfig::default()
    };
    for rep in [Representation::Raw, Representation::Embedding] {
        let r = run_binary(
            &features,
            "P-easy-1",
            "P-easy-2",
            fold,
            &encoder,
            &SoftmaxConfig::default(),
            rep,
        )?;
        println!(
            "{rep:?}: {} train pairs, {} test pairs, accuracy {:.3}, SAME precision {:.3}, SAME recall {:.3}",
            r.train_pairs, r.test_pairs, r.accuracy, r.same_precision, r.same_recall
        );
    }
    Ok(())
}
