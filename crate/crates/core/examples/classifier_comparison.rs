//! The same embeddings under 1-NN, 10-NN, nearest mean and a softmax CNN.

use crossvid::encoder::EncoderConfig;
use crossvid::evaluation::{
    classify_split, make_folds, metrics, train_fold_encoder, ClassifierConfig, ClassifierKind,
    Split,
};
use crossvid::preprocess::{preprocess_dataset, PreprocessConfig};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let seed = 6;
    let ds = gen_synthetic_dataset(&SyntheticSpec::easy_pair(30, 5, seed))?;
    let features = preprocess_dataset(&ds, &PreprocessConfig::default())?;
    let fold = &make_folds(ds.classes(), 10, seed, false)?.folds[0];
    let encoder = EncoderConfig {
        seed,
        ..EncoderConfig::default()
    };
    let (a, b) = ("P-easy-1", "P-easy-2");
    let model = train_fold_encoder(&features, &fold.encoder_classes, a, b, &encoder)?;
    let raw = Split::new(&features, a, b, &fold.classify_classes)?;
    let embedded = raw.embed(&model)?;

    for kind in [
        ClassifierKind::Knn1,
        ClassifierKind::Knn10,
        ClassifierKind::Nmev,
        ClassifierKind::Cnn,
    ] {
        let config = ClassifierConfig {
            kind,
            ..ClassifierConfig::default()
        };
        let raw_acc = metrics(&classify_split(&raw, &config, seed)?).accuracy;
        let emb_acc = metrics(&classify_split(&embedded, &config, seed)?).accuracy;
        println!(
            "{:>6}: raw {raw_acc:.3}, embedding {emb_acc:.3}",
            kind.to_string()
        );
    }
    Ok(())
}
