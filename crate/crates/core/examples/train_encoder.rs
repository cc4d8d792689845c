//! Train a triplet encoder on two platforms and watch the loss fall.

use crossvid::encoder::{train_encoder, EncoderConfig};
use crossvid::numeric::euclidean_distance;
use crossvid::preprocess::{preprocess_dataset, PreprocessConfig};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let ds = gen_synthetic_dataset(&SyntheticSpec::easy_pair(20, 5, 7))?;
    let features = preprocess_dataset(&ds, &PreprocessConfig::default())?;
    let config = EncoderConfig {
        seed: 7,
        ..EncoderConfig::default()
    };
    let trained = train_encoder(&features, ds.classes(), ("P-easy-1", "P-easy-2"), &config)?;
    for (epoch, loss) in trained.loss_history.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.4}");
    }

    let a = &features.of("P-easy-1", "v000")[0].values;
    let same = &features.of("P-easy-2", "v000")[0].values;
    let other = &features.of("P-easy-2", "v001")[0].values;
    let m = &trained.model;
    let d = |x: &[f64], y: &[f64]| -> crossvid::Result<f64> {
        euclidean_distance(&m.embed(x)?.0, &m.embed(y)?.0)
    };
    println!(
        "raw: same video {:.3}, other video {:.3}",
        euclidean_distance(a, same)?,
        euclidean_distance(a, other)?
    );
    println!(
        "embedded: same video {:.3}, other video {:.3}",
        d(a, same)?,
        d(a, other)?
    );
    Ok(())
}
