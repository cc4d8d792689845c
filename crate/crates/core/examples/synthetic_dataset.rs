//! Generate a small synthetic dataset and compare traces of one video
//! across platforms.

use crossvid::preprocess::{preprocess_dataset, PreprocessConfig};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

fn main() -> crossvid::Result<()> {
    let spec = SyntheticSpec::default();
    let ds = gen_synthetic_dataset(&spec)?;
    println!(
        "{} traces, {} classes, platforms {:?}",
        ds.len(),
        ds.classes().len(),
        ds.platforms()
    );

    let features = preprocess_dataset(&ds, &PreprocessConfig::default())?;
    for platform in ds.platforms() {
        if let Some(f) = features.of(platform, "v000").first() {
            let head: Vec<String> = f
                .values
                .iter()
                .take(12)
                .map(|v| format!("{v:.2}"))
                .collect();
            println!("{platform:>9} v000: {}", head.join(" "));
        }
    }
    Ok(())
}
