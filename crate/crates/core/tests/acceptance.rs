//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossvid::classifiers::{open_set_classify, KnnModel, OpenSetLabel, SoftmaxConfig};
use crossvid::encoder::{
    mine_offline_triplets, triplet_batch_gradients, triplet_loss, Arch, EncoderConfig,
    EncoderModel, TripletInput,
};
use crossvid::evaluation::{
    make_folds, prepare_open_set, run_closed_set, threshold_grid, threshold_sweep,
    ClassifierConfig, Representation,
};
use crossvid::ingest::{Direction, PacketRecord, TraceKey};
use crossvid::numeric::{minmax_normalize, Vec1D};
use crossvid::preprocess::{
    augment_gaussian, bin_downlink_packets, extend_initial_burst, preprocess_dataset,
    BurstExtensionRule, FeatureSet, FeatureVector, PreprocessConfig,
};
use crossvid::synthetic::{gen_synthetic_dataset, SyntheticSpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Worst elementwise relative error between backprop and central
/// differences of the mean batch triplet loss.
#[allow(clippy::needless_range_loop)]
fn worst_gradient_error(arch: Arch) -> Result<f64, String> {
    let cfg = EncoderConfig {
        arch,
        embedding_dim: 8,
        hidden_dim: 16,
        dropout_rate: 0.0,
        seed: 21,
        ..EncoderConfig::default()
    };
    let mut model = EncoderModel::new(&cfg, 12).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vecs: Vec<Vec<f64>> = (0..9)
        .map(|_| (0..12).map(|_| rng.random::<f64>()).collect())
        .collect();
    let batch: Vec<TripletInput<'_>> = vecs
        .chunks(3)
        .map(|c| TripletInput {
            anchor: &c[0],
            positive: &c[1],
            negative: &c[2],
        })
        .collect();
    let margin = 10.0;
    let loss = |m: &EncoderModel| -> f64 {
        batch
            .iter()
            .map(|t| {
                let e = |x: &[f64]| m.embed(x).unwrap().0;
                triplet_loss(&e(t.anchor), &e(t.positive), &e(t.negative), margin).unwrap()
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    let (_, grads) = triplet_batch_gradients(&model, &batch, margin, 0).map_err(err)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..model.network.params.len() {
        for i in 0..model.network.params[p].values.len() {
            let orig = model.network.params[p].values[i];
            model.network.params[p].values[i] = orig + h;
            let up = loss(&model);
            model.network.params[p].values[i] = orig - h;
            let down = loss(&model);
            model.network.params[p].values[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[p][i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mlp = worst_gradient_error(Arch::Mlp)?;
    let cnn = worst_gradient_error(Arch::Cnn1d)?;
    let elapsed = start.elapsed();
    check(mlp < 1e-4, format!("MLP relative error {mlp:e}"))?;
    check(cnn < 1e-4, format!("CNN1D relative error {cnn:e}"))?;
    check(
        elapsed < Duration::from_secs(30),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!("mlp {mlp:.1e}, cnn1d {cnn:.1e}, {elapsed:.2?}"))
}

fn c2_triplet_loss() -> Outcome {
    let cases = [
        ([0.0, 0.0], [3.0, 4.0], [6.0, 8.0], 0.0),
        ([0.0, 0.0], [0.0, 1.0], [0.0, 1.5], 0.5),
        // anchor == positive: max(margin - d(a, n), 0) = 1 - 0.25
        ([1.0, 1.0], [1.0, 1.0], [1.0, 1.25], 0.75),
    ];
    for (a, p, n, want) in cases {
        let got = triplet_loss(&a, &p, &n, 1.0).map_err(err)?;
        check(got == want, format!("{a:?} {p:?} {n:?}: {got} != {want}"))?;
    }
    Ok("3 hand-computed cases exact".into())
}

fn c3_mining() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut cases = 0;
    for _ in 0..200 {
        let c = rng.random_range(3..=6usize);
        let trials = rng.random_range(1..=4u32);
        let classes: Vec<String> = (0..c).map(|i| format!("v{i}")).collect();
        let mut vectors = Vec::new();
        for platform in ["A", "B"] {
            for class in &classes {
                for t in 0..trials {
                    vectors.push(FeatureVector {
                        key: TraceKey::new(platform, class, t),
                        values: Vec1D::new(vec![rng.random(); 4]).map_err(err)?,
                    });
                }
            }
        }
        let fs = FeatureSet::new(vectors);
        let triplets = mine_offline_triplets(&fs, "A", "B", &classes, &mut rng).map_err(err)?;
        let anchors = c * trials as usize;
        check(
            triplets.len() == anchors * (c - 1),
            format!("C={c} trials={trials}: {} triplets", triplets.len()),
        )?;
        let mut seen: BTreeMap<(TraceKey, String), usize> = BTreeMap::new();
        for t in &triplets {
            t.validate().map_err(err)?;
            check(t.anchor.platform == "A", "anchor platform")?;
            *seen
                .entry((t.anchor.clone(), t.negative.video_id.clone()))
                .or_default() += 1;
        }
        check(
            seen.len() == anchors * (c - 1) && seen.values().all(|&n| n == 1),
            "an (anchor, negative class) pair is missing or repeated",
        )?;
        cases += 1;
    }
    Ok(format!("{cases} randomized datasets"))
}

fn c4_knn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let points: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..16).map(|_| rng.random::<f64>()).collect())
        .collect();
    let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..7)).collect();
    let queries: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..16).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut disagreements = 0;
    for k in [1usize, 10] {
        let model = KnnModel::fit(points.clone(), labels.clone(), k).map_err(err)?;
        for q in &queries {
            // Brute force: full sort by (distance, label), majority vote,
            // ties to the smaller summed distance, then the smaller label.
            let mut d: Vec<(f64, usize)> = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| {
                    let s: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    (s, l)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for (s, l) in &d[..k] {
                let e = votes.entry(*l).or_default();
                e.0 += 1;
                e.1 += s.sqrt();
            }
            let oracle = votes
                .iter()
                .min_by(|a, b| {
                    b.1 .0
                        .cmp(&a.1 .0)
                        .then(a.1 .1.partial_cmp(&b.1 .1).unwrap())
                        .then(a.0.cmp(b.0))
                })
                .map(|(l, _)| *l)
                .unwrap();
            if model.predict(q).map_err(err)? != oracle {
                disagreements += 1;
            }
        }
    }
    check(disagreements == 0, format!("{disagreements} disagreements"))?;
    Ok("k=1 and k=10, 100 queries each, 0 disagreements".into())
}

fn c5_preprocess() -> Outcome {
    let packets: Vec<PacketRecord> = [1.0, 9.9, 10.0, 25.0]
        .iter()
        .map(|&time| PacketRecord {
            time,
            size: 1200,
            direction: Direction::Downlink,
        })
        .chain(std::iter::once(PacketRecord {
            time: 3.0,
            size: 80,
            direction: Direction::Uplink,
        }))
        .collect();
    let binned = bin_downlink_packets(&packets, 10.0, 30.0);
    check(
        binned == [2.0, 1.0, 1.0],
        format!("binning gave {binned:?}"),
    )?;

    let rule = BurstExtensionRule {
        src_span_s: 20.0,
        dst_span_s: 40.0,
        amplitude_factor: 0.5,
    };
    let ext = extend_initial_burst(&[4.0, 4.0, 2.0, 2.0], &rule, 10.0).map_err(err)?;
    check(
        ext == [2.0, 2.0, 2.0, 2.0],
        format!("extension gave {ext:?}"),
    )?;

    let yt = PreprocessConfig::default().platform_rules["YT"];
    check(
        yt.src_span_s == 100.0 && yt.dst_span_s == 200.0 && yt.amplitude_factor == 0.5,
        format!("YT rule {yt:?}"),
    )?;

    let norm = minmax_normalize(&[2.0, 4.0, 6.0]);
    check(norm == [0.0, 0.5, 1.0], format!("normalize gave {norm:?}"))?;

    // Composed YT example at 10 s bins over 300 s: the first 10 bins
    // (value 8) stretch to 20 bins at half amplitude, the rest shifts
    // right and is cut at 30 bins.
    let mut counts = vec![8.0; 10];
    counts.extend(vec![2.0; 20]);
    let cfg = PreprocessConfig {
        duration_s: 300.0,
        normalize: false,
        ..PreprocessConfig::default()
    };
    let yt_vec =
        extend_initial_burst(&counts, &cfg.platform_rules["YT"], cfg.bin_s).map_err(err)?;
    let mut want = vec![4.0; 20];
    want.extend(vec![2.0; 10]);
    check(yt_vec == want, format!("YT composition gave {yt_vec:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..100 {
        let bin_s = [1.0, 5.0, 10.0][rng.random_range(0..3)];
        let duration_s = bin_s * rng.random_range(1..=80) as f64;
        let packets: Vec<PacketRecord> = (0..rng.random_range(0..300))
            .map(|_| PacketRecord {
                time: rng.random_range(0.0..1000.0),
                size: 1000,
                direction: if rng.random_bool(0.8) {
                    Direction::Downlink
                } else {
                    Direction::Uplink
                },
            })
            .collect();
        let key = TraceKey::new("P", "v", 0);
        let cfg = PreprocessConfig {
            bin_s,
            duration_s,
            platform_rules: BTreeMap::new(),
            normalize: rng.random_bool(0.5),
        };
        let fv = crossvid::preprocess::preprocess_pipeline(
            &key,
            &crossvid::ingest::TraceData::Packets(packets),
            &cfg,
        )
        .map_err(err)?;
        let n = (duration_s / bin_s).round() as usize;
        check(
            fv.values.len() == n,
            format!("length {} != {n}", fv.values.len()),
        )?;
    }
    Ok("stage examples exact, 100 random pipelines have fixed length".into())
}

/// Bidirectional mean 1-NN accuracy for raw and embedding inputs.
fn cross_platform(spec: &SyntheticSpec) -> Result<(f64, f64), String> {
    let ds = gen_synthetic_dataset(spec).map_err(err)?;
    let fs = preprocess_dataset(&ds, &PreprocessConfig::default()).map_err(err)?;
    let plan = make_folds(ds.classes(), 10, spec.seed, false).map_err(err)?;
    let fold = &plan.folds[0];
    let p = ds.platforms();
    let encoder = EncoderConfig {
        arch: Arch::Mlp,
        epochs: Some(5),
        batch_size: 128,
        seed: spec.seed,
        ..EncoderConfig::default()
    };
    let cls = ClassifierConfig::default();
    let acc = |a: &str, b: &str, rep| {
        run_closed_set(&fs, a, b, fold, &encoder, &cls, rep).map(|r| r.accuracy)
    };
    let mut out = [0.0; 2];
    for (i, rep) in [Representation::Raw, Representation::Embedding]
        .into_iter()
        .enumerate()
    {
        out[i] =
            (acc(&p[0], &p[1], rep).map_err(err)? + acc(&p[1], &p[0], rep).map_err(err)?) / 2.0;
    }
    Ok((out[0], out[1]))
}

const SEED: u64 = 1;

fn c6_lift() -> Outcome {
    let start = Instant::now();
    let (raw, emb) = cross_platform(&SyntheticSpec::easy_pair(30, 5, SEED))?;
    let elapsed = start.elapsed();
    let detail = format!("raw {raw:.3}, embedding {emb:.3}, {elapsed:.2?}");
    check(emb >= 2.0 * raw, format!("no 2x lift: {detail}"))?;
    check(emb >= 0.6, format!("below 60%: {detail}"))?;
    check(
        elapsed < Duration::from_secs(300),
        format!("too slow: {detail}"),
    )?;
    Ok(detail)
}

fn c7_hard_platform() -> Outcome {
    let (_, easy) = cross_platform(&SyntheticSpec::easy_pair(30, 5, SEED))?;
    let (raw, hard) = cross_platform(&SyntheticSpec::easy_hard_pair(30, 5, SEED))?;
    let detail = format!("easy pair {easy:.3}, easy+hard {hard:.3} (raw {raw:.3})");
    check(hard < easy, detail.clone())?;
    Ok(detail)
}

fn c8_open_set() -> Outcome {
    let spec = SyntheticSpec::easy_pair(40, 5, SEED);
    let ds = gen_synthetic_dataset(&spec).map_err(err)?;
    let fs = preprocess_dataset(&ds, &PreprocessConfig::default()).map_err(err)?;
    let plan = make_folds(ds.classes(), 20, SEED, true).map_err(err)?;
    let fold = &plan.folds[0];
    let split = fold.open_set.as_ref().ok_or("fold has no open-set split")?;
    check(
        split.known.len() == 10 && split.unknown.len() == 10 && fold.encoder_classes.len() == 20,
        "expected 20 encoder / 10 known / 10 unknown classes",
    )?;
    let encoder = EncoderConfig {
        seed: SEED,
        ..EncoderConfig::default()
    };
    let p = ds.platforms();
    let run = prepare_open_set(
        &fs,
        &p[0],
        &p[1],
        fold,
        &encoder,
        &SoftmaxConfig::default(),
        Representation::Embedding,
    )
    .map_err(err)?;
    let grid = threshold_grid();

    // Accepted (sample, label) pairs at a higher threshold are a subset of
    // those at any lower threshold.
    let accepted = |t: f64| -> Vec<Option<usize>> {
        run.probs
            .iter()
            .map(|pr| match open_set_classify(pr, t) {
                OpenSetLabel::Known(c) if c < run.known.len() => Some(c),
                _ => None,
            })
            .collect()
    };
    for w in grid.windows(2) {
        let (lo, hi) = (accepted(w[0]), accepted(w[1]));
        for (a, b) in lo.iter().zip(&hi) {
            check(
                b.is_none() || a == b,
                format!("containment broken at {}", w[1]),
            )?;
        }
    }

    let curve = threshold_sweep(&run, &grid).map_err(err)?;
    for w in curve.points.windows(2) {
        check(
            w[1].recall <= w[0].recall,
            format!("recall rises from {} to {}", w[0].threshold, w[1].threshold),
        )?;
    }
    let best = curve
        .at(curve.best_precision_threshold)
        .ok_or("missing point")?;
    let zero = curve.at(0.0).ok_or("missing point")?;
    let detail = format!(
        "precision {:.3} at t={} vs {:.3} at t=0",
        best.precision, best.threshold, zero.precision
    );
    check(best.precision > zero.precision, detail.clone())?;
    Ok(format!(
        "recall non-increasing over {} thresholds; {detail}",
        grid.len()
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_crossvid"))
        .args(args)
        .output()
        .map_err(err)?;
    check(
        out.status.success(),
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{
  "seed": 9,
  "synthetic": {"n_classes": 12, "trials_per_class": 3},
  "encoder": {"epochs": 1, "embedding_dim": 16, "hidden_dim": 32},
  "classifier": {"softmax": {"epochs": 3}},
  "evaluation": {"n_classify": 4, "open_set_classes": 4, "max_folds": 1,
                 "sweep": {"axis": "training_classes", "values": [4, 8]}}
}"#,
    )
    .map_err(err)?;
    let config = config.to_str().ok_or("non-UTF-8 path")?;
    let mut compared = 0;
    for mode in ["closed", "open", "grid", "sweep", "binary"] {
        let mut outputs = Vec::new();
        for (run, jobs) in [("a", "1"), ("b", "4"), ("c", "4")] {
            let out = dir.path().join(format!("{mode}-{run}"));
            let out_s = out.to_str().ok_or("non-UTF-8 path")?;
            run_cli(&[
                "eval", "--config", config, "--mode", mode, "--out", out_s, "--jobs", jobs,
            ])?;
            outputs.push(read_outputs(&out)?);
        }
        check(!outputs[0].is_empty(), format!("{mode}: no outputs"))?;
        for other in &outputs[1..] {
            check(other == &outputs[0], format!("{mode}: outputs differ"))?;
        }
        compared += outputs[0].len();
    }
    Ok(format!(
        "{compared} files byte-identical across reruns and --jobs 1/4"
    ))
}

fn read_outputs(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(&path).map_err(err)?);
    }
    Ok(files)
}

fn c10_folds() -> Outcome {
    let classes: Vec<String> = (0..100).map(|i| format!("v{i:03}")).collect();
    let plan = make_folds(&classes, 20, 10, false).map_err(err)?;
    check(plan.folds.len() == 5, format!("{} folds", plan.folds.len()))?;
    let mut all: Vec<&String> = plan
        .folds
        .iter()
        .flat_map(|f| &f.classify_classes)
        .collect();
    all.sort();
    let before = all.len();
    all.dedup();
    check(
        before == 100 && all.len() == 100,
        "classification sets overlap or miss classes",
    )?;
    plan.validate(&classes).map_err(err)?;
    for f in &plan.folds {
        check(f.encoder_classes.len() == 80, "encoder set size")?;
        check(
            f.encoder_classes
                .iter()
                .all(|c| !f.classify_classes.contains(c)),
            "encoder and classification sets overlap",
        )?;
    }
    let mut corrupted = plan.clone();
    let leaked = corrupted.folds[0].classify_classes[0].clone();
    corrupted.folds[0].encoder_classes.push(leaked);
    check(
        corrupted.folds[0].validate().is_err() && corrupted.validate(&classes).is_err(),
        "corrupted plan was accepted",
    )?;
    Ok("5 disjoint covering folds; corrupted plan rejected".into())
}

fn c11_augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = [100.0, 0.0, 37.0];
    let n = 10_000;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let a = augment_gaussian(&v, 0.05, &mut rng);
        check(a[1] == 0.0, "zero element changed")?;
        draws.push(a[0]);
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    let std = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    check((mean - 100.0).abs() <= 1.0, format!("mean {mean}"))?;
    check((std - 5.0).abs() <= 0.5, format!("std {std}"))?;
    let same = augment_gaussian(&v, 0.0, &mut rng);
    check(same == v, format!("fraction 0 gave {same:?}"))?;
    Ok(format!("mean {mean:.3}, std {std:.3}, fraction 0 exact"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", c1_gradients),
        ("triplet loss oracle", c2_triplet_loss),
        ("offline mining completeness", c3_mining),
        ("knn oracle equivalence", c4_knn),
        ("preprocessor exactness", c5_preprocess),
        ("synthetic end-to-end lift", c6_lift),
        ("hard-platform degradation", c7_hard_platform),
        ("open-set behavior", c8_open_set),
        ("determinism", c9_determinism),
        ("fold validity", c10_folds),
        ("augmentation statistics", c11_augmentation),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
