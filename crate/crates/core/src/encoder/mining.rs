use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TraceKey;
use crate::numeric::{squared_distance, Embedding};
use crate::preprocess::FeatureSet;

/// Anchor and positive share a video; the negative is another video on the
/// positive's platform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: TraceKey,
    pub positive: TraceKey,
    pub negative: TraceKey,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        let ok = self.anchor.video_id == self.positive.video_id
            && self.anchor.video_id != self.negative.video_id
            && self.positive.platform == self.negative.platform
            && self.anchor != self.positive;
        if ok {
            Ok(())
        } else {
            Err(Error::data(format!("invalid triplet {self:?}")))
        }
    }
}

/// Every anchor trace on `anchor_platform` is paired once with every other
/// class as negative. Positive and negative trials are drawn from
/// `other_platform`. When both platforms are the same, the positive is
/// drawn from the anchor's other trials.
pub fn mine_offline_triplets<R: Rng + ?Sized>(
    features: &FeatureSet,
    anchor_platform: &str,
    other_platform: &str,
    classes: &[String],
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let lookup = |platform: &str, class: &str| {
        let trials = features.trials(platform, class);
        if trials.is_empty() {
            Err(Error::data(format!(
                "class {class} has no traces on platform {platform}"
            )))
        } else {
            Ok(trials)
        }
    };
    let anchors: Vec<Vec<u32>> = classes
        .iter()
        .map(|c| lookup(anchor_platform, c))
        .collect::<Result<_>>()?;
    let others: Vec<Vec<u32>> = classes
        .iter()
        .map(|c| lookup(other_platform, c))
        .collect::<Result<_>>()?;
    let same_platform = anchor_platform == other_platform;

    let mut triplets = Vec::new();
    for (i, class) in classes.iter().enumerate() {
        for &trial in &anchors[i] {
            let positives: Vec<u32> = if same_platform {
                others[i].iter().copied().filter(|t| *t != trial).collect()
            } else {
                others[i].clone()
            };
            let Some(_) = positives.first() else {
                return Err(Error::data(format!(
                    "class {class} needs a second trial on {other_platform} to form a positive"
                )));
            };
            for (k, negative_class) in classes.iter().enumerate() {
                if k == i {
                    continue;
                }
                let p = *positives.choose(rng).expect("non-empty");
                let n = *others[k].choose(rng).expect("non-empty");
                triplets.push(Triplet {
                    anchor: TraceKey::new(anchor_platform, class, trial),
                    positive: TraceKey::new(other_platform, class, p),
                    negative: TraceKey::new(other_platform, negative_class, n),
                });
            }
        }
    }
    Ok(triplets)
}

/// Indices into a batch chosen by online mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// `true` when `d(a,p) < d(a,n) < d(a,p) + margin`; `false` for the
    /// fallback negative that sits inside `d(a,p)`.
    pub semi_hard: bool,
}

/// In-batch semi-hard mining.
///
/// For every ordered same-video pair (anchor, positive) on different
/// platforms, candidates are the other videos on the positive's platform.
/// The closest negative with `d(a,p) < d(a,n) < d(a,p) + margin` is
/// selected; failing that, the farthest negative with `d(a,n) <= d(a,p)`.
/// Pairs with neither are skipped. A batch drawn from a single platform
/// pairs distinct samples of the same video instead.
pub fn mine_semihard(
    embeddings: &[Embedding],
    labels: &[usize],
    platforms: &[usize],
    margin: f64,
) -> Result<Vec<SelectedTriplet>> {
    let n = embeddings.len();
    if labels.len() != n || platforms.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: labels.len().min(platforms.len()),
        });
    }
    let single_platform = platforms.windows(2).all(|w| w[0] == w[1]);
    let dist = |i: usize, j: usize| squared_distance(&embeddings[i].0, &embeddings[j].0).sqrt();
    let mut selected = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            if !single_platform && platforms[p] == platforms[a] {
                continue;
            }
            let dap = dist(a, p);
            let mut semi: Option<(f64, usize)> = None;
            let mut hard: Option<(f64, usize)> = None;
            for cand in 0..n {
                if labels[cand] == labels[a] || platforms[cand] != platforms[p] {
                    continue;
                }
                let dan = dist(a, cand);
                if dan > dap && dan < dap + margin {
                    if semi.is_none_or(|(d, _)| dan < d) {
                        semi = Some((dan, cand));
                    }
                } else if dan <= dap && hard.is_none_or(|(d, _)| dan > d) {
                    hard = Some((dan, cand));
                }
            }
            let choice = semi
                .map(|(_, c)| (c, true))
                .or(hard.map(|(_, c)| (c, false)));
            if let Some((negative, semi_hard)) = choice {
                selected.push(SelectedTriplet {
                    anchor: a,
                    positive: p,
                    negative,
                    semi_hard,
                });
            }
        }
    }
    Ok(selected)
}
