use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CohortError, Label, Sample, SampleSource, Trial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SplitPolicy {
    /// Tampered: BLIND trains, OPEN tests. Untampered: stratified 85:15.
    TrialBased,
    /// Every class stratified 85:15.
    #[serde(rename = "RATIO_85_15")]
    Ratio85_15,
}

/// Indices into the sample list the plan was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub policy: SplitPolicy,
}

/// Down-sample the untampered class to the number of tampered samples.
///
/// Tampered samples are never dropped and relative order is preserved.
pub fn balance(samples: Vec<Sample>, seed: u64) -> Vec<Sample> {
    let tampered = samples.iter().filter(|s| s.label.is_tampered()).count();
    let untampered: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.label.is_tampered())
        .map(|(i, _)| i)
        .collect();
    if untampered.len() <= tampered {
        return samples;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; samples.len()];
    for &i in &untampered {
        keep[i] = false;
    }
    for pick in index::sample(&mut rng, untampered.len(), tampered) {
        keep[untampered[pick]] = true;
    }
    samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

/// Down-sample every class to the size of the smallest one present.
pub fn equalize(samples: Vec<Sample>, seed: u64) -> Vec<Sample> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let mut keep = vec![false; samples.len()];
    for i in equalize_labels(&labels, seed) {
        keep[i] = true;
    }
    samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

/// Positions `equalize` would keep, ascending.
pub fn equalize_labels(labels: &[Label], seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let Some(target) = by_class.values().map(Vec::len).min() else {
        return Vec::new();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(target * by_class.len());
    for members in by_class.values() {
        kept.extend(
            index::sample(&mut rng, members.len(), target)
                .into_iter()
                .map(|p| members[p]),
        );
    }
    kept.sort_unstable();
    kept
}

/// Training share of `n` groups: 85%, rounded half up, and at least one
/// group on each side.
fn train_count(n: usize) -> usize {
    ((85 * n + 50) / 100).clamp(1, n - 1)
}

/// Partition samples into train and test.
///
/// Samples sharing a source slice always land on the same side.
pub fn split(samples: &[Sample], policy: SplitPolicy, seed: u64) -> Result<SplitPlan, CohortError> {
    // Group indices by source, keeping first-seen order for determinism.
    let mut groups: Vec<(Label, Trial, Vec<usize>)> = Vec::new();
    let mut group_of: BTreeMap<&SampleSource, usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        match group_of.get(&s.source) {
            Some(&g) => groups[g].2.push(i),
            None => {
                group_of.insert(&s.source, groups.len());
                groups.push((s.label, s.trial, vec![i]));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in Label::ALL {
        let members: Vec<usize> = (0..groups.len())
            .filter(|&g| groups[g].0 == label)
            .collect();
        if members.is_empty() {
            continue;
        }
        if policy == SplitPolicy::TrialBased && label.is_tampered() {
            for g in members {
                match groups[g].1 {
                    Trial::Blind => train.extend(&groups[g].2),
                    Trial::Open => test.extend(&groups[g].2),
                    Trial::Na => {
                        let who = &samples[groups[g].2[0]].source.patient_id;
                        return Err(CohortError::MissingTrial(who.clone()));
                    }
                }
            }
            continue;
        }
        if members.len() < 2 {
            return Err(CohortError::ClassTooSmall {
                label,
                count: members.len(),
            });
        }
        let mut shuffled = members;
        shuffled.shuffle(&mut rng);
        let n_train = train_count(shuffled.len());
        for (k, g) in shuffled.into_iter().enumerate() {
            if k < n_train {
                train.extend(&groups[g].2);
            } else {
                test.extend(&groups[g].2);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train,
        test,
        seed,
        policy,
    })
}
