use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SamplePair, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be non-negative and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Partition {
    pub fn get(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assigns each distinct id to a split: ids are sorted, shuffled with `seed`,
/// then cut at `round(train·n)` and `round(val·n)`; the test split takes the rest.
pub fn split_ids<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    ratios.validate()?;
    let unique: BTreeSet<&str> = ids.into_iter().collect();
    if unique.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() as f64;
    let n_train = (ratios.train * n).round() as usize;
    let n_val = ((ratios.val * n).round() as usize).min(order.len() - n_train);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), s)
        })
        .collect())
}

/// Partitions pairs by `source_id`, so all flipped variants of one source image
/// share a split. Input order is preserved within each split.
pub fn make_splits(pairs: Vec<SamplePair>, ratios: &SplitRatios, seed: u64) -> Result<Partition> {
    let assignment = split_ids(pairs.iter().map(|p| p.source_id.as_str()), ratios, seed)?;
    let mut out = Partition::default();
    for mut p in pairs {
        let s = assignment[&p.source_id];
        p.split = Some(s);
        match s {
            Split::Train => out.train.push(p),
            Split::Val => out.val.push(p),
            Split::Test => out.test.push(p),
        }
    }
    Ok(out)
}
