//! Labeled pairs, episodic sampling and the meta-test role schedule.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::Image;

/// One (degraded, clean) pair of a weather condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub degraded: Arc<Image>,
    pub clean: Arc<Image>,
    pub condition_id: String,
}

impl Pair {
    pub fn new(id: impl Into<String>, degraded: Image, clean: Image, condition_id: impl Into<String>) -> Result<Self> {
        if degraded.dims() != clean.dims() {
            return Err(shape_err!(
                "pair images differ in size: {:?} vs {:?}",
                degraded.dims(),
                clean.dims()
            ));
        }
        Ok(Self {
            id: id.into(),
            degraded: Arc::new(degraded),
            clean: Arc::new(clean),
            condition_id: condition_id.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTestSupport,
    Eval,
}

/// Number of leading pairs reserved as the meta-test support pool (10%, rounded up).
pub fn support_split_len(count: usize) -> usize {
    count.div_ceil(10)
}

/// Split tag of the `index`-th pair in a dataset of `count` pairs.
pub fn split_for(index: usize, count: usize) -> Split {
    if index < support_split_len(count) {
        Split::MetaTestSupport
    } else {
        Split::Eval
    }
}

/// All pairs of one weather condition, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub condition_id: String,
    pub pairs: Vec<Pair>,
    pub splits: Vec<Split>,
}

impl Task {
    /// Tags the pairs with the standard support/eval split.
    pub fn new(condition_id: impl Into<String>, pairs: Vec<Pair>) -> Self {
        let n = pairs.len();
        Self {
            condition_id: condition_id.into(),
            splits: (0..n).map(|i| split_for(i, n)).collect(),
            pairs,
        }
    }

    pub fn with_splits(&self, split: Split) -> Vec<Pair> {
        self.pairs
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn support_pool(&self) -> Vec<Pair> {
        self.with_splits(Split::MetaTestSupport)
    }

    pub fn eval_pairs(&self) -> Vec<Pair> {
        self.with_splits(Split::Eval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Pair>,
    pub query: Vec<Pair>,
    pub condition_id: String,
}

/// Picks one task uniformly, then disjoint support and query pairs from it.
pub fn sample_episode(tasks: &[Task], n_support: usize, n_query: usize, seed: u64) -> Result<Episode> {
    if tasks.is_empty() {
        return Err(Error::Empty("no tasks to sample from".into()));
    }
    if n_support == 0 || n_query == 0 {
        return Err(Error::Param(
            "episodes need at least one support and one query pair".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = &tasks[rng.gen_range(0..tasks.len())];
    let need = n_support + n_query;
    if task.pairs.len() < need {
        return Err(Error::Insufficient(alloc::format!(
            "condition `{}` has {} pairs, episode needs {}",
            task.condition_id,
            task.pairs.len(),
            need
        )));
    }
    let picks = sample(&mut rng, task.pairs.len(), need).into_vec();
    let support = picks[..n_support].iter().map(|&i| task.pairs[i].clone()).collect();
    let query = picks[n_support..].iter().map(|&i| task.pairs[i].clone()).collect();
    Ok(Episode {
        support,
        query,
        condition_id: task.condition_id.clone(),
    })
}

/// One meta-test iteration's role assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub query: Vec<Pair>,
    pub support: Vec<Pair>,
}

/// Role schedule for adapting on a labeled support set.
///
/// A single pair serves as its own query and support. Otherwise the set is
/// split into a first part of `ceil(N/2)` pairs and the rest; the first round
/// queries the first part against the rest and the second round swaps them.
pub fn meta_test_rounds(support: &[Pair]) -> Result<Vec<Round>> {
    match support.len() {
        0 => Err(Error::Empty("meta-test support set is empty".into())),
        1 => Ok(alloc::vec![Round {
            query: support.to_vec(),
            support: support.to_vec(),
        }]),
        n => {
            let (first, second) = support.split_at(n.div_ceil(2));
            Ok(alloc::vec![
                Round {
                    query: first.to_vec(),
                    support: second.to_vec(),
                },
                Round {
                    query: second.to_vec(),
                    support: first.to_vec(),
                },
            ])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn pair(id: &str) -> Pair {
        Pair::new(id, Image::zeros(2, 2, 3), Image::zeros(2, 2, 3), "c").unwrap()
    }

    fn ids(pairs: &[Pair]) -> Vec<&str> {
        pairs.iter().map(|p| p.id.as_str()).collect()
    }

    fn task(name: &str, n: usize) -> Task {
        Task::new(name, (0..n).map(|i| pair(&format!("{name}{i}"))).collect())
    }

    #[test]
    fn schedule_single_pair_duplicates() {
        let rounds = meta_test_rounds(&[pair("p")]).unwrap();
        assert_eq!(rounds.len(), 1);
        assert_eq!(ids(&rounds[0].query), ["p"]);
        assert_eq!(ids(&rounds[0].support), ["p"]);
    }

    #[test]
    fn schedule_two_and_four_swap_halves() {
        let r = meta_test_rounds(&[pair("a"), pair("b")]).unwrap();
        assert_eq!((ids(&r[0].query), ids(&r[0].support)), (vec!["a"], vec!["b"]));
        assert_eq!((ids(&r[1].query), ids(&r[1].support)), (vec!["b"], vec!["a"]));
        let r = meta_test_rounds(&[pair("a"), pair("b"), pair("c"), pair("d")]).unwrap();
        assert_eq!((ids(&r[0].query), ids(&r[0].support)), (vec!["a", "b"], vec!["c", "d"]));
        assert_eq!((ids(&r[1].query), ids(&r[1].support)), (vec!["c", "d"], vec!["a", "b"]));
    }

    #[test]
    fn schedule_odd_and_coverage() {
        let set: Vec<Pair> = ["a", "b", "c"].iter().map(|s| pair(s)).collect();
        let r = meta_test_rounds(&set).unwrap();
        assert_eq!(ids(&r[0].query), ["a", "b"]);
        assert_eq!(ids(&r[0].support), ["c"]);
        for n in 2..9 {
            let set: Vec<Pair> = (0..n).map(|i| pair(&format!("p{i}"))).collect();
            for round in meta_test_rounds(&set).unwrap() {
                let mut all = ids(&round.query);
                all.extend(ids(&round.support));
                all.sort();
                let mut want = ids(&set);
                want.sort();
                assert_eq!(all, want);
            }
        }
        assert!(matches!(meta_test_rounds(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn split_ratio() {
        let t = task("r", 10);
        assert_eq!(t.support_pool().len(), 1);
        assert_eq!(t.eval_pairs().len(), 9);
        assert_eq!(support_split_len(56), 6);
        assert_eq!(support_split_len(600), 60);
    }

    #[test]
    fn episode_sampling() {
        let tasks = [task("rain", 12), task("fog", 12)];
        let ep = sample_episode(&tasks, 1, 7, 3).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (1, 7));
        for s in &ep.support {
            assert!(ep.query.iter().all(|q| q.id != s.id));
        }
        assert!(ep.query.iter().all(|q| q.id.starts_with(&ep.condition_id)));
        assert_eq!(ep, sample_episode(&tasks, 1, 7, 3).unwrap());
        let conditions: Vec<_> = (0..20)
            .map(|s| sample_episode(&tasks, 1, 7, s).unwrap().condition_id)
            .collect();
        assert!(conditions.iter().any(|c| c == "rain") && conditions.iter().any(|c| c == "fog"));
        assert!(matches!(
            sample_episode(&[task("x", 5)], 1, 7, 0),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn pair_dims_must_match() {
        assert!(Pair::new("x", Image::zeros(2, 2, 3), Image::zeros(2, 3, 3), "c").is_err());
    }
}
