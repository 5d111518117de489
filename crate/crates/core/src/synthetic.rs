//! Small synthetic query logs with user archetypes.
//!
//! Every archetype owns a disjoint pool of queries built as `stem + " " + topic`,
//! where all archetypes share the stems but not the topics. A prefix that ends
//! inside a stem is ambiguous without knowing the user, so a model that can
//! personalize has something to gain.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, QueryRecord};
use crate::error::{Error, Result};

const STEMS: [&str; 10] = [
    "best", "cheap", "buy", "local", "new", "top", "used", "online", "free", "learn",
];

const TOPICS: [[&str; 5]; 2] = [
    ["soccer", "tennis", "golf", "hockey", "rugby"],
    ["pasta", "salad", "soup", "bread", "curry"],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Users with at least the rare threshold of queries.
    pub train_users: usize,
    pub queries_per_train_user: usize,
    pub rare_users: usize,
    pub queries_per_rare_user: usize,
    pub valid_users: usize,
    pub test_users: usize,
    pub queries_per_test_user: usize,
    /// Exponent of the Zipf popularity within each pool.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_users: 36,
            queries_per_train_user: 50,
            rare_users: 20,
            queries_per_rare_user: 10,
            valid_users: 4,
            test_users: 12,
            queries_per_test_user: 20,
            zipf_exponent: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub split: DatasetSplit,
    /// Query pool of each archetype, most popular first.
    pub pools: Vec<Vec<String>>,
    /// Archetype of every user key, in generation order.
    pub archetypes: Vec<(String, usize)>,
}

/// The archetype pools before popularity shuffling.
pub fn archetype_pools() -> Vec<Vec<String>> {
    TOPICS
        .iter()
        .map(|topics| {
            STEMS
                .iter()
                .flat_map(|s| topics.iter().map(move |t| format!("{s} {t}")))
                .collect()
        })
        .collect()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.train_users == 0 || cfg.queries_per_train_user == 0 {
        return Err(Error::Config(
            "synthetic corpus needs training users".into(),
        ));
    }
    if !(cfg.zipf_exponent >= 0.0 && cfg.zipf_exponent.is_finite()) {
        return Err(Error::Config("zipf_exponent must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pools = archetype_pools();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let weights: Vec<f64> = (0..pools[0].len())
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let popularity = WeightedIndex::new(&weights).expect("positive weights");

    let mut archetypes = Vec::new();
    let mut clock = 0i64;
    let mut user = |prefix: &str, n_users: usize, per_user: usize, out: &mut Vec<QueryRecord>| {
        for i in 0..n_users {
            let key = format!("{prefix}{i}");
            let archetype = i % pools.len();
            archetypes.push((key.clone(), archetype));
            for _ in 0..per_user {
                let q = &pools[archetype][popularity.sample(&mut rng)];
                out.push(QueryRecord::new(key.clone(), q.clone(), clock));
                clock += 1;
            }
        }
    };
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    user(
        "train",
        cfg.train_users,
        cfg.queries_per_train_user,
        &mut split.train,
    );
    user(
        "rare",
        cfg.rare_users,
        cfg.queries_per_rare_user,
        &mut split.train,
    );
    user(
        "valid",
        cfg.valid_users,
        cfg.queries_per_test_user,
        &mut split.valid,
    );
    user(
        "test",
        cfg.test_users,
        cfg.queries_per_test_user,
        &mut split.test,
    );
    Ok(SyntheticCorpus {
        split,
        pools,
        archetypes,
    })
}
