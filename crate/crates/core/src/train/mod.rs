//! Full-model training with Adam and evaluation-time online updates of user
//! embeddings with Adadelta.

mod grad;
mod online;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assign_user_ids, build_vocabulary, encode_query, DatasetSplit, QueryRecord, UserId, UserTable,
    Vocabulary, DEFAULT_MAX_TRAIN_CHARS, DEFAULT_RARE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::model::{
    init_parameters, perplexity, EncodedQuery, ModelConfig, Parameters, UserEmbeddings,
};
use crate::util::splitmix64;

pub use grad::{compute_gradients, GradientSet};
pub use online::{online_perplexity, online_update, spawn_user, tune_online_lr, TuneResult};
pub use optim::{adam_step, AdadeltaConfig, AdadeltaState, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam_lr: f64,
    pub batch_size: usize,
    /// Character truncation applied to training encodings only.
    pub max_train_chars: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub gradient_clip: Option<f64>,
    pub rare_threshold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            adam_lr: 1e-3,
            batch_size: 64,
            max_train_chars: DEFAULT_MAX_TRAIN_CHARS,
            seed: 0,
            gradient_clip: None,
            rare_threshold: DEFAULT_RARE_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.adam_lr > 0.0 && self.adam_lr.is_finite()) {
            return Err(Error::Config(format!(
                "adam_lr {} must be positive",
                self.adam_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_train_chars == 0 {
            return Err(Error::Config("max_train_chars must be at least 1".into()));
        }
        if self.gradient_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("gradient_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-step NLL over the epoch's minibatches (nats).
    pub train_nll: f64,
    pub valid_perplexity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: Parameters,
    pub users: UserEmbeddings,
    pub vocab: Vocabulary,
    pub user_table: UserTable,
    pub initial_valid_perplexity: Option<f64>,
    pub epochs: Vec<EpochMetrics>,
}

/// Encodes records with user ids from `table`; users it does not know map to
/// the rare-user row.
pub fn encode_records(
    records: &[QueryRecord],
    vocab: &Vocabulary,
    table: &UserTable,
    max_len: Option<usize>,
) -> Vec<EncodedQuery> {
    records
        .iter()
        .map(|r| EncodedQuery {
            user: table.id_of(&r.user_key).unwrap_or(UserId::RARE),
            tokens: encode_query(vocab, &r.text, max_len),
        })
        .collect()
}

pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    splits: &DatasetSplit,
) -> Result<TrainedModel> {
    train_with_progress(config, model_config, splits, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    config: &TrainConfig,
    model_config: &ModelConfig,
    splits: &DatasetSplit,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::EmptyCorpus("training split is empty".into()));
    }
    let vocab = build_vocabulary(&splits.train, model_config.vocab_size)?;
    let user_table = assign_user_ids(&splits.train, config.rare_threshold)?;
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        ..model_config.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut params, mut users) = init_parameters(&model_config, user_table.k(), &mut rng)?;

    let mut train_set = encode_records(
        &splits.train,
        &vocab,
        &user_table,
        Some(config.max_train_chars),
    );
    let valid_set = encode_records(&splits.valid, &vocab, &user_table, None);
    let valid_ppl = |p: &Parameters, u: &UserEmbeddings| -> Result<Option<f64>> {
        if valid_set.is_empty() {
            Ok(None)
        } else {
            perplexity(p, u, &valid_set).map(Some)
        }
    };
    let initial_valid_perplexity = valid_ppl(&params, &users)?;

    let mut adam = AdamState::new(&params, &users);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ epoch as u64));
        train_set.shuffle(&mut shuffle_rng);
        let mut nll_sum = 0.0;
        let mut step_sum = 0usize;
        for batch in train_set.chunks(config.batch_size) {
            let (mut grads, mean_nll) = compute_gradients(&params, &users, batch)?;
            let steps: usize = batch.iter().map(EncodedQuery::steps).sum();
            nll_sum += mean_nll * steps as f64;
            step_sum += steps;
            if let Some(clip) = config.gradient_clip {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.step(&mut params, &mut users, &grads, config.adam_lr)?;
        }
        let metrics = EpochMetrics {
            epoch,
            train_nll: nll_sum / step_sum as f64,
            valid_perplexity: valid_ppl(&params, &users)?,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }

    Ok(TrainedModel {
        params,
        users,
        vocab,
        user_table,
        initial_valid_perplexity,
        epochs: history,
    })
}
