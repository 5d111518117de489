use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::cell::{
    adapted_recurrent_weights, cell_forward, AdaptedWeights, LayerNormParams, StepCache,
};
use super::{Parameters, UserEmbeddings};
use crate::corpus::{TokenId, UserId, START, STOP};
use crate::error::{Error, Result};
use crate::util::log_sum_exp;

/// A query encoded as `[START, chars…, STOP]`, attributed to a user row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedQuery {
    pub user: UserId,
    pub tokens: Vec<TokenId>,
}

impl EncodedQuery {
    /// Number of next-symbol predictions.
    pub fn steps(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }
}

pub(crate) struct SequenceTrace {
    pub steps: Vec<StepCache>,
    /// `T × h`
    pub hidden: Array2<f64>,
    /// `T × vocab`
    pub logits: Array2<f64>,
}

fn check_tokens(params: &Parameters, tokens: &[TokenId]) -> Result<()> {
    if tokens.len() < 2 || tokens[0] != START || tokens[tokens.len() - 1] != STOP {
        return Err(Error::Argument(
            "token sequence must start with START and end with STOP".into(),
        ));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(Error::Argument(format!(
            "token id {bad} outside vocabulary of {}",
            params.config.vocab_size
        )));
    }
    Ok(())
}

/// Runs the cell over `tokens[..T]`, producing hidden states and logits for
/// every prediction step.
pub(crate) fn run_sequence(
    params: &Parameters,
    weights: &AdaptedWeights,
    tokens: &[TokenId],
    keep_cache: bool,
) -> SequenceTrace {
    let cfg = &params.config;
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let steps = tokens.len() - 1;
    let ln = LayerNormParams::of(params);
    let mut hidden = Array2::zeros((steps, h));
    let mut caches = Vec::with_capacity(if keep_cache { steps } else { 0 });
    let mut z = vec![0.0; e + h];
    let mut c_prev = vec![0.0; h];
    let mut h_next = vec![0.0; h];
    let mut c_next = vec![0.0; h];
    for (t, &token) in tokens[..steps].iter().enumerate() {
        z[..e].copy_from_slice(
            params
                .char_embeddings
                .row(token)
                .as_slice()
                .expect("standard layout"),
        );
        let cache = if keep_cache {
            caches.push(StepCache::default());
            caches.last_mut()
        } else {
            None
        };
        cell_forward(&z, &c_prev, weights, ln, &mut h_next, &mut c_next, cache);
        hidden
            .row_mut(t)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&h_next);
        z[e..].copy_from_slice(&h_next);
        std::mem::swap(&mut c_prev, &mut c_next);
    }
    let logits = hidden.dot(&params.output) + &params.output_bias;
    SequenceTrace {
        steps: caches,
        hidden,
        logits,
    }
}

/// Logits for every next-symbol prediction, using precomputed user weights.
pub fn forward_logits_with(
    params: &Parameters,
    weights: &AdaptedWeights,
    tokens: &[TokenId],
) -> Result<Array2<f64>> {
    check_tokens(params, tokens)?;
    Ok(run_sequence(params, weights, tokens, false).logits)
}

/// `T × vocab` logits; row `t` predicts `tokens[t + 1]`.
pub fn forward_logits(
    params: &Parameters,
    users: &UserEmbeddings,
    user: UserId,
    tokens: &[TokenId],
) -> Result<Array2<f64>> {
    check_tokens(params, tokens)?;
    let weights = adapted_recurrent_weights(params, users.row(user)?, params.config.variant)?;
    Ok(run_sequence(params, &weights, tokens, false).logits)
}

fn nll_of_logits(logits: &Array2<f64>, tokens: &[TokenId]) -> f64 {
    logits
        .axis_iter(Axis(0))
        .zip(&tokens[1..])
        .map(|(row, &target)| log_sum_exp(row) - row[target])
        .sum()
}

pub fn sequence_nll_with(
    params: &Parameters,
    weights: &AdaptedWeights,
    tokens: &[TokenId],
) -> Result<f64> {
    let logits = forward_logits_with(params, weights, tokens)?;
    Ok(nll_of_logits(&logits, tokens))
}

/// Summed negative log-likelihood of the query in nats.
pub fn sequence_nll(
    params: &Parameters,
    users: &UserEmbeddings,
    user: UserId,
    tokens: &[TokenId],
) -> Result<f64> {
    let logits = forward_logits(params, users, user, tokens)?;
    Ok(nll_of_logits(&logits, tokens))
}

/// `exp(total NLL / total prediction steps)`.
pub fn perplexity(
    params: &Parameters,
    users: &UserEmbeddings,
    dataset: &[EncodedQuery],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus("perplexity of an empty dataset".into()));
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    let mut cached: Option<(UserId, AdaptedWeights)> = None;
    for query in dataset {
        check_tokens(params, &query.tokens)?;
        if cached.as_ref().map(|(u, _)| *u) != Some(query.user) {
            let w =
                adapted_recurrent_weights(params, users.row(query.user)?, params.config.variant)?;
            cached = Some((query.user, w));
        }
        let (_, weights) = cached.as_ref().expect("set above");
        let logits = run_sequence(params, weights, &query.tokens, false).logits;
        total += nll_of_logits(&logits, &query.tokens);
        steps += query.steps();
    }
    Ok((total / steps as f64).exp())
}
