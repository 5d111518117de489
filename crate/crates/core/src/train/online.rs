use serde::{Deserialize, Serialize};

use super::grad::user_gradient;
use super::optim::{AdadeltaConfig, AdadeltaState};
use crate::corpus::{encode_query, group_by_user, QueryRecord, TokenId, UserId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{sequence_nll, Parameters, UserEmbeddings, Variant};

/// Appends a copy of the rare-user row and returns the new user's id.
pub fn spawn_user(users: &mut UserEmbeddings) -> Result<UserId> {
    let rare = users.row(UserId::RARE)?.to_owned();
    users.push(rare.view())
}

/// One Adadelta step on the selected query's NLL with respect to the user's
/// embedding row only. Returns the NLL measured before the update.
pub fn online_update(
    params: &Parameters,
    users: &mut UserEmbeddings,
    ada: &mut AdadeltaState,
    user: UserId,
    tokens: &[TokenId],
) -> Result<f64> {
    if tokens.len() < 3 {
        return Err(Error::Argument("selected query is empty".into()));
    }
    let u = users.row(user)?;
    if params.config.variant == Variant::Unadapted {
        // the loss does not depend on u
        return sequence_nll(params, users, user, tokens);
    }
    let (grad, nll) = user_gradient(params, u, tokens)?;
    ada.step(
        user,
        users.row_mut(user)?,
        grad.view(),
        params.config.float_width,
    )?;
    Ok(nll)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_lr: f64,
    /// `(lr, perplexity)` for every candidate, ascending by lr.
    pub perplexities: Vec<(f64, f64)>,
}

/// Perplexity of sequential predict-then-update over the tuning users, each
/// started from a fresh copy of the rare-user row.
pub fn online_perplexity(
    params: &Parameters,
    users: &UserEmbeddings,
    vocab: &Vocabulary,
    tuning: &[QueryRecord],
    ada_config: AdadeltaConfig,
) -> Result<f64> {
    if tuning.is_empty() {
        return Err(Error::EmptyCorpus("online tuning set is empty".into()));
    }
    let mut table = users.clone();
    let mut ada = AdadeltaState::new(ada_config);
    let mut total = 0.0;
    let mut steps = 0usize;
    for (_, queries) in group_by_user(tuning) {
        let user = spawn_user(&mut table)?;
        ada.reset(user, table.dim());
        for q in queries {
            let tokens = encode_query(vocab, &q.text, None);
            total += online_update(params, &mut table, &mut ada, user, &tokens)?;
            steps += tokens.len() - 1;
        }
    }
    Ok((total / steps as f64).exp())
}

/// Picks the candidate online learning rate with the lowest online
/// perplexity; ties within 1e-12 go to the smaller rate.
pub fn tune_online_lr(
    params: &Parameters,
    users: &UserEmbeddings,
    vocab: &Vocabulary,
    candidates: &[f64],
    tuning: &[QueryRecord],
    base: AdadeltaConfig,
) -> Result<TuneResult> {
    if candidates.is_empty() {
        return Err(Error::Argument("no candidate learning rates".into()));
    }
    if tuning.is_empty() {
        return Err(Error::EmptyCorpus("online tuning set is empty".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut perplexities = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for lr in sorted {
        let ppl = online_perplexity(params, users, vocab, tuning, AdadeltaConfig { lr, ..base })?;
        perplexities.push((lr, ppl));
        if best.is_none_or(|(_, b)| ppl < b - 1e-12) {
            best = Some((lr, ppl));
        }
    }
    Ok(TuneResult {
        best_lr: best.expect("at least one candidate").0,
        perplexities,
    })
}
