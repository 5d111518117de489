use std::cmp::Ordering;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, UserId, Vocabulary, START, STOP, UNK};
use crate::error::{Error, Result};
use crate::model::{
    adapted_recurrent_weights, gates, AdaptedWeights, LayerNormParams, LstmState, Parameters,
    UserEmbeddings,
};
use crate::util::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Next-symbol proposals per live hypothesis.
    pub branching: usize,
    pub max_completion_chars: usize,
    pub top_n: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 100,
            branching: 4,
            max_completion_chars: 100,
            top_n: 10,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.branching == 0 || self.branching > vocab_size {
            return Err(Error::Config(format!(
                "branching {} must lie in 1..={vocab_size}",
                self.branching
            )));
        }
        if self.top_n == 0 || self.beam_width < self.top_n {
            return Err(Error::Config(format!(
                "need beam_width ({}) >= top_n ({}) >= 1",
                self.beam_width, self.top_n
            )));
        }
        Ok(())
    }
}

/// A ranked completion: the full query and the log-probability of its
/// generated suffix (STOP included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub logprob: f64,
}

/// A partial completion during search.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub text: String,
    pub logprob: f64,
    pub state: LstmState,
    pub finished: bool,
}

fn rank(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Advances every row of `(hidden, cell)` by one token.
fn step_batch(
    params: &Parameters,
    weights: &AdaptedWeights,
    hidden: &Array2<f64>,
    cell: &Array2<f64>,
    tokens: &[TokenId],
) -> (Array2<f64>, Array2<f64>) {
    let e = params.config.embed_dim;
    let h = params.config.hidden_dim;
    let b = tokens.len();
    let mut z = Array2::zeros((b, e + h));
    for (row, (&tok, prev)) in tokens.iter().zip(hidden.rows()).enumerate() {
        let mut zr = z.row_mut(row);
        zr.slice_mut(ndarray::s![..e])
            .assign(&params.char_embeddings.row(tok));
        zr.slice_mut(ndarray::s![e..]).assign(&prev);
    }
    let mut pre = z.dot(&weights.weights) + &weights.bias;
    let ln = LayerNormParams::of(params);
    let mut next_h = Array2::zeros((b, h));
    let mut next_c = Array2::zeros((b, h));
    for row in 0..b {
        let mut pre_row = pre.row_mut(row);
        let c_prev = cell.row(row);
        let mut h_out = next_h.row_mut(row);
        let mut c_out = next_c.row_mut(row);
        gates(
            pre_row.as_slice_mut().expect("contiguous"),
            c_prev.as_slice().expect("contiguous"),
            ln,
            h_out.as_slice_mut().expect("contiguous"),
            c_out.as_slice_mut().expect("contiguous"),
            None,
        );
    }
    (next_h, next_c)
}

fn log_softmax_rows(params: &Parameters, hidden: &Array2<f64>) -> Array2<f64> {
    let mut logits = hidden.dot(&params.output) + &params.output_bias;
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| v - lse);
    }
    logits
}

/// Beam search for the given user, computing their adapted weights once.
pub fn beam_search(
    params: &Parameters,
    users: &UserEmbeddings,
    user: UserId,
    vocab: &Vocabulary,
    prefix: &str,
    cfg: &BeamConfig,
) -> Result<Vec<Completion>> {
    let weights = adapted_recurrent_weights(params, users.row(user)?, params.config.variant)?;
    beam_search_with(params, &weights, vocab, prefix, cfg)
}

struct Candidate {
    parent: usize,
    token: TokenId,
    logprob: f64,
    text: String,
}

/// Ranked completions of `prefix` under precomputed user weights.
///
/// The state is primed with `START` and the prefix characters. Every live
/// hypothesis proposes its `branching` most likely next symbols (START and
/// UNK are never proposed); the pooled candidates, together with already
/// finished hypotheses, are cut to `beam_width`. Hypotheses that emit STOP are
/// kept as finished results. Search ends once `top_n` finished hypotheses
/// outscore every live one, no live hypothesis remains, or
/// `max_completion_chars` characters have been generated.
pub fn beam_search_with(
    params: &Parameters,
    weights: &AdaptedWeights,
    vocab: &Vocabulary,
    prefix: &str,
    cfg: &BeamConfig,
) -> Result<Vec<Completion>> {
    if prefix.is_empty() {
        return Err(Error::Argument("prefix is empty".into()));
    }
    let vocab_size = params.config.vocab_size;
    if vocab.len() != vocab_size {
        return Err(Error::Dimension(format!(
            "vocabulary has {} symbols, model expects {vocab_size}",
            vocab.len()
        )));
    }
    cfg.validate(vocab_size)?;
    let h = params.config.hidden_dim;

    let mut hidden = Array2::zeros((1, h));
    let mut cell = Array2::zeros((1, h));
    let primer = std::iter::once(START).chain(prefix.chars().map(|c| vocab.id_of(c)));
    for tok in primer {
        (hidden, cell) = step_batch(params, weights, &hidden, &cell, &[tok]);
    }
    let mut logprobs = log_softmax_rows(params, &hidden);
    let mut live: Vec<(String, f64)> = vec![(prefix.to_string(), 0.0)];
    let mut finished: Vec<Completion> = Vec::new();

    for generated in 0..=cfg.max_completion_chars {
        let mut candidates: Vec<Candidate> = Vec::new();
        for (parent, (text, lp)) in live.iter().enumerate() {
            let row = logprobs.row(parent);
            let mut symbols: Vec<TokenId> = if generated == cfg.max_completion_chars {
                vec![STOP]
            } else {
                (0..vocab_size)
                    .filter(|&t| t != START && t != UNK)
                    .collect()
            };
            symbols.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            symbols.truncate(cfg.branching);
            for tok in symbols {
                let logprob = lp + row[tok];
                if tok == STOP {
                    finished.push(Completion {
                        text: text.clone(),
                        logprob,
                    });
                    continue;
                }
                let mut next = text.clone();
                next.push(vocab.char_of(tok).expect("character symbol"));
                candidates.push(Candidate {
                    parent,
                    token: tok,
                    logprob,
                    text: next,
                });
            }
        }
        finished.sort_by(|a, b| rank((&a.text, a.logprob), (&b.text, b.logprob)));
        candidates.sort_by(|a, b| rank((&a.text, a.logprob), (&b.text, b.logprob)));

        // finished hypotheses hold beam slots: a live candidate survives only if
        // fewer than beam_width hypotheses in the pool rank above it
        let mut survivors = Vec::new();
        let mut f = 0;
        for cand in candidates {
            while f < finished.len()
                && rank(
                    (&finished[f].text, finished[f].logprob),
                    (&cand.text, cand.logprob),
                ) == Ordering::Less
            {
                f += 1;
            }
            if f + survivors.len() >= cfg.beam_width {
                break;
            }
            survivors.push(cand);
        }

        let best_live = survivors.first().map(|c| c.logprob);
        let settled = finished.len() >= cfg.top_n
            && best_live.is_none_or(|best| finished[cfg.top_n - 1].logprob >= best);
        if survivors.is_empty() || settled {
            break;
        }

        let parents: Vec<usize> = survivors.iter().map(|c| c.parent).collect();
        let tokens: Vec<TokenId> = survivors.iter().map(|c| c.token).collect();
        let prev_h = hidden.select(Axis(0), &parents);
        let prev_c = cell.select(Axis(0), &parents);
        (hidden, cell) = step_batch(params, weights, &prev_h, &prev_c, &tokens);
        logprobs = log_softmax_rows(params, &hidden);
        live = survivors.into_iter().map(|c| (c.text, c.logprob)).collect();
    }

    finished.sort_by(|a, b| rank((&a.text, a.logprob), (&b.text, b.logprob)));
    finished.truncate(cfg.top_n);
    Ok(finished)
}

/// Greedy single-hypothesis state after consuming `text`; useful for probing.
pub fn prime_state(
    params: &Parameters,
    weights: &AdaptedWeights,
    vocab: &Vocabulary,
    text: &str,
) -> Hypothesis {
    let h = params.config.hidden_dim;
    let mut hidden = Array2::zeros((1, h));
    let mut cell = Array2::zeros((1, h));
    for tok in std::iter::once(START).chain(text.chars().map(|c| vocab.id_of(c))) {
        (hidden, cell) = step_batch(params, weights, &hidden, &cell, &[tok]);
    }
    Hypothesis {
        text: text.to_string(),
        logprob: 0.0,
        state: LstmState {
            hidden: hidden.row(0).to_owned(),
            cell: cell.row(0).to_owned(),
        },
        finished: false,
    }
}

/// Next-symbol log-probabilities from a hypothesis state.
pub fn next_symbol_logprobs(params: &Parameters, state: &LstmState) -> Array1<f64> {
    let hidden = state.hidden.view().insert_axis(Axis(0)).to_owned();
    log_softmax_rows(params, &hidden).row(0).to_owned()
}
