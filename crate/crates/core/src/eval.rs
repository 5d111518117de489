//! Offline evaluation: MRR under sequential online adaptation, the
//! most-popular-completion baseline, and derived reports.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complete::{beam_search_with, build_mpc_index, BeamConfig, MpcIndex, DEFAULT_MIN_COUNT};
use crate::corpus::{
    encode_query, group_by_user, sample_prefix, PrefixSample, QueryRecord, UserId, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::{adapted_recurrent_weights, sequence_nll, Parameters, UserEmbeddings};
use crate::train::{online_update, spawn_user, AdadeltaConfig, AdadeltaState};
use crate::util::{fnv1a, splitmix64};

/// Candidates considered when scoring a ranking.
pub const MRR_DEPTH: usize = 10;
pub const DEFAULT_CURVE_WINDOW: usize = 9;
pub const DEFAULT_CASE_STUDY_POOL: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    pub mrr_seen: f64,
    pub mrr_unseen: f64,
    pub mrr_all: f64,
    pub n_seen: usize,
    pub n_unseen: usize,
}

impl EvalResult {
    pub fn from_events(events: &[TraceEvent]) -> Self {
        let (mut seen, mut unseen) = (0.0, 0.0);
        let (mut n_seen, mut n_unseen) = (0usize, 0usize);
        for e in events {
            if e.seen {
                seen += e.rr;
                n_seen += 1;
            } else {
                unseen += e.rr;
                n_unseen += 1;
            }
        }
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        Self {
            mrr_seen: mean(seen, n_seen),
            mrr_unseen: mean(unseen, n_unseen),
            mrr_all: mean(seen + unseen, n_seen + n_unseen),
            n_seen,
            n_unseen,
        }
    }
}

/// One scored prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub user: String,
    /// Position of the query in the user's chronological history.
    pub query_index: usize,
    pub rr: f64,
    pub prefix_len: usize,
    pub query_len: usize,
    pub seen: bool,
}

/// `1/rank` of `truth` among the first ten candidates, 0 when absent.
pub fn reciprocal_rank<S: AsRef<str>>(candidates: &[S], truth: &str) -> f64 {
    candidates
        .iter()
        .take(MRR_DEPTH)
        .position(|c| c.as_ref() == truth)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn mean_reciprocal_rank(rrs: &[f64]) -> f64 {
    if rrs.is_empty() {
        0.0
    } else {
        rrs.iter().sum::<f64>() / rrs.len() as f64
    }
}

/// True when some indexed training query starts with `prefix`.
pub fn is_seen_prefix(index: &MpcIndex, prefix: &str) -> bool {
    index.has_prefix(prefix)
}

/// The evaluation prefix for a user's `query_index`-th query. The draw depends
/// only on `(seed, user, query_index)`, so every completer sees the same samples.
pub fn evaluation_prefix(
    seed: u64,
    user_key: &str,
    query_index: usize,
    query: &str,
) -> Option<PrefixSample> {
    let key = splitmix64(seed ^ fnv1a(user_key.as_bytes())) ^ splitmix64(query_index as u64);
    sample_prefix(&mut ChaCha8Rng::seed_from_u64(key), query)
}

/// Training-side facts shared by every completer in one run.
#[derive(Debug, Clone)]
pub struct EvalContext {
    /// Frequent training queries; defines the seen/unseen split.
    pub seen_index: MpcIndex,
    train_users: HashSet<String>,
}

impl EvalContext {
    pub fn new(train: &[QueryRecord]) -> Self {
        Self {
            seen_index: build_mpc_index(train, DEFAULT_MIN_COUNT),
            train_users: train.iter().map(|r| r.user_key.clone()).collect(),
        }
    }

    fn check_disjoint(&self, test: &[QueryRecord]) -> Result<()> {
        match test.iter().find(|r| self.train_users.contains(&r.user_key)) {
            Some(r) => Err(Error::Protocol(format!(
                "test user {} also appears in training data",
                r.user_key
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beam: BeamConfig,
    pub online: AdadeltaConfig,
    pub seed: u64,
    /// Worker threads; users are independent so results do not depend on it.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            online: AdadeltaConfig::default(),
            seed: 0,
            threads: 1,
        }
    }
}

/// Runs the predict-then-update protocol for every test user.
///
/// Each user starts from a copy of the rare-user embedding. For every query in
/// chronological order one prefix is sampled (queries under three characters
/// are not scored), completions are ranked with the current embedding, and
/// only then is the embedding updated on the true query.
pub fn evaluate_model(
    ctx: &EvalContext,
    params: &Parameters,
    users: &UserEmbeddings,
    vocab: &Vocabulary,
    test: &[QueryRecord],
    cfg: &EvalConfig,
) -> Result<(EvalResult, Vec<TraceEvent>)> {
    ctx.check_disjoint(test)?;
    cfg.beam.validate(params.config.vocab_size)?;
    let rare = users.row(UserId::RARE)?.to_owned();
    let groups = group_by_user(test);
    let threads = cfg.threads.clamp(1, groups.len().max(1));

    let run = |user_key: &str, queries: &[QueryRecord]| -> Result<Vec<TraceEvent>> {
        // a private table holding the rare row and this user's row
        let mut table = UserEmbeddings::zeros(0, rare.len());
        table.push(rare.view())?;
        let user = spawn_user(&mut table)?;
        let mut ada = AdadeltaState::new(cfg.online);
        ada.reset(user, table.dim());
        let mut events = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            if let Some(sample) = evaluation_prefix(cfg.seed, user_key, i, &q.text) {
                let weights =
                    adapted_recurrent_weights(params, table.row(user)?, params.config.variant)?;
                let ranked = beam_search_with(params, &weights, vocab, &sample.prefix, &cfg.beam)?;
                let texts: Vec<&str> = ranked.iter().map(|c| c.text.as_str()).collect();
                events.push(TraceEvent {
                    user: user_key.to_string(),
                    query_index: i,
                    rr: reciprocal_rank(&texts, &q.text),
                    prefix_len: sample.prefix.chars().count(),
                    query_len: q.text.chars().count(),
                    seen: is_seen_prefix(&ctx.seen_index, &sample.prefix),
                });
            }
            let tokens = encode_query(vocab, &q.text, None);
            if tokens.len() >= 3 {
                online_update(params, &mut table, &mut ada, user, &tokens)?;
            }
        }
        Ok(events)
    };

    let per_user: Vec<Result<Vec<TraceEvent>>> = if threads == 1 {
        groups.iter().map(|(k, qs)| run(k, qs)).collect()
    } else {
        let chunk = groups.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = groups
                .chunks(chunk)
                .map(|part| {
                    let run = &run;
                    s.spawn(move || part.iter().map(|(k, qs)| run(k, qs)).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut trace = Vec::new();
    for events in per_user {
        trace.extend(events?);
    }
    Ok((EvalResult::from_events(&trace), trace))
}

/// Scores the most-popular-completion baseline on the same prefixes as
/// [`evaluate_model`] with an equal seed.
pub fn evaluate_mpc(
    ctx: &EvalContext,
    index: &MpcIndex,
    test: &[QueryRecord],
    seed: u64,
) -> Result<(EvalResult, Vec<TraceEvent>)> {
    ctx.check_disjoint(test)?;
    let mut trace = Vec::new();
    for (user_key, queries) in group_by_user(test) {
        for (i, q) in queries.iter().enumerate() {
            let Some(sample) = evaluation_prefix(seed, &user_key, i, &q.text) else {
                continue;
            };
            let ranked = index.complete(&sample.prefix, MRR_DEPTH);
            let texts: Vec<&str> = ranked.iter().map(|(t, _)| t.as_str()).collect();
            trace.push(TraceEvent {
                user: user_key.clone(),
                query_index: i,
                rr: reciprocal_rank(&texts, &q.text),
                prefix_len: sample.prefix.chars().count(),
                query_len: q.text.chars().count(),
                seen: is_seen_prefix(&ctx.seen_index, &sample.prefix),
            });
        }
    }
    Ok((EvalResult::from_events(&trace), trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCurve {
    pub window: usize,
    /// `(queries seen so far, smoothed relative improvement)`.
    pub points: Vec<(usize, f64)>,
}

fn mrr_by_index(trace: &[TraceEvent]) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for e in trace {
        let slot = sums.entry(e.query_index).or_default();
        slot.0 += e.rr;
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|(i, (s, n))| (i, s / n as f64))
        .collect()
}

/// Relative MRR improvement of `adapted` over `unadapted` per query index,
/// smoothed by a centered moving average truncated at the ends. Indices
/// missing from either trace or with zero unadapted MRR are dropped before
/// smoothing.
pub fn improvement_curve(
    adapted: &[TraceEvent],
    unadapted: &[TraceEvent],
    window: usize,
) -> Result<ImprovementCurve> {
    if window == 0 {
        return Err(Error::Argument(
            "moving-average window must be positive".into(),
        ));
    }
    let a = mrr_by_index(adapted);
    let b = mrr_by_index(unadapted);
    let raw: Vec<(usize, f64)> = a
        .iter()
        .filter_map(|(i, &ma)| {
            let mb = *b.get(i)?;
            (mb > 0.0).then(|| (*i, (ma - mb) / mb))
        })
        .collect();
    let half = window / 2;
    let points = (0..raw.len())
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + window - half).min(raw.len());
            let mean = raw[lo..hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo) as f64;
            (raw[k].0, mean)
        })
        .collect();
    Ok(ImprovementCurve { window, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub length: usize,
    pub mrr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthTable {
    pub by_prefix_length: Vec<LengthBucket>,
    pub by_query_length: Vec<LengthBucket>,
}

pub fn mrr_by_length(trace: &[TraceEvent]) -> Result<LengthTable> {
    if trace.is_empty() {
        return Err(Error::Argument("trace is empty".into()));
    }
    let bucket = |key: fn(&TraceEvent) -> usize| {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for e in trace {
            let slot = sums.entry(key(e)).or_default();
            slot.0 += e.rr;
            slot.1 += 1;
        }
        sums.into_iter()
            .map(|(length, (s, count))| LengthBucket {
                length,
                mrr: s / count as f64,
                count,
            })
            .collect()
    };
    Ok(LengthTable {
        by_prefix_length: bucket(|e| e.prefix_len),
        by_query_length: bucket(|e| e.query_len),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub probes: Vec<String>,
    /// `(query, likelihood after / likelihood before)`, descending.
    pub ranked: Vec<(String, f64)>,
}

/// Ranks `pool` by how much a fresh user's likelihood of each query grows
/// after selecting the `probes` in order.
pub fn likelihood_ratio_case_study(
    params: &Parameters,
    users: &UserEmbeddings,
    vocab: &Vocabulary,
    probes: &[&str],
    pool: &[String],
    online: AdadeltaConfig,
) -> Result<CaseStudyReport> {
    if pool.is_empty() {
        return Err(Error::Argument("candidate pool is empty".into()));
    }
    let mut table = UserEmbeddings::zeros(0, users.dim());
    table.push(users.row(UserId::RARE)?)?;
    let user = spawn_user(&mut table)?;
    let encoded: Vec<_> = pool.iter().map(|q| encode_query(vocab, q, None)).collect();
    let before = encoded
        .iter()
        .map(|t| sequence_nll(params, &table, user, t))
        .collect::<Result<Vec<_>>>()?;
    let mut ada = AdadeltaState::new(online);
    ada.reset(user, table.dim());
    for probe in probes {
        online_update(
            params,
            &mut table,
            &mut ada,
            user,
            &encode_query(vocab, probe, None),
        )?;
    }
    let mut ranked = Vec::with_capacity(pool.len());
    for ((query, tokens), nll_before) in pool.iter().zip(&encoded).zip(before) {
        let nll_after = sequence_nll(params, &table, user, tokens)?;
        ranked.push((query.clone(), (nll_before - nll_after).exp()));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(CaseStudyReport {
        probes: probes.iter().map(|p| p.to_string()).collect(),
        ranked,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::model::{init_parameters, ModelConfig, Variant};

    fn ev(user: &str, index: usize, rr: f64, prefix_len: usize, query_len: usize) -> TraceEvent {
        TraceEvent {
            user: user.into(),
            query_index: index,
            rr,
            prefix_len,
            query_len,
            seen: index.is_multiple_of(2),
        }
    }

    #[test]
    fn reciprocal_rank_examples() {
        let ranked = ["ab", "abc", "abd", "x", "abe"];
        assert_eq!(reciprocal_rank(&ranked, "ab"), 1.0);
        assert_eq!(reciprocal_rank(&ranked, "zzz"), 0.0);
        let rrs = [
            reciprocal_rank(&ranked, "abc"),
            reciprocal_rank(&ranked, "nope"),
            reciprocal_rank(&ranked, "abe"),
        ];
        assert!((mean_reciprocal_rank(&rrs) - 0.7 / 3.0).abs() < 1e-15);
        let long: Vec<String> = (0..12).map(|i| format!("q{i}")).collect();
        assert_eq!(reciprocal_rank(&long, "q9"), 0.1);
        assert_eq!(reciprocal_rank(&long, "q10"), 0.0);
    }

    #[test]
    fn seen_prefix_uses_frequent_queries_only() {
        let mut train: Vec<QueryRecord> =
            (0..3).map(|i| QueryRecord::new("a", "apple", i)).collect();
        train.extend((0..2).map(|i| QueryRecord::new("a", "banana", i)));
        let ctx = EvalContext::new(&train);
        assert!(is_seen_prefix(&ctx.seen_index, "ap"));
        assert!(!is_seen_prefix(&ctx.seen_index, "ba"));
        let empty = EvalContext::new(&[]);
        assert!(!is_seen_prefix(&empty.seen_index, "ap"));
    }

    #[test]
    fn result_is_weighted_mean_of_buckets() {
        let events: Vec<TraceEvent> = (0..7)
            .map(|i| ev("u", i, 1.0 / (i + 1) as f64, 2, 5))
            .collect();
        let r = EvalResult::from_events(&events);
        let n = (r.n_seen + r.n_unseen) as f64;
        let weighted = (r.n_seen as f64 * r.mrr_seen + r.n_unseen as f64 * r.mrr_unseen) / n;
        assert!((weighted - r.mrr_all).abs() < 1e-15);
        assert_eq!((r.n_seen, r.n_unseen), (4, 3));
    }

    #[test]
    fn evaluation_prefix_is_keyed_not_ordered() {
        let a = evaluation_prefix(5, "user", 3, "hello world");
        let b = evaluation_prefix(5, "user", 3, "hello world");
        assert_eq!(a, b);
        assert_eq!(evaluation_prefix(5, "user", 0, "hi"), None);
        let distinct: HashSet<_> = (0..50)
            .filter_map(|i| evaluation_prefix(5, "user", i, "hello world"))
            .map(|s| s.prefix)
            .collect();
        assert!(distinct.len() > 3);
    }

    #[test]
    fn identical_traces_give_flat_zero_curve() {
        let t: Vec<TraceEvent> = (0..15).map(|i| ev("u", i, 0.5, 2, 4)).collect();
        let c = improvement_curve(&t, &t, 9).unwrap();
        assert_eq!(c.points.len(), 15);
        assert!(c.points.iter().all(|p| p.1 == 0.0));
    }

    #[test]
    fn curve_window_one_is_raw_and_matches_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let adapted: Vec<TraceEvent> = (0..20)
            .map(|i| ev("u", i, rng.gen_range(0.0..1.0), 2, 4))
            .collect();
        let mut base: Vec<TraceEvent> = (0..20)
            .map(|i| ev("u", i, rng.gen_range(0.1..1.0), 2, 4))
            .collect();
        base[7].rr = 0.0;
        let raw: Vec<(usize, f64)> = (0..20)
            .filter(|&i| i != 7)
            .map(|i| (i, (adapted[i].rr - base[i].rr) / base[i].rr))
            .collect();
        let c1 = improvement_curve(&adapted, &base, 1).unwrap();
        assert_eq!(c1.points, raw);

        let c9 = improvement_curve(&adapted, &base, 9).unwrap();
        for (k, &(x, y)) in c9.points.iter().enumerate() {
            let window: Vec<f64> = raw
                .iter()
                .enumerate()
                .filter(|(j, _)| (*j as i64 - k as i64).abs() <= 4)
                .map(|(_, p)| p.1)
                .collect();
            let oracle = window.iter().sum::<f64>() / window.len() as f64;
            assert_eq!(x, raw[k].0);
            assert!((y - oracle).abs() < 1e-12);
        }
        assert!(improvement_curve(&adapted, &base, 0).is_err());
    }

    #[test]
    fn length_table_matches_group_by() {
        let trace = vec![
            ev("u", 0, 1.0, 2, 5),
            ev("u", 1, 0.5, 3, 5),
            ev("v", 0, 0.0, 2, 7),
        ];
        let t = mrr_by_length(&trace).unwrap();
        assert_eq!(
            t.by_prefix_length,
            vec![
                LengthBucket {
                    length: 2,
                    mrr: 0.5,
                    count: 2
                },
                LengthBucket {
                    length: 3,
                    mrr: 0.5,
                    count: 1
                },
            ]
        );
        assert_eq!(
            t.by_query_length[0],
            LengthBucket {
                length: 5,
                mrr: 0.75,
                count: 2
            }
        );
        assert!(mrr_by_length(&[]).is_err());
        let same = vec![ev("u", 0, 1.0, 2, 5), ev("u", 1, 0.2, 2, 9)];
        assert_eq!(mrr_by_length(&same).unwrap().by_prefix_length.len(), 1);
    }

    proptest! {
        #[test]
        fn length_buckets_match_brute_force(
            items in prop::collection::vec((2usize..6, 3usize..9, 0usize..4), 1..40)
        ) {
            let trace: Vec<TraceEvent> = items
                .iter()
                .enumerate()
                .map(|(i, &(p, q, r))| ev("u", i, [0.0, 0.1, 0.5, 1.0][r], p, q))
                .collect();
            let table = mrr_by_length(&trace).unwrap();
            for b in &table.by_prefix_length {
                let members: Vec<f64> = trace.iter().filter(|e| e.prefix_len == b.length).map(|e| e.rr).collect();
                prop_assert_eq!(members.len(), b.count);
                prop_assert!((mean_reciprocal_rank(&members) - b.mrr).abs() < 1e-12);
            }
            let total: usize = table.by_query_length.iter().map(|b| b.count).sum();
            prop_assert_eq!(total, trace.len());
        }
    }

    fn mpc_fixture() -> (Vec<QueryRecord>, Vec<QueryRecord>) {
        let mut train = Vec::new();
        for (q, n) in [("weather", 5), ("web mail", 3), ("wet", 2), ("zebra", 4)] {
            train.extend((0..n).map(|i| QueryRecord::new(format!("t{i}"), q, i)));
        }
        let test = vec![
            QueryRecord::new("x", "weather", 0),
            QueryRecord::new("x", "wet", 1),
            QueryRecord::new("y", "quartz", 0),
            QueryRecord::new("y", "zebra", 1),
        ];
        (train, test)
    }

    #[test]
    fn mpc_unseen_bucket_scores_zero() {
        let (train, test) = mpc_fixture();
        let ctx = EvalContext::new(&train);
        let index = build_mpc_index(&train, DEFAULT_MIN_COUNT);
        for seed in 0..20 {
            let (r, trace) = evaluate_mpc(&ctx, &index, &test, seed).unwrap();
            assert_eq!(r.mrr_unseen, 0.0);
            assert!(r.n_unseen >= 1, "quartz is never seen");
            let zebra = trace
                .iter()
                .find(|e| e.user == "y" && e.query_index == 1)
                .unwrap();
            assert_eq!(zebra.rr, 1.0);
        }
    }

    #[test]
    fn overlapping_users_are_rejected() {
        let (train, _) = mpc_fixture();
        let ctx = EvalContext::new(&train);
        let index = build_mpc_index(&train, 3);
        let bad = vec![QueryRecord::new("t0", "weather", 9)];
        assert!(matches!(
            evaluate_mpc(&ctx, &index, &bad, 0),
            Err(Error::Protocol(_))
        ));
    }

    fn micro(variant: Variant, seed: u64) -> (Parameters, UserEmbeddings, Vocabulary) {
        let vocab = Vocabulary::from_chars("abewrt ".chars()).unwrap();
        let cfg = ModelConfig {
            variant,
            embed_dim: 4,
            hidden_dim: 6,
            user_dim: 3,
            rank: 2,
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut p, u) = init_parameters(&cfg, 3, &mut rng).unwrap();
        if let Some(v) = p.bias_adaptation.as_mut() {
            v.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        if let Some(b) = p.bases.as_mut() {
            b.right.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        p.quantize();
        (p, u, vocab)
    }

    fn small_beam() -> EvalConfig {
        EvalConfig {
            beam: BeamConfig {
                beam_width: 10,
                branching: 3,
                max_completion_chars: 6,
                top_n: 10,
            },
            online: AdadeltaConfig {
                lr: 5.0,
                ..Default::default()
            },
            seed: 3,
            threads: 1,
        }
    }

    fn test_queries() -> Vec<QueryRecord> {
        let mut out = Vec::new();
        for (u, qs) in [
            ("p", ["we", "wear", "bet", "beat"]),
            ("q", ["tear", "ate", "t", "wet"]),
        ] {
            out.extend(
                qs.iter()
                    .enumerate()
                    .map(|(i, q)| QueryRecord::new(u, *q, i as i64)),
            );
        }
        out
    }

    #[test]
    fn zero_online_rate_equals_frozen_rare_embedding() {
        let (p, u, vocab) = micro(Variant::Factor, 1);
        let ctx = EvalContext::new(&[]);
        let cfg = EvalConfig {
            online: AdadeltaConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..small_beam()
        };
        let (_, trace) = evaluate_model(&ctx, &p, &u, &vocab, &test_queries(), &cfg).unwrap();
        let weights =
            adapted_recurrent_weights(&p, u.row(UserId::RARE).unwrap(), p.config.variant).unwrap();
        for e in &trace {
            let q = &test_queries()
                .into_iter()
                .filter(|r| r.user_key == e.user)
                .nth(e.query_index)
                .unwrap()
                .text;
            let s = evaluation_prefix(cfg.seed, &e.user, e.query_index, q).unwrap();
            let ranked = beam_search_with(&p, &weights, &vocab, &s.prefix, &cfg.beam).unwrap();
            let texts: Vec<&str> = ranked.iter().map(|c| c.text.as_str()).collect();
            assert_eq!(e.rr, reciprocal_rank(&texts, q));
        }
        assert_eq!(
            trace.len(),
            6,
            "queries under three characters are not scored"
        );
    }

    #[test]
    fn zeroed_adaptation_matches_unadapted_bit_for_bit() {
        let (mut p, u, vocab) = micro(Variant::Factor, 2);
        p.bias_adaptation.as_mut().unwrap().fill(0.0);
        let bases = p.bases.as_mut().unwrap();
        bases.left.fill(0.0);
        bases.right.fill(0.0);
        let mut plain = p.clone();
        plain.config.variant = Variant::Unadapted;
        plain.bias_adaptation = None;
        plain.bases = None;
        let ctx = EvalContext::new(&[]);
        let cfg = EvalConfig {
            online: AdadeltaConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..small_beam()
        };
        let a = evaluate_model(&ctx, &p, &u, &vocab, &test_queries(), &cfg).unwrap();
        let b = evaluate_model(&ctx, &plain, &u, &vocab, &test_queries(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_then_update_survives_truncation() {
        let (p, u, vocab) = micro(Variant::Factor, 4);
        let ctx = EvalContext::new(&[]);
        let cfg = small_beam();
        let full = test_queries();
        let (_, trace) = evaluate_model(&ctx, &p, &u, &vocab, &full, &cfg).unwrap();
        for cut in 1..=4 {
            let truncated: Vec<QueryRecord> =
                full.iter().filter(|r| r.timestamp < cut).cloned().collect();
            let (_, partial) = evaluate_model(&ctx, &p, &u, &vocab, &truncated, &cfg).unwrap();
            let expected: Vec<&TraceEvent> = trace
                .iter()
                .filter(|e| (e.query_index as i64) < cut)
                .collect();
            assert_eq!(partial.iter().collect::<Vec<_>>(), expected);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (p, u, vocab) = micro(Variant::Concat, 5);
        let ctx = EvalContext::new(&[]);
        let one = evaluate_model(&ctx, &p, &u, &vocab, &test_queries(), &small_beam()).unwrap();
        let two = evaluate_model(
            &ctx,
            &p,
            &u,
            &vocab,
            &test_queries(),
            &EvalConfig {
                threads: 2,
                ..small_beam()
            },
        )
        .unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn paired_prefixes_across_completers() {
        let (p, u, vocab) = micro(Variant::Factor, 6);
        let (train, _) = mpc_fixture();
        let ctx = EvalContext::new(&train);
        let index = build_mpc_index(&train, 3);
        let test = test_queries();
        let (_, lm) = evaluate_model(&ctx, &p, &u, &vocab, &test, &small_beam()).unwrap();
        let (_, mpc) = evaluate_mpc(&ctx, &index, &test, small_beam().seed).unwrap();
        let key = |e: &TraceEvent| (e.user.clone(), e.query_index, e.prefix_len);
        assert_eq!(
            lm.iter().map(key).collect::<Vec<_>>(),
            mpc.iter().map(key).collect::<Vec<_>>()
        );
    }

    #[test]
    fn case_study_ratios() {
        let (p, u, vocab) = micro(Variant::Factor, 7);
        let pool: Vec<String> = ["wear", "bet", "tab", "water", "ere"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let frozen = likelihood_ratio_case_study(
            &p,
            &u,
            &vocab,
            &["wear", "wet"],
            &pool,
            AdadeltaConfig {
                lr: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(frozen.ranked.iter().all(|(_, r)| *r == 1.0));
        assert_eq!(frozen.ranked.len(), pool.len());

        let moved = likelihood_ratio_case_study(
            &p,
            &u,
            &vocab,
            &["wear", "wear", "wear"],
            &pool,
            AdadeltaConfig {
                lr: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(moved.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(moved.ranked.iter().all(|(_, r)| *r > 0.0));
        let wear = moved.ranked.iter().find(|(q, _)| q == "wear").unwrap().1;
        assert!(wear > 1.0, "ratio {wear}");
        assert!(
            likelihood_ratio_case_study(&p, &u, &vocab, &[], &[], AdadeltaConfig::default())
                .is_err()
        );
    }
}
