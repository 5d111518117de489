use approx::assert_abs_diff_eq;
use ndarray::{arr1, Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cell::{cell_forward, StepCache};
use super::*;
use crate::corpus::{UserId, START, STOP};

fn micro_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        embed_dim: 3,
        hidden_dim: 4,
        user_dim: 2,
        rank: 2,
        vocab_size: 6,
        ln_epsilon: 1e-5,
        float_width: FloatWidth::F64,
        factor_bias_adaptation: true,
    }
}

/// Random values in every tensor, including the ones init leaves at zero.
fn randomized(config: &ModelConfig, users: usize, seed: u64) -> (Parameters, UserEmbeddings) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::zeros(config).unwrap();
    for (_, t) in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
    }
    let mut table = UserEmbeddings::zeros(users, config.user_dim);
    table.table.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    (params, table)
}

fn naive_adaptation(u: &[f64], left: &Array3<f64>, right: &Array3<f64>) -> Array2<f64> {
    let (m, d, r) = left.dim();
    let g = right.dim().1;
    let mut a = Array2::zeros((d, g));
    for j in 0..d {
        for n in 0..g {
            let mut s = 0.0;
            for rho in 0..r {
                let mut l = 0.0;
                for i in 0..m {
                    l += u[i] * left[[i, j, rho]];
                }
                let mut rr = 0.0;
                for i in 0..m {
                    rr += right[[rho, n, i]] * u[i];
                }
                s += l * rr;
            }
            a[[j, n]] = s;
        }
    }
    a
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line reference forward pass with an explicit dense per-user matrix.
fn reference_logits(params: &Parameters, u: &[f64], tokens: &[usize]) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let (e, h, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
    let mut w = params.recurrent.clone();
    let mut b = params.bias.clone();
    if cfg.variant == Variant::Factor {
        let bases = params.bases.as_ref().unwrap();
        w = w + naive_adaptation(u, &bases.left, &bases.right);
    }
    if cfg.variant != Variant::Unadapted {
        if let Some(vm) = &params.bias_adaptation {
            for n in 0..3 * h {
                for i in 0..u.len() {
                    b[n] += u[i] * vm[[i, n]];
                }
            }
        }
    }
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut out = Vec::new();
    for &tok in &tokens[..tokens.len() - 1] {
        let mut z: Vec<f64> = params.char_embeddings.row(tok).to_vec();
        z.extend(&hs);
        let mut pre = vec![0.0; 3 * h];
        for n in 0..3 * h {
            pre[n] = b[n] + (0..e + h).map(|j| z[j] * w[[j, n]]).sum::<f64>();
        }
        let mut act = vec![0.0; 3 * h];
        for k in 0..3 {
            let blk = &pre[k * h..(k + 1) * h];
            let mean = blk.iter().sum::<f64>() / h as f64;
            let var = blk.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / h as f64;
            for j in 0..h {
                let y = params.ln_gain[[k, j]] * (blk[j] - mean) / (var + cfg.ln_epsilon).sqrt()
                    + params.ln_bias[[k, j]];
                act[k * h + j] = if k == 2 { y.tanh() } else { sig(y) };
            }
        }
        for j in 0..h {
            let (i, o, g) = (act[j], act[h + j], act[2 * h + j]);
            cs[j] = (1.0 - i) * cs[j] + i * g;
            hs[j] = o * cs[j].tanh();
        }
        let logits: Vec<f64> = (0..v)
            .map(|c| {
                params.output_bias[c] + (0..h).map(|j| hs[j] * params.output[[j, c]]).sum::<f64>()
            })
            .collect();
        out.push(logits);
    }
    out
}

#[test]
fn init_zeroes_adaptation_and_is_deterministic() {
    let cfg = micro_config(Variant::Factor);
    let (p1, u1) = init_parameters(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (p2, u2) = init_parameters(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(u1, u2);
    let bases = p1.bases.as_ref().unwrap();
    assert!(bases.right.iter().all(|&v| v == 0.0));
    assert!(p1.bias.iter().all(|&v| v == 0.0));
    assert!(p1
        .bias_adaptation
        .as_ref()
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
    assert!(p1.ln_gain.iter().all(|&v| v == 1.0));
    for row in u1.table.rows() {
        let a = compute_adaptation(row, bases).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }
    // freshly initialized factor model computes the unadapted function
    let mut unadapted = p1.clone();
    unadapted.config.variant = Variant::Unadapted;
    let tokens = [START, 3, 4, 5, STOP];
    let a = forward_logits(&p1, &u1, UserId(2), &tokens).unwrap();
    let b = forward_logits(&unadapted, &u1, UserId(2), &tokens).unwrap();
    assert_eq!(a, b);
}

#[test]
fn init_rejects_bad_config() {
    let mut cfg = micro_config(Variant::Factor);
    cfg.hidden_dim = 0;
    assert!(matches!(
        init_parameters(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(crate::Error::Config(_))
    ));
    let mut cfg = micro_config(Variant::Factor);
    cfg.ln_epsilon = 0.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn f32_storage_rounds_values() {
    let mut cfg = micro_config(Variant::Factor);
    cfg.float_width = FloatWidth::F32;
    let (p, u) = init_parameters(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for (_, _, t) in p.tensors() {
        assert!(t.iter().all(|&v| v as f32 as f64 == v));
    }
    assert!(u.table.iter().all(|&v| v as f32 as f64 == v));
}

#[test]
fn adaptation_examples() {
    let bases = FactorBases {
        left: Array3::from_shape_vec((1, 2, 1), vec![1.0, 0.0]).unwrap(),
        right: Array3::from_shape_vec((1, 1, 1), vec![3.0]).unwrap(),
    };
    let a = compute_adaptation(arr1(&[2.0]).view(), &bases).unwrap();
    assert_eq!(a, naive_adaptation(&[2.0], &bases.left, &bases.right));
    assert_eq!(a, ndarray::arr2(&[[12.0], [0.0]]));

    let (p, _) = randomized(&micro_config(Variant::Factor), 1, 3);
    let bases = p.bases.unwrap();
    let zero = compute_adaptation(Array1::zeros(2).view(), &bases).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    let mut no_left = bases.clone();
    no_left.left.fill(0.0);
    let zero = compute_adaptation(arr1(&[0.3, -2.0]).view(), &no_left).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    assert!(matches!(
        compute_adaptation(arr1(&[1.0, 2.0, 3.0]).view(), &bases),
        Err(crate::Error::Dimension(_))
    ));
}

#[test]
fn adaptation_matches_naive_sum() {
    let (p, _) = randomized(&micro_config(Variant::Factor), 1, 11);
    let bases = p.bases.unwrap();
    let u = [0.7, -1.3];
    let fast = compute_adaptation(arr1(&u).view(), &bases).unwrap();
    let slow = naive_adaptation(&u, &bases.left, &bases.right);
    for (a, b) in fast.iter().zip(slow.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn adapted_weights_reduce() {
    let cfg = micro_config(Variant::Factor);
    let (mut p, _) = randomized(&cfg, 1, 4);
    let u = arr1(&[0.5, -0.25]);
    {
        let bases = p.bases.as_mut().unwrap();
        bases.left.fill(0.0);
        bases.right.fill(0.0);
    }
    p.bias_adaptation.as_mut().unwrap().fill(0.0);
    let w = adapted_recurrent_weights(&p, u.view(), Variant::Factor).unwrap();
    assert_eq!(w.weights, p.recurrent);
    assert_eq!(w.bias, p.bias);

    let (p, _) = randomized(&micro_config(Variant::Concat), 1, 4);
    let w = adapted_recurrent_weights(&p, Array1::zeros(2).view(), Variant::Concat).unwrap();
    assert_eq!(w.weights, p.recurrent);
    assert_eq!(w.bias, p.bias);

    // unadapted parameters carry no adaptation tensors
    let (p, _) = randomized(&micro_config(Variant::Unadapted), 1, 4);
    assert!(matches!(
        adapted_recurrent_weights(&p, u.view(), Variant::Factor),
        Err(crate::Error::Config(_))
    ));
    assert!(matches!(
        adapted_recurrent_weights(&p, u.view(), Variant::Concat),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn adaptation_is_low_rank() {
    // e + h = 6, G·h = 6 would need h = 2, e = 4
    let cfg = ModelConfig {
        embed_dim: 4,
        hidden_dim: 2,
        user_dim: 3,
        rank: 2,
        ..micro_config(Variant::Factor)
    };
    for seed in 0..5 {
        let (p, users) = randomized(&cfg, 1, 100 + seed);
        let w = adapted_recurrent_weights(&p, users.table.row(0), Variant::Factor).unwrap();
        let diff = &w.weights - &p.recurrent;
        let m = nalgebra::DMatrix::from_row_slice(6, 6, diff.as_slice().unwrap());
        let sv = m.singular_values();
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sorted[2..].iter().all(|&s| s < 1e-10), "{sorted:?}");
        assert!(sorted[1] > 1e-6);
    }
}

#[test]
fn lstm_step_zero_network() {
    let cfg = micro_config(Variant::Unadapted);
    let p = Parameters::zeros(&cfg).unwrap();
    let w = AdaptedWeights {
        weights: p.recurrent.clone(),
        bias: p.bias.clone(),
    };
    let (state, h) = lstm_step(
        &LstmState::zeros(4),
        Array1::zeros(3).view(),
        &w,
        LayerNormParams::of(&p),
    )
    .unwrap();
    assert!(h.iter().all(|&v| v == 0.0));
    assert!(state.cell.iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_step_scalar_closed_form() {
    // with one hidden unit each gate block is a single value, so layer norm
    // maps it to its bias: i = σ(β_i), o = σ(β_o), g = tanh(β_g)
    let cfg = ModelConfig {
        embed_dim: 1,
        hidden_dim: 1,
        ..micro_config(Variant::Unadapted)
    };
    let mut p = Parameters::zeros(&cfg).unwrap();
    p.ln_gain.fill(1.3);
    p.ln_bias.assign(&ndarray::arr2(&[[0.4], [-0.2], [0.9]]));
    p.recurrent.fill(0.7);
    let w = AdaptedWeights {
        weights: p.recurrent.clone(),
        bias: p.bias.clone(),
    };
    let state = LstmState {
        hidden: arr1(&[0.1]),
        cell: arr1(&[-0.5]),
    };
    let (next, h) = lstm_step(&state, arr1(&[2.0]).view(), &w, LayerNormParams::of(&p)).unwrap();
    let (i, o, g) = (sig(0.4), sig(-0.2), 0.9f64.tanh());
    let c = (1.0 - i) * -0.5 + i * g;
    assert_abs_diff_eq!(next.cell[0], c, epsilon = 1e-15);
    assert_abs_diff_eq!(h[0], o * c.tanh(), epsilon = 1e-15);
}

#[test]
fn lstm_step_matches_reference_cell() {
    let cfg = micro_config(Variant::Unadapted);
    let (p, _) = randomized(&cfg, 1, 21);
    // a two-step reference run covers a non-zero previous state
    let tokens = [START, 4, STOP];
    let reference = reference_logits(&p, &[], &tokens);
    let logits = forward_logits_with(
        &p,
        &AdaptedWeights {
            weights: p.recurrent.clone(),
            bias: p.bias.clone(),
        },
        &tokens,
    )
    .unwrap();
    for (t, row) in reference.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert_abs_diff_eq!(logits[[t, c]], *v, epsilon = 1e-12);
        }
    }
}

#[test]
fn lstm_step_full_overwrite() {
    let cfg = micro_config(Variant::Unadapted);
    let (mut p, _) = randomized(&cfg, 1, 8);
    p.ln_gain.row_mut(0).fill(0.0);
    p.ln_bias.row_mut(0).fill(60.0);
    let w = AdaptedWeights {
        weights: p.recurrent.clone(),
        bias: p.bias.clone(),
    };
    let state = LstmState {
        hidden: arr1(&[0.2, -0.1, 0.3, 0.0]),
        cell: arr1(&[5.0, -3.0, 2.0, 7.0]),
    };
    let x = arr1(&[0.1, 0.2, 0.3]);
    let (next, _) = lstm_step(&state, x.view(), &w, LayerNormParams::of(&p)).unwrap();
    // recompute g independently: the candidate block is the third one
    let mut z = x.to_vec();
    z.extend(state.hidden.iter());
    let pre: Vec<f64> = (8..12)
        .map(|n| (0..7).map(|j| z[j] * p.recurrent[[j, n]]).sum::<f64>() + p.bias[n])
        .collect();
    let mean = pre.iter().sum::<f64>() / 4.0;
    let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    for (j, v) in pre.iter().enumerate() {
        let g = (p.ln_gain[[2, j]] * (v - mean) / (var + 1e-5).sqrt() + p.ln_bias[[2, j]]).tanh();
        assert_abs_diff_eq!(next.cell[j], g, epsilon = 1e-12);
    }
}

#[test]
fn lstm_step_rejects_non_finite() {
    let cfg = micro_config(Variant::Unadapted);
    let p = Parameters::zeros(&cfg).unwrap();
    let w = AdaptedWeights {
        weights: p.recurrent.clone(),
        bias: p.bias.clone(),
    };
    let res = lstm_step(
        &LstmState::zeros(4),
        arr1(&[f64::NAN, 0.0, 0.0]).view(),
        &w,
        LayerNormParams::of(&p),
    );
    assert!(matches!(res, Err(crate::Error::Numeric(_))));
}

#[test]
fn forward_shapes_and_zero_network() {
    let cfg = ModelConfig {
        vocab_size: 79,
        ..micro_config(Variant::Factor)
    };
    let p = Parameters::zeros(&cfg).unwrap();
    let users = UserEmbeddings::zeros(1, 2);
    let logits = forward_logits(&p, &users, UserId::RARE, &[START, 3, 4, STOP]).unwrap();
    assert_eq!(logits.dim(), (3, 79));
    assert!(logits.iter().all(|&v| v == 0.0));

    let nll = sequence_nll(&p, &users, UserId::RARE, &[START, 3, 4, 5, 6, 7, STOP]).unwrap();
    assert_abs_diff_eq!(nll, 6.0 * 79f64.ln(), epsilon = 1e-12);

    let q = EncodedQuery {
        user: UserId::RARE,
        tokens: vec![START, 3, 4, STOP],
    };
    let ppl = perplexity(&p, &users, &[q]).unwrap();
    assert_abs_diff_eq!(ppl, 79.0, epsilon = 1e-9);

    assert!(matches!(
        forward_logits(&p, &users, UserId(2), &[START, STOP]),
        Err(crate::Error::UnknownUser(UserId(2)))
    ));
    assert!(forward_logits(&p, &users, UserId::RARE, &[3, 4, STOP]).is_err());
    assert!(perplexity(&p, &users, &[]).is_err());
}

#[test]
fn nll_with_fixed_logits() {
    // 4 symbols: START, STOP, UNK, 'a'; only the output bias is non-zero
    let cfg = ModelConfig {
        vocab_size: 4,
        ..micro_config(Variant::Unadapted)
    };
    let mut p = Parameters::zeros(&cfg).unwrap();
    p.output_bias.assign(&arr1(&[0.0, 1.0, -1.0, 2.0]));
    let users = UserEmbeddings::zeros(1, 2);
    let nll = sequence_nll(&p, &users, UserId::RARE, &[START, 3, STOP]).unwrap();
    let z = 1.0 + 1f64.exp() + (-1f64).exp() + 2f64.exp();
    let expected = -(2f64.exp() / z).ln() - (1f64.exp() / z).ln();
    assert_abs_diff_eq!(nll, expected, epsilon = 1e-12);
}

#[test]
fn perplexity_matches_probability_product() {
    let cfg = micro_config(Variant::Factor);
    let (p, users) = randomized(&cfg, 2, 31);
    let data = vec![
        EncodedQuery {
            user: UserId(1),
            tokens: vec![START, 3, 4, STOP],
        },
        EncodedQuery {
            user: UserId(2),
            tokens: vec![START, 5, STOP],
        },
        EncodedQuery {
            user: UserId(2),
            tokens: vec![START, 5, 5, 3, STOP],
        },
    ];
    let mut log_prob = 0.0;
    let mut steps = 0;
    for q in &data {
        let u = users.table.row(q.user.row()).to_vec();
        for (t, row) in reference_logits(&p, &u, &q.tokens).iter().enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            log_prob += (row[q.tokens[t + 1]].exp() / z).ln();
            steps += 1;
        }
    }
    let expected = (-log_prob / steps as f64).exp();
    assert_abs_diff_eq!(
        perplexity(&p, &users, &data).unwrap(),
        expected,
        epsilon = 1e-9
    );

    let twice: Vec<_> = data.iter().chain(data.iter()).cloned().collect();
    assert_abs_diff_eq!(
        perplexity(&p, &users, &twice).unwrap(),
        perplexity(&p, &users, &data).unwrap(),
        epsilon = 1e-12
    );
}

#[test]
fn per_user_logits_differ_and_match_dense_oracle() {
    let cfg = micro_config(Variant::Factor);
    let (p, users) = randomized(&cfg, 2, 41);
    let tokens = [START, 3, 5, 4, STOP];
    let a = forward_logits(&p, &users, UserId(1), &tokens).unwrap();
    let b = forward_logits(&p, &users, UserId(2), &tokens).unwrap();
    assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    for (user, logits) in [(0, &a), (1, &b)] {
        let reference = reference_logits(&p, &users.table.row(user).to_vec(), &tokens);
        for (t, row) in reference.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_abs_diff_eq!(logits[[t, c]], *v, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn weights_computed_once_per_forward_pass() {
    let cfg = micro_config(Variant::Factor);
    let (p, users) = randomized(&cfg, 1, 2);
    let before = adaptation_count();
    forward_logits(&p, &users, UserId::RARE, &[START, 3, 3, 3, 3, 3, 3, STOP]).unwrap();
    assert_eq!(adaptation_count() - before, 1);
}

#[test]
fn bilinear_in_user_embedding() {
    let (p, _) = randomized(&micro_config(Variant::Factor), 1, 12);
    let bases = p.bases.unwrap();
    let u = arr1(&[0.4, -0.9]);
    let alpha = -1.7;
    let a1 = compute_adaptation(u.view(), &bases).unwrap();
    let a2 = compute_adaptation((&u * alpha).view(), &bases).unwrap();
    for (x, y) in a1.iter().zip(a2.iter()) {
        assert_abs_diff_eq!(x * alpha * alpha, *y, epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reduction_identities(seed in any::<u64>(), len in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = vec![START];
        tokens.extend((0..len).map(|_| rng.gen_range(2..6)));
        tokens.push(STOP);

        let (mut factor, users) = randomized(&micro_config(Variant::Factor), 1, seed);
        {
            let b = factor.bases.as_mut().unwrap();
            b.left.fill(0.0);
            b.right.fill(0.0);
        }
        factor.bias_adaptation.as_mut().unwrap().fill(0.0);
        let mut concat = factor.clone();
        concat.config.variant = Variant::Concat;
        concat.bases = None;
        let mut plain = factor.clone();
        plain.config.variant = Variant::Unadapted;
        plain.bases = None;
        plain.bias_adaptation = None;

        let base = forward_logits(&plain, &users, UserId::RARE, &tokens).unwrap();
        for model in [&factor, &concat] {
            let l = forward_logits(model, &users, UserId::RARE, &tokens).unwrap();
            for (x, y) in l.iter().zip(base.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_and_gate_ranges(seed in any::<u64>()) {
        let (p, users) = randomized(&micro_config(Variant::Factor), 1, seed);
        let logits = forward_logits(&p, &users, UserId::RARE, &[START, 3, 4, 5, STOP]).unwrap();
        for row in logits.rows() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
        let weights = adapted_recurrent_weights(&p, users.table.row(0), Variant::Factor).unwrap();
        let mut cache = StepCache::default();
        let z: Vec<f64> = (0..7).map(|j| j as f64 * 0.3 - 1.0).collect();
        let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
        cell_forward(&z, &[0.5, -0.5, 1.0, 2.0], &weights, LayerNormParams::of(&p), &mut h, &mut c, Some(&mut cache));
        for (n, a) in cache.act.iter().enumerate() {
            if n < 8 { prop_assert!(*a > 0.0 && *a < 1.0); } else { prop_assert!(a.abs() < 1.0); }
        }
        prop_assert!(cache.tanh_c.iter().all(|v| v.abs() < 1.0));
    }
}
