use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::corpus::{TokenId, UserId};
use crate::error::{Error, Result};
use crate::model::{
    adaptation_factors, adapted_recurrent_weights, run_sequence, AdaptedWeights, EncodedQuery,
    Parameters, SequenceTrace, UserEmbeddings, Variant, GATE_BLOCKS,
};
use crate::util::mat_vec_acc;

/// Gradients shaped like [`Parameters`], plus rows of the user table that
/// appeared in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub params: Parameters,
    pub users: BTreeMap<UserId, Array1<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &Parameters) -> Result<Self> {
        Ok(Self {
            params: Parameters::zeros(&params.config)?,
            users: BTreeMap::new(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.users.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        let params: f64 = self
            .params
            .tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|v| v * v)
            .sum();
        let users: f64 = self
            .users
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        (params + users).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
        for g in self.users.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Gradients of the mean per-step NLL over `batch`, and that mean.
pub fn compute_gradients(
    params: &Parameters,
    users: &UserEmbeddings,
    batch: &[EncodedQuery],
) -> Result<(GradientSet, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus("gradient of an empty batch".into()));
    }
    let total_steps: usize = batch.iter().map(EncodedQuery::steps).sum();
    let scale = 1.0 / total_steps as f64;
    let mut grads = GradientSet::zeros_like(params)?;

    let mut by_user: BTreeMap<UserId, Vec<&EncodedQuery>> = BTreeMap::new();
    for q in batch {
        by_user.entry(q.user).or_default().push(q);
    }

    let mut total_nll = 0.0;
    for (user, queries) in by_user {
        let u = users.row(user)?;
        let weights = adapted_recurrent_weights(params, u, params.config.variant)?;
        let mut weight_grad = WeightGrad::zeros(&weights);
        for q in queries {
            check(params, &q.tokens)?;
            let trace = run_sequence(params, &weights, &q.tokens, true);
            total_nll += backward_sequence(
                params,
                &weights,
                &trace,
                &q.tokens,
                scale,
                Some(&mut grads.params),
                &mut weight_grad,
            );
        }
        let du = backward_adaptation(params, u, &weight_grad, Some(&mut grads.params))?;
        grads.users.insert(user, du);
    }
    Ok((grads, total_nll * scale))
}

/// Gradient of one query's summed NLL with respect to the user embedding only.
pub(crate) fn user_gradient(
    params: &Parameters,
    u: ArrayView1<f64>,
    tokens: &[TokenId],
) -> Result<(Array1<f64>, f64)> {
    check(params, tokens)?;
    let weights = adapted_recurrent_weights(params, u, params.config.variant)?;
    let trace = run_sequence(params, &weights, tokens, true);
    let mut weight_grad = WeightGrad::zeros(&weights);
    let nll = backward_sequence(
        params,
        &weights,
        &trace,
        tokens,
        1.0,
        None,
        &mut weight_grad,
    );
    let du = backward_adaptation(params, u, &weight_grad, None)?;
    Ok((du, nll))
}

fn check(params: &Parameters, tokens: &[TokenId]) -> Result<()> {
    if tokens.len() < 2 || tokens.iter().any(|&t| t >= params.config.vocab_size) {
        return Err(Error::Argument("malformed token sequence".into()));
    }
    Ok(())
}

/// Accumulated gradient with respect to the per-user `(W_eff, b_eff)`.
struct WeightGrad {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl WeightGrad {
    fn zeros(w: &AdaptedWeights) -> Self {
        Self {
            weights: Array2::zeros(w.weights.raw_dim()),
            bias: Array1::zeros(w.bias.len()),
        }
    }
}

/// Backpropagates `scale · NLL(tokens)` through the output layer and the
/// recurrence. Returns the unscaled NLL.
fn backward_sequence(
    params: &Parameters,
    weights: &AdaptedWeights,
    trace: &SequenceTrace,
    tokens: &[TokenId],
    scale: f64,
    mut sink: Option<&mut Parameters>,
    weight_grad: &mut WeightGrad,
) -> f64 {
    let cfg = &params.config;
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let steps = tokens.len() - 1;

    // softmax cross-entropy
    let mut dlogits = trace.logits.clone();
    let mut nll = 0.0;
    for (t, mut row) in dlogits.axis_iter_mut(Axis(0)).enumerate() {
        let target = tokens[t + 1];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        nll += z.ln() - (trace.logits[[t, target]] - max);
        row.mapv_inplace(|v| v / z * scale);
        row[target] -= scale;
    }
    if let Some(g) = sink.as_deref_mut() {
        g.output += &trace.hidden.t().dot(&dlogits);
        g.output_bias += &dlogits.sum_axis(Axis(0));
    }
    let dhidden = dlogits.dot(&params.output.t());

    let w = weights.weights.as_slice().expect("standard layout");
    let gw = weight_grad.weights.as_slice_mut().expect("standard layout");
    let gwidth = GATE_BLOCKS * h;
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dy = vec![0.0; gwidth];
    let mut da = vec![0.0; gwidth];
    let mut dz = vec![0.0; e + h];
    for t in (0..steps).rev() {
        let cache = &trace.steps[t];
        let act = &cache.act;
        for j in 0..h {
            let dh = dhidden[[t, j]] + dh_next[j];
            let (i, o, g) = (act[j], act[h + j], act[2 * h + j]);
            let tc = cache.tanh_c[j];
            let d_o = dh * tc;
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            let di = dc * (g - cache.c_prev[j]);
            let dg = dc * i;
            dc_next[j] = dc * (1.0 - i);
            dy[j] = di * i * (1.0 - i);
            dy[h + j] = d_o * o * (1.0 - o);
            dy[2 * h + j] = dg * (1.0 - g * g);
        }
        // layer norm, one block at a time
        for k in 0..GATE_BLOCKS {
            let span = k * h..(k + 1) * h;
            let norm = &cache.norm[span.clone()];
            let dyk = &dy[span.clone()];
            let gain = params.ln_gain.row(k);
            if let Some(g) = sink.as_deref_mut() {
                let mut gg = g.ln_gain.row_mut(k);
                for j in 0..h {
                    gg[j] += dyk[j] * norm[j];
                }
                let mut gb = g.ln_bias.row_mut(k);
                for j in 0..h {
                    gb[j] += dyk[j];
                }
            }
            let mut mean_dn = 0.0;
            let mut mean_dn_n = 0.0;
            for j in 0..h {
                let dn = dyk[j] * gain[j];
                mean_dn += dn;
                mean_dn_n += dn * norm[j];
            }
            mean_dn /= h as f64;
            mean_dn_n /= h as f64;
            let r = cache.rstd[k];
            for j in 0..h {
                da[k * h + j] = r * (dyk[j] * gain[j] - mean_dn - norm[j] * mean_dn_n);
            }
        }
        for (b, d) in weight_grad.bias.iter_mut().zip(&da) {
            *b += d;
        }
        for (j, &zj) in cache.z.iter().enumerate() {
            if zj == 0.0 {
                continue;
            }
            let row = &mut gw[j * gwidth..(j + 1) * gwidth];
            for (r, d) in row.iter_mut().zip(&da) {
                *r += zj * d;
            }
        }
        dz.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(w, &da, &mut dz);
        if let Some(g) = sink.as_deref_mut() {
            let mut emb = g.char_embeddings.row_mut(tokens[t]);
            for (a, b) in emb.iter_mut().zip(&dz[..e]) {
                *a += b;
            }
        }
        dh_next.copy_from_slice(&dz[e..]);
    }
    nll
}

/// Routes `(dW_eff, db_eff)` into the shared tensors (when `sink` is given)
/// and returns the gradient with respect to `u`.
fn backward_adaptation(
    params: &Parameters,
    u: ArrayView1<f64>,
    weight_grad: &WeightGrad,
    mut sink: Option<&mut Parameters>,
) -> Result<Array1<f64>> {
    let variant = params.config.variant;
    let mut du = Array1::zeros(u.len());
    if let Some(g) = sink.as_deref_mut() {
        g.recurrent += &weight_grad.weights;
        g.bias += &weight_grad.bias;
    }
    if variant == Variant::Unadapted {
        return Ok(du);
    }
    if let Some(v) = &params.bias_adaptation {
        du += &v.dot(&weight_grad.bias);
        if let Some(gv) = sink.as_deref_mut().and_then(|g| g.bias_adaptation.as_mut()) {
            for (i, mut row) in gv.axis_iter_mut(Axis(0)).enumerate() {
                row.scaled_add(u[i], &weight_grad.bias);
            }
        }
    }
    if variant == Variant::Factor {
        let bases = params
            .bases
            .as_ref()
            .ok_or_else(|| Error::Config("factor variant needs the factor bases".into()))?;
        let (left, right) = adaptation_factors(u, bases)?;
        let d_left = weight_grad.weights.dot(&right.t());
        let d_right = left.t().dot(&weight_grad.weights);
        let m = u.len();
        for i in 0..m {
            let zl = bases.left.index_axis(Axis(0), i);
            du[i] += (&zl * &d_left).sum();
            du[i] += (&bases.right.index_axis(Axis(2), i) * &d_right).sum();
        }
        if let Some(gb) = sink.and_then(|g| g.bases.as_mut()) {
            for i in 0..m {
                gb.left.index_axis_mut(Axis(0), i).scaled_add(u[i], &d_left);
                gb.right
                    .index_axis_mut(Axis(2), i)
                    .scaled_add(u[i], &d_right);
            }
        }
    }
    Ok(du)
}
