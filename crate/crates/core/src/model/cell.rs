use std::cell::Cell;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::{FactorBases, Parameters, Variant};
use crate::error::{Error, Result};
use crate::util::{sigmoid, vec_mat_acc};

/// Gate blocks per hidden unit: input, output, candidate. The forget gate is
/// coupled to the input gate as `1 − i`.
pub const GATE_BLOCKS: usize = 3;

thread_local! {
    static ADAPTATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of adapted-weight computations performed on the current thread.
pub fn adaptation_count() -> u64 {
    ADAPTATIONS.with(Cell::get)
}

/// Recurrent weights and bias as seen by one user.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedWeights {
    /// `(e+h) × G·h`
    pub weights: Array2<f64>,
    /// `G·h`
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams<'a> {
    pub gain: ArrayView2<'a, f64>,
    pub bias: ArrayView2<'a, f64>,
    pub epsilon: f64,
}

impl<'a> LayerNormParams<'a> {
    pub fn of(params: &'a Parameters) -> Self {
        Self {
            gain: params.ln_gain.view(),
            bias: params.ln_bias.view(),
            epsilon: params.config.ln_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Array1<f64>,
    pub cell: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            hidden: Array1::zeros(hidden_dim),
            cell: Array1::zeros(hidden_dim),
        }
    }
}

/// Left factor `L = u ×₁ Z_L` (`(e+h) × r`) and right factor `R = Z_R ×₃ u` (`r × G·h`).
pub fn adaptation_factors(
    u: ArrayView1<f64>,
    bases: &FactorBases,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (m, d, r) = bases.left.dim();
    let (r2, g, m2) = bases.right.dim();
    if u.len() != m || m2 != m || r2 != r {
        return Err(Error::Dimension(format!(
            "u has {} entries, Z_L is {m}×{d}×{r}, Z_R is {r2}×{g}×{m2}",
            u.len()
        )));
    }
    let left_flat = bases
        .left
        .view()
        .into_shape_with_order((m, d * r))
        .expect("standard layout");
    let left = u
        .dot(&left_flat)
        .into_shape_with_order((d, r))
        .expect("contiguous");
    let right_flat = bases
        .right
        .view()
        .into_shape_with_order((r * g, m))
        .expect("standard layout");
    let right = right_flat
        .dot(&u)
        .into_shape_with_order((r, g))
        .expect("contiguous");
    Ok((left, right))
}

/// The low-rank adaptation matrix `A = (u ×₁ Z_L)(Z_R ×₃ u)`.
pub fn compute_adaptation(u: ArrayView1<f64>, bases: &FactorBases) -> Result<Array2<f64>> {
    let (left, right) = adaptation_factors(u, bases)?;
    Ok(left.dot(&right))
}

/// `(W_eff, b_eff)` for the requested variant and user embedding.
pub fn adapted_recurrent_weights(
    params: &Parameters,
    u: ArrayView1<f64>,
    variant: Variant,
) -> Result<AdaptedWeights> {
    ADAPTATIONS.with(|c| c.set(c.get() + 1));
    let bias_shift = |bias: &Array1<f64>, required: bool| -> Result<Array1<f64>> {
        match &params.bias_adaptation {
            Some(v) => {
                if v.nrows() != u.len() {
                    return Err(Error::Dimension(format!(
                        "u has {} entries, V has {} rows",
                        u.len(),
                        v.nrows()
                    )));
                }
                Ok(bias + &u.dot(v))
            }
            None if required => Err(Error::Config(format!(
                "variant {} needs the bias-adaptation matrix",
                variant.name()
            ))),
            None => Ok(bias.clone()),
        }
    };
    match variant {
        Variant::Unadapted => Ok(AdaptedWeights {
            weights: params.recurrent.clone(),
            bias: params.bias.clone(),
        }),
        Variant::Concat => Ok(AdaptedWeights {
            weights: params.recurrent.clone(),
            bias: bias_shift(&params.bias, true)?,
        }),
        Variant::Factor => {
            let bases = params.bases.as_ref().ok_or_else(|| {
                Error::Config("factor variant needs the factor bases".to_string())
            })?;
            let adaptation = compute_adaptation(u, bases)?;
            Ok(AdaptedWeights {
                weights: &params.recurrent + &adaptation,
                bias: bias_shift(&params.bias, false)?,
            })
        }
    }
}

/// Intermediate values of one cell step kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub(crate) struct StepCache {
    /// `[x, h_prev]`
    pub z: Vec<f64>,
    /// Layer-normalized pre-activations, `G·h`.
    pub norm: Vec<f64>,
    pub rstd: [f64; GATE_BLOCKS],
    /// Gate activations `[i, o, g]`, `G·h`.
    pub act: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// One cell step from the concatenated input `z = [x, h_prev]`.
pub(crate) fn cell_forward(
    z: &[f64],
    c_prev: &[f64],
    weights: &AdaptedWeights,
    ln: LayerNormParams,
    h_out: &mut [f64],
    c_out: &mut [f64],
    cache: Option<&mut StepCache>,
) {
    let mut pre = weights.bias.to_vec();
    vec_mat_acc(
        z,
        weights.weights.as_slice().expect("standard layout"),
        &mut pre,
    );
    match cache {
        Some(cache) => {
            cache.z.clear();
            cache.z.extend_from_slice(z);
            gates(&mut pre, c_prev, ln, h_out, c_out, Some(cache));
        }
        None => gates(&mut pre, c_prev, ln, h_out, c_out, None),
    }
}

/// Layer norm, gate nonlinearities and the coupled cell update, given the
/// `G·h` pre-activations. `pre` is overwritten with scratch values.
pub(crate) fn gates(
    pre: &mut [f64],
    c_prev: &[f64],
    ln: LayerNormParams,
    h_out: &mut [f64],
    c_out: &mut [f64],
    cache: Option<&mut StepCache>,
) {
    let h = c_prev.len();
    let mut rstd = [0.0; GATE_BLOCKS];
    for (k, block) in pre.chunks_mut(h).enumerate() {
        let mean = block.iter().sum::<f64>() / h as f64;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let r = 1.0 / (var + ln.epsilon).sqrt();
        rstd[k] = r;
        for v in block.iter_mut() {
            *v = (*v - mean) * r;
        }
    }
    let mut act = vec![0.0; GATE_BLOCKS * h];
    for k in 0..GATE_BLOCKS {
        let gain = ln.gain.row(k);
        let bias = ln.bias.row(k);
        for j in 0..h {
            let y = gain[j] * pre[k * h + j] + bias[j];
            act[k * h + j] = if k == 2 { y.tanh() } else { sigmoid(y) };
        }
    }
    let mut tanh_c = vec![0.0; h];
    for j in 0..h {
        let (i, o, g) = (act[j], act[h + j], act[2 * h + j]);
        let c = (1.0 - i) * c_prev[j] + i * g;
        c_out[j] = c;
        tanh_c[j] = c.tanh();
        h_out[j] = o * tanh_c[j];
    }
    if let Some(cache) = cache {
        cache.norm.clear();
        cache.norm.extend_from_slice(pre);
        cache.rstd = rstd;
        cache.act = act;
        cache.c_prev.clear();
        cache.c_prev.extend_from_slice(c_prev);
        cache.tanh_c = tanh_c;
    }
}

/// One coupled-gate LSTM step on character embedding `x`.
pub fn lstm_step(
    state: &LstmState,
    x: ArrayView1<f64>,
    weights: &AdaptedWeights,
    ln: LayerNormParams,
) -> Result<(LstmState, Array1<f64>)> {
    let h = state.hidden.len();
    let d = x.len() + h;
    if weights.weights.dim() != (d, GATE_BLOCKS * h)
        || weights.bias.len() != GATE_BLOCKS * h
        || state.cell.len() != h
        || ln.gain.dim() != (GATE_BLOCKS, h)
        || ln.bias.dim() != (GATE_BLOCKS, h)
    {
        return Err(Error::Dimension(format!(
            "lstm step with x of {} and state of {h} against weights {:?}",
            x.len(),
            weights.weights.dim()
        )));
    }
    let finite = |a: ArrayView1<f64>| a.iter().all(|v| v.is_finite());
    if !finite(x) || !finite(state.hidden.view()) || !finite(state.cell.view()) {
        return Err(Error::Numeric("non-finite lstm input".into()));
    }
    let mut z = Vec::with_capacity(d);
    z.extend(x.iter());
    z.extend(state.hidden.iter());
    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    cell_forward(
        &z,
        state.cell.as_slice().expect("contiguous"),
        weights,
        ln,
        &mut hidden,
        &mut cell,
        None,
    );
    let hidden = Array1::from(hidden);
    Ok((
        LstmState {
            hidden: hidden.clone(),
            cell: Array1::from(cell),
        },
        hidden,
    ))
}
