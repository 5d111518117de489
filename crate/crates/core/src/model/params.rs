use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayViewMut1};
use rand::Rng;

use super::{FloatWidth, ModelConfig, Variant, GATE_BLOCKS};
use crate::corpus::UserId;
use crate::error::{Error, Result};

/// Left and right bases of the factor adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBases {
    /// `m × (e+h) × r`
    pub left: Array3<f64>,
    /// `r × G·h × m`
    pub right: Array3<f64>,
}

/// All trainable tensors except the user embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    /// `vocab × e`
    pub char_embeddings: Array2<f64>,
    /// `(e+h) × G·h`, gate blocks ordered input, output, candidate.
    pub recurrent: Array2<f64>,
    /// `G·h`
    pub bias: Array1<f64>,
    /// `m × G·h`, present for variants that shift the bias by `u·V`.
    pub bias_adaptation: Option<Array2<f64>>,
    pub bases: Option<FactorBases>,
    /// `G × h`
    pub ln_gain: Array2<f64>,
    /// `G × h`
    pub ln_bias: Array2<f64>,
    /// `h × vocab`
    pub output: Array2<f64>,
    /// `vocab`
    pub output_bias: Array1<f64>,
}

impl Parameters {
    /// All-zero tensors (layer-norm gains included) shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (e, h, m, r, v) = (
            config.embed_dim,
            config.hidden_dim,
            config.user_dim,
            config.rank,
            config.vocab_size,
        );
        let d = config.input_width();
        let g = config.gate_width();
        Ok(Self {
            config: config.clone(),
            char_embeddings: Array2::zeros((v, e)),
            recurrent: Array2::zeros((d, g)),
            bias: Array1::zeros(g),
            bias_adaptation: config.has_bias_adaptation().then(|| Array2::zeros((m, g))),
            bases: (config.variant == Variant::Factor).then(|| FactorBases {
                left: Array3::zeros((m, d, r)),
                right: Array3::zeros((r, g, m)),
            }),
            ln_gain: Array2::zeros((GATE_BLOCKS, h)),
            ln_bias: Array2::zeros((GATE_BLOCKS, h)),
            output: Array2::zeros((h, v)),
            output_bias: Array1::zeros(v),
        })
    }

    /// Named tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        fn entry<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a ndarray::Array<f64, D>,
        ) -> (&'static str, Vec<usize>, &'a [f64]) {
            (
                name,
                a.shape().to_vec(),
                a.as_slice().expect("standard layout"),
            )
        }
        let mut out = vec![
            entry("char_embeddings", &self.char_embeddings),
            entry("recurrent_weights", &self.recurrent),
            entry("recurrent_bias", &self.bias),
        ];
        if let Some(v) = &self.bias_adaptation {
            out.push(entry("bias_adaptation", v));
        }
        if let Some(b) = &self.bases {
            out.push(entry("factor_left", &b.left));
            out.push(entry("factor_right", &b.right));
        }
        out.push(entry("ln_gain", &self.ln_gain));
        out.push(entry("ln_bias", &self.ln_bias));
        out.push(entry("output_weights", &self.output));
        out.push(entry("output_bias", &self.output_bias));
        out
    }

    /// Mutable counterpart of [`Parameters::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        fn entry<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a mut ndarray::Array<f64, D>,
        ) -> (&'static str, &'a mut [f64]) {
            (name, a.as_slice_mut().expect("standard layout"))
        }
        let mut out = vec![
            entry("char_embeddings", &mut self.char_embeddings),
            entry("recurrent_weights", &mut self.recurrent),
            entry("recurrent_bias", &mut self.bias),
        ];
        if let Some(v) = &mut self.bias_adaptation {
            out.push(entry("bias_adaptation", v));
        }
        if let Some(b) = &mut self.bases {
            out.push(entry("factor_left", &mut b.left));
            out.push(entry("factor_right", &mut b.right));
        }
        out.push(entry("ln_gain", &mut self.ln_gain));
        out.push(entry("ln_bias", &mut self.ln_bias));
        out.push(entry("output_weights", &mut self.output));
        out.push(entry("output_bias", &mut self.output_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Re-rounds every value to the configured storage width.
    pub fn quantize(&mut self) {
        let width = self.config.float_width;
        if width == FloatWidth::F64 {
            return;
        }
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = width.round(*v));
        }
    }
}

/// The `k × m` user embedding table; row 0 holds the shared rare user (id 1).
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbeddings {
    pub table: Array2<f64>,
}

impl UserEmbeddings {
    pub fn zeros(k: usize, m: usize) -> Self {
        Self {
            table: Array2::zeros((k, m)),
        }
    }

    pub fn len(&self) -> usize {
        self.table.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn contains(&self, user: UserId) -> bool {
        user.0 >= 1 && user.row() < self.len()
    }

    pub fn row(&self, user: UserId) -> Result<ArrayView1<'_, f64>> {
        if !self.contains(user) {
            return Err(Error::UnknownUser(user));
        }
        Ok(self.table.row(user.row()))
    }

    pub fn row_mut(&mut self, user: UserId) -> Result<ArrayViewMut1<'_, f64>> {
        if !self.contains(user) {
            return Err(Error::UnknownUser(user));
        }
        Ok(self.table.row_mut(user.row()))
    }

    /// Appends a row and returns its id.
    pub fn push(&mut self, row: ArrayView1<f64>) -> Result<UserId> {
        self.table
            .push_row(row)
            .map_err(|e| Error::Dimension(format!("user row: {e}")))?;
        Ok(UserId::from_row(self.len() - 1))
    }
}

/// Draws initial parameters and a `k`-row user table.
///
/// Dense weights are uniform in `±1/√fan_in`; biases, `V` and the right factor
/// bases start at zero so that every variant initially computes the same
/// function. User embeddings and the left bases are drawn at random: the
/// adaptation is bilinear in `(u, Z_L, Z_R)`, and an all-zero start would
/// leave every one of their gradients at zero forever.
pub fn init_parameters<R: Rng + ?Sized>(
    config: &ModelConfig,
    user_count: usize,
    rng: &mut R,
) -> Result<(Parameters, UserEmbeddings)> {
    if user_count == 0 {
        return Err(Error::Config("user table needs the rare-user row".into()));
    }
    let mut params = Parameters::zeros(config)?;
    let (e, h, m) = (config.embed_dim, config.hidden_dim, config.user_dim);
    let d = config.input_width();

    fill_uniform(params.char_embeddings.as_slice_mut().unwrap(), e, rng);
    fill_uniform(params.recurrent.as_slice_mut().unwrap(), d, rng);
    fill_uniform(params.output.as_slice_mut().unwrap(), h, rng);
    params.ln_gain.fill(1.0);
    if let Some(bases) = &mut params.bases {
        fill_uniform(bases.left.as_slice_mut().unwrap(), d, rng);
    }
    params.quantize();

    let mut users = UserEmbeddings::zeros(user_count, m);
    fill_uniform(users.table.as_slice_mut().unwrap(), m, rng);
    let width = config.float_width;
    users.table.mapv_inplace(|v| width.round(v));
    Ok((params, users))
}

fn fill_uniform<R: Rng + ?Sized>(values: &mut [f64], fan_in: usize, rng: &mut R) {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in values {
        *v = rng.gen_range(-scale..scale);
    }
}
