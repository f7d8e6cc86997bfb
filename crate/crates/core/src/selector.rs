//! Sparse feature encoder of one component model.
//!
//! The encoder embeds the `V` input variates of every context step into the
//! forecaster's hidden width `D` with `x = W s + b`. Column `w` of `W` is the only
//! path through which variate `w` reaches the forecaster, so a column that is
//! exactly zero means the component ignores that variate's history entirely.
//!
//! Compression pressure is distributed over columns by reduction coefficients
//! `alpha = softmax(beta)`. They are trained on the reduction loss
//! `lambda * ln(sum_w alpha_w * ||W_w||)` with the column norms held constant, and
//! then used as per-column thresholds by the proximal (block soft-thresholding) step.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor used in place of the weighted column-norm sum when every column is zero.
pub const REDUCTION_EPS: f64 = 1e-12;

/// Whether one projection is shared by every context step or each lag has its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LagMode {
    #[default]
    Shared,
    PerLag,
}

impl LagMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LagMode::Shared => "shared",
            LagMode::PerLag => "per-lag",
        }
    }
}

impl std::str::FromStr for LagMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(LagMode::Shared),
            "per-lag" | "per_lag" => Ok(LagMode::PerLag),
            other => Err(Error::Config(format!("unknown lag mode {other:?}"))),
        }
    }
}

/// Projection weights, bias and reduction logits of one component.
///
/// `w` has shape `L x D x V` where `L = 1` in shared mode. Slot `l` of a per-lag
/// selector holds the projection for lag `l + 1` (slot 0 is the newest step).
/// `beta` has shape `L x V`; `alpha` is a single softmax over all `L * V` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub w: Array3<f64>,
    pub b: Array1<f64>,
    pub beta: Array2<f64>,
    pub lag_mode: LagMode,
}

/// Gradients of the prediction loss with respect to `w` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorGrads {
    pub w: Array3<f64>,
    pub b: Array1<f64>,
}

/// Value and closed-form `beta` gradient of the reduction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionLoss {
    pub value: f64,
    pub grad_beta: Array2<f64>,
    /// Set when every column is zero and the value is `lambda * ln(1e-12)`.
    pub degenerate: bool,
}

impl SelectorParams {
    /// He-style uniform initialization `U(-sqrt(1/V), sqrt(1/V))` for `W` and `b`,
    /// `beta = 0` so that `alpha` starts uniform. `lags` is ignored in shared mode.
    pub fn init<R: Rng + ?Sized>(
        variates: usize,
        hidden: usize,
        lag_mode: LagMode,
        lags: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if variates < 2 {
            return Err(Error::Shape(format!("selector needs V >= 2, got {variates}")));
        }
        if hidden == 0 {
            return Err(Error::Shape("selector needs D >= 1".into()));
        }
        let slots = match lag_mode {
            LagMode::Shared => 1,
            LagMode::PerLag if lags == 0 => {
                return Err(Error::Shape("per-lag selector needs L >= 1".into()))
            }
            LagMode::PerLag => lags,
        };
        let bound = (1.0 / variates as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Array3::from_shape_simple_fn((slots, hidden, variates), || rng.sample(dist));
        let b = Array1::from_shape_simple_fn(hidden, || rng.sample(dist));
        Ok(Self {
            w,
            b,
            beta: Array2::zeros((slots, variates)),
            lag_mode,
        })
    }

    pub fn num_variates(&self) -> usize {
        self.w.len_of(Axis(2))
    }

    pub fn hidden(&self) -> usize {
        self.w.len_of(Axis(1))
    }

    /// Number of projection slots `L` (1 in shared mode).
    pub fn num_slots(&self) -> usize {
        self.w.len_of(Axis(0))
    }

    /// Projection slot used for context index `c` (0 = oldest) of a length-`context` window.
    pub fn slot_for(&self, c: usize, context: usize) -> usize {
        match self.lag_mode {
            LagMode::Shared => 0,
            LagMode::PerLag => context - 1 - c,
        }
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if self.lag_mode == LagMode::PerLag && self.num_slots() != context {
            return Err(Error::Shape(format!(
                "per-lag selector has {} slots but the context has {context} steps",
                self.num_slots()
            )));
        }
        Ok(())
    }

    /// `alpha = softmax(beta)` over all `L * V` entries.
    pub fn alpha(&self) -> Array2<f64> {
        let max = self.beta.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut a = self.beta.mapv(|x| (x - max).exp());
        let z = a.sum();
        a /= z;
        a
    }

    /// Euclidean norm of every input column, shape `L x V`.
    pub fn column_norms(&self) -> Array2<f64> {
        let (slots, _, v) = self.w.dim();
        Array2::from_shape_fn((slots, v), |(l, w)| column_norm(self.w.slice(s![l, .., w])))
    }

    /// Per-variate norm aggregated over lag slots by root-sum-square.
    pub fn variate_norms(&self) -> Array1<f64> {
        self.column_norms()
            .map_axis(Axis(0), |col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// Number of variates with at least one nonzero column.
    pub fn active_variates(&self) -> usize {
        self.variate_norms().iter().filter(|&&n| n > 0.0).count()
    }

    /// Embeds one window (`V x C`, oldest step first) into `C x D`.
    pub fn embed(&self, window: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (v, context) = window.dim();
        if v != self.num_variates() {
            return Err(Error::Shape(format!(
                "window has {v} variates, selector expects {}",
                self.num_variates()
            )));
        }
        self.check_context(context)?;
        let mut out = Array2::zeros((context, self.hidden()));
        for c in 0..context {
            let w = self.w.index_axis(Axis(0), self.slot_for(c, context));
            out.row_mut(c).assign(&(w.dot(&window.column(c)) + &self.b));
        }
        Ok(out)
    }

    /// Embeds lag `c` of a batch (`N x V`) into `N x D`.
    pub fn embed_batch(&self, lag_inputs: ArrayView2<'_, f64>, c: usize, context: usize) -> Array2<f64> {
        let w = self.w.index_axis(Axis(0), self.slot_for(c, context));
        let mut x = lag_inputs.dot(&w.t());
        x += &self.b;
        x
    }

    /// Embeds every lag of a batch, returning `C` matrices of shape `N x D`.
    pub fn embed_all(&self, lags: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        self.check_context(lags.len())?;
        Ok((0..lags.len())
            .map(|c| self.embed_batch(lags[c], c, lags.len()))
            .collect())
    }

    /// Accumulates `dL/dW` and `dL/db` from the gradients of the embedded batch.
    pub fn backward(&self, lags: &[ArrayView2<'_, f64>], d_embedded: &[Array2<f64>]) -> SelectorGrads {
        let context = lags.len();
        let mut grads = SelectorGrads {
            w: Array3::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        };
        for (c, (s_c, dx)) in lags.iter().zip(d_embedded).enumerate() {
            let slot = self.slot_for(c, context);
            let mut gw = grads.w.index_axis_mut(Axis(0), slot);
            ndarray::linalg::general_mat_mul(1.0, &dx.t(), s_c, 1.0, &mut gw);
            grads.b += &dx.sum_axis(Axis(0));
        }
        grads
    }

    /// `lambda * ln(sum alpha * ||W col||)` and its gradient with respect to `beta`.
    ///
    /// The column norms are constants here; `W` and `b` are never touched.
    pub fn reduction_loss(&self, lambda: f64) -> ReductionLoss {
        let alpha = self.alpha();
        let norms = self.column_norms();
        let total: f64 = Zip::from(&alpha).and(&norms).fold(0.0, |acc, a, n| acc + a * n);
        if total <= 0.0 {
            log::warn!("reduction loss evaluated with every selector column at zero");
            return ReductionLoss {
                value: lambda * REDUCTION_EPS.ln(),
                grad_beta: Array2::zeros(self.beta.raw_dim()),
                degenerate: true,
            };
        }
        let grad_beta = Zip::from(&alpha)
            .and(&norms)
            .map_collect(|&a, &n| lambda * a * (n / total - 1.0));
        ReductionLoss {
            value: lambda * total.ln(),
            grad_beta,
            degenerate: false,
        }
    }

    /// Proximal compression with the learned coefficients: each column shrinks in
    /// norm by `lambda * eta * alpha`, and columns at or below that become exact zeros.
    pub fn proximal_step(&mut self, lambda: f64, eta: f64) {
        let alpha = self.alpha();
        self.shrink_columns(&alpha.mapv(|a| lambda * eta * a));
    }

    /// Plain group-lasso proximal step: the same operator with constant uniform weights.
    pub fn group_lasso_proximal(&mut self, lambda: f64, eta: f64) {
        let uniform = 1.0 / self.beta.len() as f64;
        self.shrink_columns(&Array2::from_elem(self.beta.raw_dim(), lambda * eta * uniform));
    }

    /// Block soft-thresholding of every `(slot, variate)` column by its own threshold.
    pub fn shrink_columns(&mut self, thresholds: &Array2<f64>) {
        let (slots, _, v) = self.w.dim();
        for l in 0..slots {
            for w in 0..v {
                let mut col = self.w.slice_mut(s![l, .., w]);
                let norm = column_norm(col.view());
                let thr = thresholds[[l, w]];
                if norm <= thr {
                    col.fill(0.0);
                } else if thr > 0.0 {
                    let scale = 1.0 - thr / norm;
                    col.mapv_inplace(|x| x * scale);
                }
            }
        }
    }
}

fn column_norm(col: ArrayView1<'_, f64>) -> f64 {
    col.iter().map(|x| x * x).sum::<f64>().sqrt()
}
