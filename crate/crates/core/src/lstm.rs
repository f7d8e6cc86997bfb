//! Classic sigmoid/tanh LSTM forecaster used as the architecture ablation.
//!
//! Same layout and interface as [`crate::slstm::SlstmParams`]: gate-stacked `D x 4D`
//! input and recurrent weights in `[z | i | f | o]` order and a linear head on the
//! last hidden state. One step computes `c_t = f c_{t-1} + i z`, `h_t = o tanh(c_t)`
//! with sigmoid `i, f, o` and tanh `z`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::Uniform;

use crate::slstm::Gate;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w: Array2<f64>,
    pub r: Array2<f64>,
    pub bias: Array1<f64>,
    pub head_w: Array1<f64>,
    pub head_b: f64,
}

#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    z: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmTape {
    steps: Vec<StepCache>,
    h_last: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmParams {
    /// `U(-sqrt(1/D), sqrt(1/D))` weights, zero biases except forget bias 1.
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Shape("LSTM hidden width must be positive".into()));
        }
        let bound = (1.0 / hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Array2::from_shape_simple_fn((hidden, 4 * hidden), || rng.sample(dist));
        let r = Array2::from_shape_simple_fn((hidden, 4 * hidden), || rng.sample(dist));
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![2 * hidden..3 * hidden]).fill(1.0);
        let head_w = Array1::from_shape_simple_fn(hidden, || rng.sample(dist));
        Ok(Self {
            w,
            r,
            bias,
            head_w,
            head_b: 0.0,
        })
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            w: Array2::zeros((hidden, 4 * hidden)),
            r: Array2::zeros((hidden, 4 * hidden)),
            bias: Array1::zeros(4 * hidden),
            head_w: Array1::zeros(hidden),
            head_b: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.nrows()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w", self.w.as_slice().expect("standard layout")),
            ("r", self.r.as_slice().expect("standard layout")),
            ("bias", self.bias.as_slice().expect("standard layout")),
            ("head_w", self.head_w.as_slice().expect("standard layout")),
            ("head_b", std::slice::from_ref(&self.head_b)),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w", self.w.as_slice_mut().expect("standard layout")),
            ("r", self.r.as_slice_mut().expect("standard layout")),
            ("bias", self.bias.as_slice_mut().expect("standard layout")),
            ("head_w", self.head_w.as_slice_mut().expect("standard layout")),
            ("head_b", std::slice::from_mut(&mut self.head_b)),
        ]
    }

    pub fn forward_batch(&self, inputs: &[Array2<f64>]) -> Result<(Array1<f64>, LstmTape)> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("forward needs at least one context step".into()))?;
        let (batch, d) = first.dim();
        if d != self.hidden() || inputs.iter().any(|x| x.dim() != (batch, d)) {
            return Err(Error::Shape(format!(
                "inputs must all be N x {} matrices",
                self.hidden()
            )));
        }
        let mut h = Array2::<f64>::zeros((batch, d));
        let mut c = Array2::<f64>::zeros((batch, d));
        let mut steps = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            let mut pre = x.dot(&self.w);
            ndarray::linalg::general_mat_mul(1.0, &h, &self.r, 1.0, &mut pre);
            pre += &self.bias;
            let mut cache = StepCache {
                h_prev: h.clone(),
                c_prev: c.clone(),
                z: Array2::zeros((batch, d)),
                i: Array2::zeros((batch, d)),
                f: Array2::zeros((batch, d)),
                o: Array2::zeros((batch, d)),
                tanh_c: Array2::zeros((batch, d)),
            };
            for b in 0..batch {
                for j in 0..d {
                    let z = pre[[b, j]].tanh();
                    let i = sigmoid(pre[[b, d + j]]);
                    let f = sigmoid(pre[[b, 2 * d + j]]);
                    let o = sigmoid(pre[[b, 3 * d + j]]);
                    let cv = f * cache.c_prev[[b, j]] + i * z;
                    let tc = cv.tanh();
                    cache.z[[b, j]] = z;
                    cache.i[[b, j]] = i;
                    cache.f[[b, j]] = f;
                    cache.o[[b, j]] = o;
                    cache.tanh_c[[b, j]] = tc;
                    c[[b, j]] = cv;
                    h[[b, j]] = o * tc;
                }
            }
            if let Some(k) = pre.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGate {
                    gate: Gate::ALL[(k % (4 * d)) / d],
                    step: t,
                });
            }
            steps.push(cache);
        }
        let mut pred = h.dot(&self.head_w);
        pred += self.head_b;
        Ok((pred, LstmTape { steps, h_last: h }))
    }

    pub fn backward_batch(
        &self,
        inputs: &[Array2<f64>],
        tape: &LstmTape,
        d_pred: ArrayView1<'_, f64>,
    ) -> Result<(LstmParams, Vec<Array2<f64>>)> {
        let d = self.hidden();
        let batch = tape.h_last.nrows();
        if inputs.len() != tape.steps.len() || d_pred.len() != batch {
            return Err(Error::Shape("backward inputs do not match the cached forward pass".into()));
        }
        let mut grads = LstmParams::zeros(d);
        grads.head_w = tape.h_last.t().dot(&d_pred);
        grads.head_b = d_pred.sum();
        let mut dh = Array2::zeros((batch, d));
        for b in 0..batch {
            dh.row_mut(b).scaled_add(d_pred[b], &self.head_w);
        }
        let mut dc_carry = Array2::<f64>::zeros((batch, d));
        let mut dpre = Array2::<f64>::zeros((batch, 4 * d));
        let mut d_inputs = vec![Array2::zeros((0, 0)); inputs.len()];
        for t in (0..inputs.len()).rev() {
            let st = &tape.steps[t];
            for b in 0..batch {
                for j in 0..d {
                    let (z, i, f, o, tc) = (
                        st.z[[b, j]],
                        st.i[[b, j]],
                        st.f[[b, j]],
                        st.o[[b, j]],
                        st.tanh_c[[b, j]],
                    );
                    let g = dh[[b, j]];
                    let dc = dc_carry[[b, j]] + g * o * (1.0 - tc * tc);
                    dpre[[b, j]] = dc * i * (1.0 - z * z);
                    dpre[[b, d + j]] = dc * z * i * (1.0 - i);
                    dpre[[b, 2 * d + j]] = dc * st.c_prev[[b, j]] * f * (1.0 - f);
                    dpre[[b, 3 * d + j]] = g * tc * o * (1.0 - o);
                    dc_carry[[b, j]] = dc * f;
                }
            }
            d_inputs[t] = dpre.dot(&self.w.t());
            ndarray::linalg::general_mat_mul(1.0, &inputs[t].t(), &dpre, 1.0, &mut grads.w);
            ndarray::linalg::general_mat_mul(1.0, &st.h_prev.t(), &dpre, 1.0, &mut grads.r);
            grads.bias += &dpre.sum_axis(Axis(0));
            if t > 0 {
                dh = dpre.dot(&self.r.t());
            }
        }
        Ok((grads, d_inputs))
    }
}
