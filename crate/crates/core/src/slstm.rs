//! sLSTM forecaster: exponential input/forget gates with stabilizer and normalizer
//! states, block-diagonal (multi-head) recurrence and a linear prediction head.
//!
//! For pre-activations `z~, i~, f~, o~ = W x_t + R h_{t-1} + b` one step computes
//!
//! ```text
//! m_t = max(f~ + m_{t-1}, i~)
//! i'  = exp(i~ - m_t)            f' = exp(f~ + m_{t-1} - m_t)
//! c_t = f' c_{t-1} + i' tanh(z~)  n_t = f' n_{t-1} + i'
//! h_t = sigmoid(o~) * c_t / n_t
//! ```
//!
//! starting from `h = c = n = m = 0`. The stabilizer `m` rescales `c` and `n` by the
//! same factor, so `h` (and therefore every prediction) does not depend on it. The
//! backward pass uses this: `m` is treated as a constant, which gives the exact
//! gradient of the prediction without differentiating through the `max`.
//!
//! Parameters are stored gate-stacked for batched matrix products: `w` and `r` are
//! `D x 4D` with column blocks ordered `[z | i | f | o]`, so block `g` of `w` is
//! `W_g` transposed. Batched passes take `N x D` inputs per context step.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Uniform;

use crate::{Error, Result};

/// The four gate blocks of the stacked parameters, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gate {
    Z,
    I,
    F,
    O,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Z, Gate::I, Gate::F, Gate::O];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gate::Z => "cell input (z)",
            Gate::I => "input (i)",
            Gate::F => "forget (f)",
            Gate::O => "output (o)",
        })
    }
}

/// sLSTM layer plus linear head. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct SlstmParams {
    /// Input weights, `D x 4D`.
    pub w: Array2<f64>,
    /// Recurrent weights, `D x 4D`, zero outside the per-head diagonal blocks.
    pub r: Array2<f64>,
    /// Gate biases, length `4D`.
    pub bias: Array1<f64>,
    pub head_w: Array1<f64>,
    pub head_b: f64,
    pub heads: usize,
}

/// Recurrent state of a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SlstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
    pub n: Array1<f64>,
    pub m: Array1<f64>,
}

impl SlstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
            n: Array1::zeros(hidden),
            m: Array1::zeros(hidden),
        }
    }
}

#[derive(Debug, Clone)]
struct BatchState {
    h: Array2<f64>,
    c: Array2<f64>,
    n: Array2<f64>,
    m: Array2<f64>,
}

impl BatchState {
    fn zeros(batch: usize, hidden: usize) -> Self {
        let z = Array2::zeros((batch, hidden));
        Self {
            h: z.clone(),
            c: z.clone(),
            n: z.clone(),
            m: z,
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    n_prev: Array2<f64>,
    z: Array2<f64>,
    ig: Array2<f64>,
    fg: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    n: Array2<f64>,
}

/// Activations cached by [`SlstmParams::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct SlstmTape {
    steps: Vec<StepCache>,
    h_last: Array2<f64>,
}

impl SlstmParams {
    /// Uniform `U(-sqrt(1/D), sqrt(1/D))` weights inside the recurrent head blocks,
    /// zero biases except the forget bias, which ramps linearly from 0 to 1 across `D`.
    pub fn init<R: Rng + ?Sized>(hidden: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 || heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Shape(format!(
                "hidden width {hidden} is not divisible into {heads} heads"
            )));
        }
        let bound = (1.0 / hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Array2::from_shape_simple_fn((hidden, 4 * hidden), || rng.sample(dist));
        let mut r = Array2::zeros((hidden, 4 * hidden));
        let head = hidden / heads;
        for ((p, q), x) in r.indexed_iter_mut() {
            if p / head == (q % hidden) / head {
                *x = rng.sample(dist);
            }
        }
        let mut bias = Array1::zeros(4 * hidden);
        let ramp = if hidden > 1 {
            Array1::linspace(0.0, 1.0, hidden)
        } else {
            Array1::zeros(1)
        };
        bias.slice_mut(s![2 * hidden..3 * hidden]).assign(&ramp);
        let head_w = Array1::from_shape_simple_fn(hidden, || rng.sample(dist));
        Ok(Self {
            w,
            r,
            bias,
            head_w,
            head_b: 0.0,
            heads,
        })
    }

    pub fn zeros(hidden: usize, heads: usize) -> Self {
        Self {
            w: Array2::zeros((hidden, 4 * hidden)),
            r: Array2::zeros((hidden, 4 * hidden)),
            bias: Array1::zeros(4 * hidden),
            head_w: Array1::zeros(hidden),
            head_b: 0.0,
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden(), self.heads)
    }

    pub fn hidden(&self) -> usize {
        self.w.nrows()
    }

    /// `W_g` as a `D x D` matrix acting on column vectors.
    pub fn input_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let d = self.hidden();
        self.w.slice(s![.., gate.index() * d..(gate.index() + 1) * d]).reversed_axes()
    }

    /// `R_g` as a `D x D` matrix acting on column vectors.
    pub fn recurrent_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let d = self.hidden();
        self.r.slice(s![.., gate.index() * d..(gate.index() + 1) * d]).reversed_axes()
    }

    pub fn gate_bias(&self, gate: Gate) -> ArrayView1<'_, f64> {
        let d = self.hidden();
        self.bias.slice(s![gate.index() * d..(gate.index() + 1) * d])
    }

    /// True for entries of `r` that lie inside a head block.
    pub fn in_block(&self, p: usize, q: usize) -> bool {
        let d = self.hidden();
        let head = d / self.heads;
        p / head == (q % d) / head
    }

    /// Zeroes every off-block entry of `r` (used on gradients).
    pub fn mask_recurrent(&mut self) {
        let d = self.hidden();
        let head = d / self.heads;
        for ((p, q), x) in self.r.indexed_iter_mut() {
            if p / head != (q % d) / head {
                *x = 0.0;
            }
        }
    }

    /// Flat views of every parameter tensor, in checkpoint order.
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

    /// One recurrent step for a single sequence.
    pub fn cell_step(&self, x: ArrayView1<'_, f64>, state: &SlstmState) -> Result<(Array1<f64>, SlstmState)> {
        let d = self.hidden();
        if x.len() != d || state.h.len() != d {
            return Err(Error::Shape(format!("cell_step expects vectors of length {d}")));
        }
        let row = |v: &Array1<f64>| v.view().insert_axis(Axis(0)).to_owned();
        let prev = BatchState {
            h: row(&state.h),
            c: row(&state.c),
            n: row(&state.n),
            m: row(&state.m),
        };
        let x = x.insert_axis(Axis(0));
        let (next, _) = self.step(x, &prev, 0)?;
        let h = next.h.row(0).to_owned();
        Ok((
            h.clone(),
            SlstmState {
                h,
                c: next.c.row(0).to_owned(),
                n: next.n.row(0).to_owned(),
                m: next.m.row(0).to_owned(),
            },
        ))
    }

    /// Prediction for one embedded sequence (`C x D`, oldest step first).
    pub fn forward(&self, embedded: ArrayView2<'_, f64>) -> Result<f64> {
        let inputs: Vec<Array2<f64>> = embedded
            .rows()
            .into_iter()
            .map(|r| r.insert_axis(Axis(0)).to_owned())
            .collect();
        let (pred, _) = self.forward_batch(&inputs)?;
        Ok(pred[0])
    }

    /// Gradients of `upstream * prediction` for one embedded sequence: parameter
    /// gradients and `d/d embedded` (`C x D`).
    pub fn backward(&self, embedded: ArrayView2<'_, f64>, upstream: f64) -> Result<(SlstmParams, Array2<f64>)> {
        let inputs: Vec<Array2<f64>> = embedded
            .rows()
            .into_iter()
            .map(|r| r.insert_axis(Axis(0)).to_owned())
            .collect();
        let (_, tape) = self.forward_batch(&inputs)?;
        let (grads, d_inputs) = self.backward_batch(&inputs, &tape, ndarray::arr1(&[upstream]).view())?;
        let mut d_embedded = Array2::zeros(embedded.raw_dim());
        for (c, dx) in d_inputs.iter().enumerate() {
            d_embedded.row_mut(c).assign(&dx.row(0));
        }
        Ok((grads, d_embedded))
    }

    fn step(&self, x: ArrayView2<'_, f64>, prev: &BatchState, t: usize) -> Result<(BatchState, StepCache)> {
        let d = self.hidden();
        let batch = x.nrows();
        let mut pre = x.dot(&self.w);
        ndarray::linalg::general_mat_mul(1.0, &prev.h, &self.r, 1.0, &mut pre);
        pre += &self.bias;

        let mut z = Array2::zeros((batch, d));
        let mut ig = Array2::zeros((batch, d));
        let mut fg = Array2::zeros((batch, d));
        let mut o = Array2::zeros((batch, d));
        let mut next = BatchState::zeros(batch, d);
        {
            let pre = pre.as_slice().expect("standard layout");
            let (c_prev, n_prev, m_prev) = (
                prev.c.as_slice().expect("standard layout"),
                prev.n.as_slice().expect("standard layout"),
                prev.m.as_slice().expect("standard layout"),
            );
            let (zs, is, fs, os) = (
                z.as_slice_mut().expect("standard layout"),
                ig.as_slice_mut().expect("standard layout"),
                fg.as_slice_mut().expect("standard layout"),
                o.as_slice_mut().expect("standard layout"),
            );
            let h = next.h.as_slice_mut().expect("standard layout");
            let c = next.c.as_slice_mut().expect("standard layout");
            let n = next.n.as_slice_mut().expect("standard layout");
            let m = next.m.as_slice_mut().expect("standard layout");
            for b in 0..batch {
                let row = &pre[b * 4 * d..(b + 1) * 4 * d];
                for j in 0..d {
                    let k = b * d + j;
                    let (zt, it, ft, ot) = (row[j], row[d + j], row[2 * d + j], row[3 * d + j]);
                    let forget_arg = ft + m_prev[k];
                    let mt = if forget_arg >= it { forget_arg } else { it };
                    let iv = (it - mt).exp();
                    let fv = (forget_arg - mt).exp();
                    let zv = zt.tanh();
                    let ov = 1.0 / (1.0 + (-ot).exp());
                    let cv = fv * c_prev[k] + iv * zv;
                    let nv = fv * n_prev[k] + iv;
                    zs[k] = zv;
                    is[k] = iv;
                    fs[k] = fv;
                    os[k] = ov;
                    c[k] = cv;
                    n[k] = nv;
                    m[k] = mt;
                    h[k] = ov * cv / nv;
                }
            }
        }
        if next.h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGate {
                gate: blame_gate(&pre, &next.n, d),
                step: t,
            });
        }
        let cache = StepCache {
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            n_prev: prev.n.clone(),
            z,
            ig,
            fg,
            o,
            c: next.c.clone(),
            n: next.n.clone(),
        };
        Ok((next, cache))
    }

    /// Predictions for a batch: `inputs[c]` is the `N x D` embedding of context step `c`.
    pub fn forward_batch(&self, inputs: &[Array2<f64>]) -> Result<(Array1<f64>, SlstmTape)> {
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
        let mut state = BatchState::zeros(batch, d);
        let mut steps = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            let (next, cache) = self.step(x.view(), &state, t)?;
            steps.push(cache);
            state = next;
        }
        let mut pred = state.h.dot(&self.head_w);
        pred += self.head_b;
        Ok((
            pred,
            SlstmTape {
                steps,
                h_last: state.h,
            },
        ))
    }

    /// Backpropagation through time for `sum_n d_pred[n] * prediction[n]`.
    ///
    /// Returns parameter gradients (off-block recurrent entries exactly zero) and the
    /// gradient with respect to every input matrix.
    pub fn backward_batch(
        &self,
        inputs: &[Array2<f64>],
        tape: &SlstmTape,
        d_pred: ArrayView1<'_, f64>,
    ) -> Result<(SlstmParams, Vec<Array2<f64>>)> {
        let d = self.hidden();
        let batch = tape.h_last.nrows();
        if inputs.len() != tape.steps.len() || d_pred.len() != batch {
            return Err(Error::Shape("backward inputs do not match the cached forward pass".into()));
        }
        let mut grads = self.zeros_like();
        grads.head_w = tape.h_last.t().dot(&d_pred);
        grads.head_b = d_pred.sum();

        let mut dh = Array2::zeros((batch, d));
        for b in 0..batch {
            dh.row_mut(b).scaled_add(d_pred[b], &self.head_w);
        }
        let mut dc_carry = Array2::<f64>::zeros((batch, d));
        let mut dn_carry = Array2::<f64>::zeros((batch, d));
        let mut dpre = Array2::<f64>::zeros((batch, 4 * d));
        let mut d_inputs = vec![Array2::zeros((0, 0)); inputs.len()];

        for t in (0..inputs.len()).rev() {
            let st = &tape.steps[t];
            {
                let dh = dh.as_slice().expect("standard layout");
                let dcs = dc_carry.as_slice_mut().expect("standard layout");
                let dns = dn_carry.as_slice_mut().expect("standard layout");
                let dp = dpre.as_slice_mut().expect("standard layout");
                let (c_prev, n_prev) = (st.c_prev.as_slice().unwrap(), st.n_prev.as_slice().unwrap());
                let (z, ig, fg, o) = (
                    st.z.as_slice().unwrap(),
                    st.ig.as_slice().unwrap(),
                    st.fg.as_slice().unwrap(),
                    st.o.as_slice().unwrap(),
                );
                let (c, n) = (st.c.as_slice().unwrap(), st.n.as_slice().unwrap());
                for b in 0..batch {
                    let row = &mut dp[b * 4 * d..(b + 1) * 4 * d];
                    for j in 0..d {
                        let k = b * d + j;
                        let q = c[k] / n[k];
                        let d_o = dh[k] * q;
                        let dc = dcs[k] + dh[k] * o[k] / n[k];
                        let dn = dns[k] - dh[k] * o[k] * q / n[k];
                        let d_fg = dc * c_prev[k] + dn * n_prev[k];
                        let d_ig = dc * z[k] + dn;
                        let dz = dc * ig[k];
                        row[j] = dz * (1.0 - z[k] * z[k]);
                        row[d + j] = d_ig * ig[k];
                        row[2 * d + j] = d_fg * fg[k];
                        row[3 * d + j] = d_o * o[k] * (1.0 - o[k]);
                        dcs[k] = dc * fg[k];
                        dns[k] = dn * fg[k];
                    }
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
        grads.mask_recurrent();
        Ok((grads, d_inputs))
    }
}

fn blame_gate(pre: &Array2<f64>, n: &Array2<f64>, d: usize) -> Gate {
    for gate in Gate::ALL {
        let block = pre.slice(s![.., gate.index() * d..(gate.index() + 1) * d]);
        if block.iter().any(|x| !x.is_finite()) {
            return gate;
        }
    }
    if n.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
        return Gate::I;
    }
    Gate::O
}
