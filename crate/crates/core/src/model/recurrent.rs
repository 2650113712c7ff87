//! Unidirectional GRU layer and the linear output head.
//!
//! Per step, with `x` the input and `h` the previous state:
//!
//! ```text
//! z  = sigmoid(Wz x + Uz h + bz)
//! r  = sigmoid(Wr x + Ur h + br)
//! n  = tanh(Wn x + Un (r * h) + bn)
//! h' = (1 - z) * n + z * h
//! ```

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::sepconv::standard;

/// Weight matrices are `hidden x input` and `hidden x hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_n: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_z: Array1<f64>,
    pub b_r: Array1<f64>,
    pub b_n: Array1<f64>,
}

/// Per-step activations of a GRU forward pass. Row `t` of `states` is the
/// state entering step `t`; the final row is the last output.
#[derive(Clone, Debug)]
pub struct GruCache {
    pub states: Array2<f64>,
    pub z: Array2<f64>,
    pub r: Array2<f64>,
    pub n: Array2<f64>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `out += m * v` for a row-major matrix.
#[inline]
fn matvec_add(m: &Array2<f64>, v: &[f64], out: &mut [f64]) {
    let cols = m.ncols();
    let ms = m.as_slice().expect("standard layout");
    for (o, row) in out.iter_mut().zip(ms.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += m^T * v`.
#[inline]
fn matvec_t_add(m: &Array2<f64>, v: &[f64], out: &mut [f64]) {
    let cols = m.ncols();
    let ms = m.as_slice().expect("standard layout");
    for (row, &s) in ms.chunks_exact(cols).zip(v) {
        if s != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
    }
}

/// `m += u v^T`.
#[inline]
fn outer_add(m: &mut Array2<f64>, u: &[f64], v: &[f64]) {
    let cols = m.ncols();
    let ms = m.as_slice_mut().expect("standard layout");
    for (row, &s) in ms.chunks_exact_mut(cols).zip(u) {
        if s != 0.0 {
            for (o, b) in row.iter_mut().zip(v) {
                *o += s * b;
            }
        }
    }
}

impl Gru {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Array2::zeros((hidden, input));
        let u = || Array2::zeros((hidden, hidden));
        let b = || Array1::zeros(hidden);
        Self {
            w_z: w(),
            w_r: w(),
            w_n: w(),
            u_z: u(),
            u_r: u(),
            u_n: u(),
            b_z: b(),
            b_r: b(),
            b_n: b(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.nrows()
    }

    /// Runs the sequence `inputs` (`T x input`) from a zero state.
    pub fn forward(&self, inputs: &Array2<f64>) -> GruCache {
        let t_len = inputs.nrows();
        let hidden = self.hidden_size();
        // Input projections for all steps at once.
        let xz = standard(inputs.dot(&self.w_z.t()) + &self.b_z);
        let xr = standard(inputs.dot(&self.w_r.t()) + &self.b_r);
        let xn = standard(inputs.dot(&self.w_n.t()) + &self.b_n);

        let mut states = Array2::zeros((t_len + 1, hidden));
        let mut z = Array2::zeros((t_len, hidden));
        let mut r = Array2::zeros((t_len, hidden));
        let mut n = Array2::zeros((t_len, hidden));
        let mut az = vec![0.0; hidden];
        let mut ar = vec![0.0; hidden];
        let mut an = vec![0.0; hidden];
        let mut rh = vec![0.0; hidden];
        for t in 0..t_len {
            let h: Vec<f64> = states.row(t).to_vec();
            az.copy_from_slice(xz.row(t).as_slice().expect("contiguous"));
            ar.copy_from_slice(xr.row(t).as_slice().expect("contiguous"));
            matvec_add(&self.u_z, &h, &mut az);
            matvec_add(&self.u_r, &h, &mut ar);
            for j in 0..hidden {
                z[[t, j]] = sigmoid(az[j]);
                r[[t, j]] = sigmoid(ar[j]);
                rh[j] = r[[t, j]] * h[j];
            }
            an.copy_from_slice(xn.row(t).as_slice().expect("contiguous"));
            matvec_add(&self.u_n, &rh, &mut an);
            for j in 0..hidden {
                let nv = an[j].tanh();
                n[[t, j]] = nv;
                states[[t + 1, j]] = (1.0 - z[[t, j]]) * nv + z[[t, j]] * h[j];
            }
        }
        GruCache { states, z, r, n }
    }

    /// Back-propagates `grad_out` (`T x hidden`, gradient of the loss w.r.t.
    /// each output state) through time. Accumulates weight gradients into
    /// `grads` and returns the gradient w.r.t. the inputs.
    pub fn backward(
        &self,
        inputs: &Array2<f64>,
        cache: &GruCache,
        grad_out: &Array2<f64>,
        grads: &mut Gru,
    ) -> Array2<f64> {
        let (t_len, input) = inputs.dim();
        let hidden = self.hidden_size();
        let mut d_inputs = Array2::zeros((t_len, input));
        let mut dh_next = vec![0.0; hidden];
        let mut da_z = vec![0.0; hidden];
        let mut da_r = vec![0.0; hidden];
        let mut da_n = vec![0.0; hidden];
        let mut d_rh = vec![0.0; hidden];
        let mut rh = vec![0.0; hidden];
        for t in (0..t_len).rev() {
            let h_prev = cache.states.row(t);
            let h_prev = h_prev.as_slice().expect("contiguous");
            let z = cache.z.row(t);
            let r = cache.r.row(t);
            let n = cache.n.row(t);
            let mut dh_prev = vec![0.0; hidden];
            for j in 0..hidden {
                let dh = grad_out[[t, j]] + dh_next[j];
                let dn = dh * (1.0 - z[j]);
                let dz = dh * (h_prev[j] - n[j]);
                dh_prev[j] = dh * z[j];
                da_n[j] = dn * (1.0 - n[j] * n[j]);
                da_z[j] = dz * z[j] * (1.0 - z[j]);
                rh[j] = r[j] * h_prev[j];
            }
            d_rh.fill(0.0);
            matvec_t_add(&self.u_n, &da_n, &mut d_rh);
            for j in 0..hidden {
                dh_prev[j] += d_rh[j] * r[j];
                let dr = d_rh[j] * h_prev[j];
                da_r[j] = dr * r[j] * (1.0 - r[j]);
            }
            matvec_t_add(&self.u_z, &da_z, &mut dh_prev);
            matvec_t_add(&self.u_r, &da_r, &mut dh_prev);

            let x = inputs.row(t);
            let x = x.as_slice().expect("contiguous");
            outer_add(&mut grads.w_z, &da_z, x);
            outer_add(&mut grads.w_r, &da_r, x);
            outer_add(&mut grads.w_n, &da_n, x);
            outer_add(&mut grads.u_z, &da_z, h_prev);
            outer_add(&mut grads.u_r, &da_r, h_prev);
            outer_add(&mut grads.u_n, &da_n, &rh);
            for j in 0..hidden {
                grads.b_z[j] += da_z[j];
                grads.b_r[j] += da_r[j];
                grads.b_n[j] += da_n[j];
            }
            let mut dx = d_inputs.row_mut(t);
            let dx = dx.as_slice_mut().expect("contiguous");
            matvec_t_add(&self.w_z, &da_z, dx);
            matvec_t_add(&self.w_r, &da_r, dx);
            matvec_t_add(&self.w_n, &da_n, dx);
            dh_next = dh_prev;
        }
        d_inputs
    }
}

/// `y = W x + b` applied to every row, with `W` of shape `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, inputs: &Array2<f64>) -> Array2<f64> {
        standard(inputs.dot(&self.weight.t()) + &self.bias)
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&self, inputs: &Array2<f64>, grad_out: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &grad_out.t().dot(inputs);
        grads.bias += &grad_out.sum_axis(ndarray::Axis(0));
        standard(grad_out.dot(&self.weight))
    }
}
