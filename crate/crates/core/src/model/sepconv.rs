//! Depthwise separable 2-D convolution over `(frequency, time, channel)` maps.
//!
//! The channel-wise stage is a true convolution (kernel index `i - f`) with
//! same padding and the layer's strides; the point-wise stage mixes channels
//! with stride one. The kernel's centre tap sits at offset `(W - 1) / 2`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row-major copy if needed; `dot` may return column-major results for
/// degenerate shapes.
pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// `F x T x D` real tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap(Array3<f64>);

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (f, t, d) = values.dim();
        if f == 0 || t == 0 || d == 0 {
            return invalid(format!("feature map dimensions must be positive, got {:?}", (f, t, d)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("feature map contains non-finite values");
        }
        Ok(Self(values.as_standard_layout().into_owned()))
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub(crate) fn from_raw(values: Array3<f64>) -> Self {
        Self(values)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One separable convolution block: `act(pointwise(channelwise(x))) + residual(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepConvLayer {
    /// `W x H x D`: frequency taps, time taps, input channels.
    pub channelwise: Array3<f64>,
    /// `D x N`.
    pub pointwise: Array2<f64>,
    pub stride_f: usize,
    pub stride_t: usize,
    pub has_residual: bool,
    /// `D x N` strided 1x1 projection for residuals that change shape.
    pub projection: Option<Array2<f64>>,
    pub activation: Activation,
}

/// Gradients of a [`SepConvLayer`]'s weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SepConvGrads {
    pub channelwise: Array3<f64>,
    pub pointwise: Array2<f64>,
    pub projection: Option<Array2<f64>>,
}

/// Intermediate values of one forward pass needed by the backward pass.
#[derive(Clone, Debug)]
pub struct SepConvCache {
    /// Channel-wise result, `F' x T' x D`.
    pub channelwise_out: Array3<f64>,
    /// Point-wise result before the activation, `F' x T' x N`.
    pub pre_activation: Array3<f64>,
}

pub fn output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

struct Geometry {
    f_in: usize,
    t_in: usize,
    f_out: usize,
    t_out: usize,
    d: usize,
    w: usize,
    h: usize,
    sf: usize,
    st: usize,
    pad_f: usize,
    pad_t: usize,
}

impl Geometry {
    /// Visit every `(input offset, kernel offset, output offset)` triple of
    /// the channel-wise convolution; each offset addresses `d` contiguous
    /// channels.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        for i in 0..self.f_out {
            let centre_f = i * self.sf + self.pad_f;
            for j in 0..self.t_out {
                let centre_t = j * self.st + self.pad_t;
                let out = (i * self.t_out + j) * self.d;
                for a in 0..self.w {
                    let Some(f) = centre_f.checked_sub(a).filter(|&f| f < self.f_in) else {
                        continue;
                    };
                    for b in 0..self.h {
                        let Some(t) = centre_t.checked_sub(b).filter(|&t| t < self.t_in) else {
                            continue;
                        };
                        visit((f * self.t_in + t) * self.d, (a * self.h + b) * self.d, out);
                    }
                }
            }
        }
    }
}

impl SepConvLayer {
    pub fn in_channels(&self) -> usize {
        self.pointwise.nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.ncols()
    }

    /// Whether the residual branch is a plain identity.
    pub fn identity_residual(&self) -> bool {
        self.stride_f == 1 && self.stride_t == 1 && self.in_channels() == self.out_channels()
    }

    pub fn output_dims(&self, f: usize, t: usize) -> (usize, usize, usize) {
        (
            output_len(f, self.stride_f),
            output_len(t, self.stride_t),
            self.out_channels(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h, d) = self.channelwise.dim();
        if w == 0 || h == 0 {
            return invalid("channel-wise kernel must be non-empty");
        }
        if d != self.in_channels() {
            return invalid(format!(
                "channel-wise kernel has {d} channels, point-wise expects {}",
                self.in_channels()
            ));
        }
        if self.stride_f == 0 || self.stride_t == 0 {
            return invalid("strides must be positive");
        }
        match (&self.projection, self.has_residual) {
            (Some(p), true) if p.dim() != self.pointwise.dim() => {
                return invalid(format!("projection shape {:?} must be {:?}", p.dim(), self.pointwise.dim()));
            }
            (None, true) if !self.identity_residual() => {
                return invalid("shape-changing residual needs a projection");
            }
            (Some(_), false) => return invalid("projection given without a residual"),
            _ => {}
        }
        Ok(())
    }

    fn geometry(&self, input: &FeatureMap) -> Result<Geometry> {
        self.validate()?;
        let (f_in, t_in, d) = input.dim();
        if d != self.in_channels() {
            return invalid(format!("input has {d} channels, layer expects {}", self.in_channels()));
        }
        let (w, h, _) = self.channelwise.dim();
        Ok(Geometry {
            f_in,
            t_in,
            f_out: output_len(f_in, self.stride_f),
            t_out: output_len(t_in, self.stride_t),
            d,
            w,
            h,
            sf: self.stride_f,
            st: self.stride_t,
            pad_f: (w - 1) / 2,
            pad_t: (h - 1) / 2,
        })
    }

    /// Forward pass.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &FeatureMap) -> Result<(FeatureMap, SepConvCache)> {
        let g = self.geometry(input)?;
        let x = input.0.as_slice().expect("standard layout");
        let c = self.channelwise.as_slice().expect("standard layout");
        let mut s = vec![0.0; g.f_out * g.t_out * g.d];
        g.for_each_tap(|xo, co, so| {
            for k in 0..g.d {
                s[so + k] += x[xo + k] * c[co + k];
            }
        });
        let positions = g.f_out * g.t_out;
        let s = Array2::from_shape_vec((positions, g.d), s).expect("shape");
        let pre = standard(s.dot(&self.pointwise));
        let mut out = pre.mapv(|v| self.activation.apply(v));
        if self.has_residual {
            let n = self.out_channels();
            let out_s = out.as_slice_mut().expect("standard layout");
            if let Some(p) = &self.projection {
                for i in 0..g.f_out {
                    for j in 0..g.t_out {
                        let xo = (i * g.sf * g.t_in + j * g.st) * g.d;
                        let oo = (i * g.t_out + j) * n;
                        for k in 0..g.d {
                            let xv = x[xo + k];
                            if xv != 0.0 {
                                for m in 0..n {
                                    out_s[oo + m] += xv * p[[k, m]];
                                }
                            }
                        }
                    }
                }
            } else {
                for (o, xv) in out_s.iter_mut().zip(x) {
                    *o += xv;
                }
            }
        }
        let n = self.out_channels();
        let reshape = |a: Array2<f64>, ch: usize| {
            a.into_shape_with_order((g.f_out, g.t_out, ch)).expect("shape")
        };
        Ok((
            FeatureMap(reshape(out, n)),
            SepConvCache {
                channelwise_out: reshape(s, g.d),
                pre_activation: reshape(pre, n),
            },
        ))
    }

    /// Backward pass. Returns the gradient with respect to the input and the
    /// weight gradients.
    pub fn backward(
        &self,
        input: &FeatureMap,
        cache: &SepConvCache,
        grad_out: &Array3<f64>,
    ) -> Result<(Array3<f64>, SepConvGrads)> {
        let g = self.geometry(input)?;
        let n = self.out_channels();
        if grad_out.dim() != (g.f_out, g.t_out, n) {
            return invalid(format!(
                "output gradient shape {:?} does not match {:?}",
                grad_out.dim(),
                (g.f_out, g.t_out, n)
            ));
        }
        let positions = g.f_out * g.t_out;
        let x = input.0.as_slice().expect("standard layout");
        let dy = grad_out.as_slice().expect("standard layout");
        let pre = cache.pre_activation.as_slice().expect("standard layout");
        let d_pre: Vec<f64> = dy
            .iter()
            .zip(pre)
            .map(|(g, &p)| g * self.activation.derivative(p))
            .collect();
        let d_pre = Array2::from_shape_vec((positions, n), d_pre).expect("shape");
        let s = cache
            .channelwise_out
            .view()
            .into_shape_with_order((positions, g.d))
            .expect("shape");
        let d_pointwise = standard(s.t().dot(&d_pre));
        let ds = standard(d_pre.dot(&self.pointwise.t()));
        let ds = ds.as_slice().expect("standard layout");

        let c = self.channelwise.as_slice().expect("standard layout");
        let mut dc = vec![0.0; c.len()];
        let mut dx = vec![0.0; x.len()];
        g.for_each_tap(|xo, co, so| {
            for k in 0..g.d {
                dc[co + k] += ds[so + k] * x[xo + k];
                dx[xo + k] += ds[so + k] * c[co + k];
            }
        });

        let mut d_projection = None;
        if self.has_residual {
            if let Some(p) = &self.projection {
                let mut dp = Array2::<f64>::zeros(p.dim());
                for i in 0..g.f_out {
                    for j in 0..g.t_out {
                        let xo = (i * g.sf * g.t_in + j * g.st) * g.d;
                        let oo = (i * g.t_out + j) * n;
                        for k in 0..g.d {
                            let mut acc = 0.0;
                            for m in 0..n {
                                dp[[k, m]] += x[xo + k] * dy[oo + m];
                                acc += p[[k, m]] * dy[oo + m];
                            }
                            dx[xo + k] += acc;
                        }
                    }
                }
                d_projection = Some(dp);
            } else {
                for (d, g) in dx.iter_mut().zip(dy) {
                    *d += g;
                }
            }
        }

        Ok((
            Array3::from_shape_vec((g.f_in, g.t_in, g.d), dx).expect("shape"),
            SepConvGrads {
                channelwise: Array3::from_shape_vec(self.channelwise.dim(), dc).expect("shape"),
                pointwise: d_pointwise,
                projection: d_projection,
            },
        ))
    }
}

/// Free-function form of [`SepConvLayer::forward`].
pub fn sepconv_forward(input: &FeatureMap, layer: &SepConvLayer) -> Result<FeatureMap> {
    layer.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, max_rel_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    fn rand2(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    fn random_layer(
        rng: &mut ChaCha8Rng,
        (w, h, d, n): (usize, usize, usize, usize),
        (sf, st): (usize, usize),
        residual: bool,
        activation: Activation,
    ) -> SepConvLayer {
        let needs_projection = residual && !(sf == 1 && st == 1 && d == n);
        SepConvLayer {
            channelwise: rand3(rng, (w, h, d)),
            pointwise: rand2(rng, (d, n)),
            stride_f: sf,
            stride_t: st,
            has_residual: residual,
            projection: needs_projection.then(|| rand2(rng, (d, n))),
            activation,
        }
    }

    /// Channel-wise then point-wise sums taken literally over every input position, with
    /// out-of-range kernel indices contributing nothing.
    fn naive(x: &Array3<f64>, layer: &SepConvLayer) -> Array3<f64> {
        let (f_in, t_in, d) = x.dim();
        let (w, h, _) = layer.channelwise.dim();
        let (pf, pt) = ((w as isize - 1) / 2, (h as isize - 1) / 2);
        let (fo, to) = (
            f_in.div_ceil(layer.stride_f),
            t_in.div_ceil(layer.stride_t),
        );
        let n = layer.out_channels();
        let mut out = Array3::zeros((fo, to, n));
        for i in 0..fo {
            for j in 0..to {
                let ci = (i * layer.stride_f) as isize + pf;
                let cj = (j * layer.stride_t) as isize + pt;
                let mut s = vec![0.0; d];
                for (k, sk) in s.iter_mut().enumerate() {
                    for f in 0..f_in {
                        for t in 0..t_in {
                            let a = ci - f as isize;
                            let b = cj - t as isize;
                            if a >= 0 && b >= 0 && (a as usize) < w && (b as usize) < h {
                                *sk += x[[f, t, k]] * layer.channelwise[[a as usize, b as usize, k]];
                            }
                        }
                    }
                }
                for m in 0..n {
                    let o: f64 = (0..d).map(|k| s[k] * layer.pointwise[[k, m]]).sum();
                    let mut v = layer.activation.apply(o);
                    if layer.has_residual {
                        let (fi, ti) = (i * layer.stride_f, j * layer.stride_t);
                        v += match &layer.projection {
                            Some(p) => (0..d).map(|k| x[[fi, ti, k]] * p[[k, m]]).sum(),
                            None => x[[fi, ti, m]],
                        };
                    }
                    out[[i, j, m]] = v;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let layer = SepConvLayer {
            channelwise: Array3::ones((1, 1, 1)),
            pointwise: Array2::ones((1, 1)),
            stride_f: 1,
            stride_t: 1,
            has_residual: false,
            projection: None,
            activation: Activation::Identity,
        };
        for v in [2.5, -0.75] {
            let x = FeatureMap::new(Array3::from_elem((1, 1, 1), v)).unwrap();
            assert_eq!(layer.forward(&x).unwrap().values()[[0, 0, 0]], v);
        }
    }

    #[test]
    fn zero_channelwise_leaves_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for activation in [Activation::Identity, Activation::Relu] {
            let mut layer = random_layer(&mut rng, (3, 3, 2, 2), (1, 1), true, activation);
            layer.channelwise.fill(0.0);
            let x = FeatureMap::new(rand3(&mut rng, (4, 5, 2))).unwrap();
            assert_eq!(layer.forward(&x).unwrap().values(), x.values());
            layer.has_residual = false;
            assert!(layer.forward(&x).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn matches_naive_reference_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = random_layer(&mut rng, (3, 3, 2, 3), (1, 1), false, Activation::Identity);
        let x = FeatureMap::new(rand3(&mut rng, (4, 5, 2))).unwrap();
        let fast = layer.forward(&x).unwrap();
        let slow = naive(x.values(), &layer);
        for (a, b) in fast.values().iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_reference_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let dims = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let strides = (rng.random_range(1..=3), rng.random_range(1..=3));
            let activation = if rng.random() { Activation::Relu } else { Activation::Identity };
            let residual = rng.random();
            let layer = random_layer(&mut rng, dims, strides, residual, activation);
            let input_dims = (rng.random_range(1..=6), rng.random_range(1..=7), dims.2);
            let x = FeatureMap::new(rand3(&mut rng, input_dims)).unwrap();
            let fast = layer.forward(&x).unwrap();
            let slow = naive(x.values(), &layer);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.values().iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_lengths_round_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for st in 1..=4 {
            for t in 1..=13 {
                let layer = random_layer(&mut rng, (3, 3, 1, 2), (2, st), true, Activation::Relu);
                let x = FeatureMap::new(rand3(&mut rng, (5, t, 1))).unwrap();
                let (f, t_out, n) = layer.forward(&x).unwrap().dim();
                assert_eq!((f, t_out, n), (3, t.div_ceil(st), 2));
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = random_layer(&mut rng, (3, 3, 2, 2), (1, 1), false, Activation::Relu);
        let x = FeatureMap::new(rand3(&mut rng, (4, 4, 3))).unwrap();
        assert!(layer.forward(&x).is_err());
        let mut bad = random_layer(&mut rng, (3, 3, 2, 3), (1, 1), false, Activation::Relu);
        bad.has_residual = true;
        assert!(bad.validate().is_err());
    }

    fn loss_with(layer: &SepConvLayer, x: &FeatureMap, weights: &Array3<f64>) -> f64 {
        let y = layer.forward(x).unwrap();
        (y.values() * weights).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let strides = if trial % 2 == 0 { (1, 1) } else { (2, 2) };
            let layer = random_layer(&mut rng, (3, 2, 2, 3), strides, true, Activation::Identity);
            let x = FeatureMap::new(rand3(&mut rng, (5, 4, 2))).unwrap();
            let (y, cache) = layer.forward_cached(&x).unwrap();
            let weights = rand3(&mut rng, y.dim());
            let (dx, grads) = layer.backward(&x, &cache, &weights).unwrap();

            let mut xv = x.values().clone();
            let num = central_differences(xv.as_slice_mut().unwrap(), FD_STEP, |v| {
                let xm = FeatureMap::new(Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap()).unwrap();
                loss_with(&layer, &xm, &weights)
            });
            worst = worst.max(max_rel_error(dx.as_slice().unwrap(), &num));

            let mut probe = layer.clone();
            let mut cw = probe.channelwise.clone();
            let num = central_differences(cw.as_slice_mut().unwrap(), FD_STEP, |v| {
                probe.channelwise.as_slice_mut().unwrap().copy_from_slice(v);
                loss_with(&probe, &x, &weights)
            });
            worst = worst.max(max_rel_error(grads.channelwise.as_slice().unwrap(), &num));

            let mut probe = layer.clone();
            let mut pw = probe.pointwise.clone();
            let num = central_differences(pw.as_slice_mut().unwrap(), FD_STEP, |v| {
                probe.pointwise.as_slice_mut().unwrap().copy_from_slice(v);
                loss_with(&probe, &x, &weights)
            });
            worst = worst.max(max_rel_error(grads.pointwise.as_slice().unwrap(), &num));

            let mut probe = layer.clone();
            let mut pj = probe.projection.clone().unwrap();
            let num = central_differences(pj.as_slice_mut().unwrap(), FD_STEP, |v| {
                probe.projection.as_mut().unwrap().as_slice_mut().unwrap().copy_from_slice(v);
                loss_with(&probe, &x, &weights)
            });
            worst = worst.max(max_rel_error(grads.projection.unwrap().as_slice().unwrap(), &num));
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn masked_channel_gets_no_kernel_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = random_layer(&mut rng, (3, 3, 2, 2), (1, 1), true, Activation::Relu);
        let mut xv = rand3(&mut rng, (4, 4, 2));
        xv.index_axis_mut(ndarray::Axis(2), 1).fill(0.0);
        let x = FeatureMap::new(xv).unwrap();
        let (y, cache) = layer.forward_cached(&x).unwrap();
        let (_, grads) = layer.backward(&x, &cache, &Array3::ones(y.dim())).unwrap();
        assert!(grads.channelwise.index_axis(ndarray::Axis(2), 1).iter().all(|&g| g == 0.0));
        assert!(grads.pointwise.iter().any(|&g| g != 0.0));
    }
}
