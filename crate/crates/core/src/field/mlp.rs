//! A small scalar-output MLP with hand-rolled reverse-mode and
//! forward-over-reverse differentiation.
//!
//! Four passes are provided, each validated against central finite
//! differences in the tests:
//!
//! 1. value backprop — gradients of `sum_b u_b y(x_b)` w.r.t. parameters and
//!    inputs;
//! 2. directional backprop — for a per-sample tangent `v`, gradients of the
//!    directional derivative `s = v . grad_x y` w.r.t. parameters, `x`
//!    and `v` (forward tangent pass, then reverse over it);
//! 3. double tangent — the second directional derivative `c = v^T H v`
//!    by carrying second-order Taylor coefficients forward;
//! 4. double-tangent backprop — gradients of `c` w.r.t. parameters, `x`
//!    and `v`.
//!
//! Passes 2–4 are what lets the trainer differentiate Eikonal and curvature
//! terms in the local-derivative ablation mode without any autodiff
//! framework. Activations need three continuous derivatives for pass 4,
//! which is one reason the hidden activation is softplus.

use crate::rng::Rng;

/// Hidden-layer activation. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// `ln(1 + e^x)`; smooth, with derivatives sigmoid, sigmoid', sigmoid''.
    Softplus,
    /// `max(x, slope * x)`; piecewise linear (second and third derivatives
    /// are zero), used by the discriminator which needs first order only.
    LeakyRelu(f64),
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn act(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    #[inline]
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    #[inline]
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::LeakyRelu(_) => 0.0,
        }
    }

    #[inline]
    pub fn d3(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::LeakyRelu(_) => 0.0,
        }
    }
}

/// One affine layer: `rows x cols` weights, row-major, plus a bias per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// Multilayer perceptron with scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Gradient with the same layer shapes as an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpGradient {
    pub layers: Vec<Layer>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Layer {
    /// `out[b] = W input[b] + bias` for each of `n` samples.
    fn forward(&self, input: &[f64], n: usize, with_bias: bool, out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), n * self.cols);
        out.clear();
        out.resize(n * self.rows, 0.0);
        for b in 0..n {
            let x = &input[b * self.cols..(b + 1) * self.cols];
            let o = &mut out[b * self.rows..(b + 1) * self.rows];
            for (r, or) in o.iter_mut().enumerate() {
                let wr = &self.w[r * self.cols..(r + 1) * self.cols];
                *or = if with_bias { self.b[r] } else { 0.0 } + dot(wr, x);
            }
        }
    }

    /// `out[b] = W^T upstream[b]`: pull adjoints back through the weights.
    fn backward_input(&self, upstream: &[f64], n: usize, out: &mut Vec<f64>) {
        debug_assert_eq!(upstream.len(), n * self.rows);
        out.clear();
        out.resize(n * self.cols, 0.0);
        for b in 0..n {
            let u = &upstream[b * self.rows..(b + 1) * self.rows];
            let o = &mut out[b * self.cols..(b + 1) * self.cols];
            for (r, &ur) in u.iter().enumerate() {
                if ur != 0.0 {
                    axpy(ur, &self.w[r * self.cols..(r + 1) * self.cols], o);
                }
            }
        }
    }

    /// Accumulate `grad.w += sum_b upstream[b] input[b]^T` (and the bias term
    /// when `with_bias`).
    fn accumulate(&self, input: &[f64], upstream: &[f64], n: usize, with_bias: bool, grad: &mut Layer) {
        for b in 0..n {
            let x = &input[b * self.cols..(b + 1) * self.cols];
            let u = &upstream[b * self.rows..(b + 1) * self.rows];
            for (r, &ur) in u.iter().enumerate() {
                if ur != 0.0 {
                    axpy(ur, x, &mut grad.w[r * self.cols..(r + 1) * self.cols]);
                    if with_bias {
                        grad.b[r] += ur;
                    }
                }
            }
        }
    }

    fn zeros_like(&self) -> Layer {
        Layer { w: vec![0.0; self.w.len()], b: vec![0.0; self.b.len()], rows: self.rows, cols: self.cols }
    }
}

/// Forward intermediates for one batch: layer inputs and pre-activations.
struct Trace {
    /// `zs[l]` is the input to layer `l`; `zs[0]` is the network input.
    zs: Vec<Vec<f64>>,
    /// `aas[l]` is the pre-activation output of layer `l`.
    aas: Vec<Vec<f64>>,
}

impl Mlp {
    /// Fresh network with weights drawn from `N(0, 1/fan_in)` (standard
    /// deviation `1/sqrt(fan_in)`) and zero biases. The output width must
    /// be 1.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        assert_eq!(*widths.last().unwrap(), 1, "output must be scalar");
        assert!(widths.iter().all(|&w| w > 0));
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (cols, rows) = (pair[0], pair[1]);
                let std = 1.0 / (cols as f64).sqrt();
                Layer {
                    w: (0..rows * cols).map(|_| rng.normal() * std).collect(),
                    b: vec![0.0; rows],
                    rows,
                    cols,
                }
            })
            .collect();
        Mlp { widths: widths.to_vec(), layers, activation }
    }

    /// Rebuild a network from raw layers (checkpoint loading), validating
    /// that the shapes chain and the output is scalar.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> crate::Result<Self> {
        if layers.is_empty() {
            return Err(crate::Error::Format("network with no layers".into()));
        }
        let mut widths = vec![layers[0].cols];
        for (i, l) in layers.iter().enumerate() {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(crate::Error::Format(format!("layer {i} has inconsistent shapes")));
            }
            if l.cols != *widths.last().unwrap() {
                return Err(crate::Error::Format(format!(
                    "layer {i} input width {} does not chain from {}",
                    l.cols,
                    widths.last().unwrap()
                )));
            }
            widths.push(l.rows);
        }
        if *widths.last().unwrap() != 1 {
            return Err(crate::Error::Format("output layer is not scalar".into()));
        }
        Ok(Mlp { widths, layers, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    fn batch_len(&self, xs: &[f64]) -> usize {
        let d = self.input_dim();
        assert_eq!(xs.len() % d, 0, "input length must be a multiple of the input width");
        xs.len() / d
    }

    /// Scalar outputs for a batch of inputs (concatenated, `input_dim` each).
    pub fn forward_batch(&self, xs: &[f64]) -> Vec<f64> {
        let n = self.batch_len(xs);
        let mut cur = xs.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, n, true, &mut next);
            if l < last {
                for a in next.iter_mut() {
                    *a = self.activation.act(*a);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward pass keeping every layer input and pre-activation.
    fn forward_trace(&self, xs: &[f64], n: usize) -> Trace {
        let last = self.layers.len() - 1;
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut aas = Vec::with_capacity(self.layers.len());
        zs.push(xs.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = Vec::new();
            layer.forward(&zs[l], n, true, &mut a);
            if l < last {
                let z = a.iter().map(|&x| self.activation.act(x)).collect();
                aas.push(a);
                zs.push(z);
            } else {
                aas.push(a);
            }
        }
        Trace { zs, aas }
    }

    /// Tangent (directional) forward pass over an existing trace:
    /// `ts[l]`/`tas[l]` mirror `zs`/`aas` for the derivative along the
    /// per-sample tangent vectors.
    fn tangent_trace(&self, trace: &Trace, tangents: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let last = self.layers.len() - 1;
        let mut ts = Vec::with_capacity(self.layers.len());
        let mut tas = Vec::with_capacity(self.layers.len());
        ts.push(tangents.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut ta = Vec::new();
            layer.forward(&ts[l], n, false, &mut ta);
            if l < last {
                let a = &trace.aas[l];
                let t: Vec<f64> =
                    ta.iter().zip(a).map(|(&t, &av)| self.activation.d1(av) * t).collect();
                tas.push(ta);
                ts.push(t);
            } else {
                tas.push(ta);
            }
        }
        (ts, tas)
    }

    /// Values and gradients of `sum_b upstream[b] * y(x_b)`: parameter
    /// gradient plus, per sample, the input gradient `upstream[b] *
    /// grad_x y(x_b)`.
    pub fn backprop_batch(&self, xs: &[f64], upstream: &[f64]) -> (Vec<f64>, MlpGradient, Vec<f64>) {
        let n = self.batch_len(xs);
        assert_eq!(upstream.len(), n, "one upstream scalar per sample");
        let trace = self.forward_trace(xs, n);
        let last = self.layers.len() - 1;
        let values = trace.aas[last].clone();

        let mut grad = self.zero_gradient();
        // bar_a for the output layer is the upstream itself.
        let mut bar_a: Vec<f64> = upstream.to_vec();
        let mut bar_z = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            layer.accumulate(&trace.zs[l], &bar_a, n, true, &mut grad.layers[l]);
            layer.backward_input(&bar_a, n, &mut bar_z);
            if l > 0 {
                // Through the activation of the previous hidden layer.
                let a_prev = &trace.aas[l - 1];
                bar_a = bar_z.iter().zip(a_prev).map(|(&g, &av)| g * self.activation.d1(av)).collect();
            }
        }
        (values, grad, bar_z)
    }

    /// Per-sample input gradients `grad_x y(x_b)` (upstream of one), without
    /// accumulating parameter gradients.
    pub fn input_gradients_batch(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.batch_len(xs);
        let trace = self.forward_trace(xs, n);
        let last = self.layers.len() - 1;
        let values = trace.aas[last].clone();
        let mut bar_a: Vec<f64> = vec![1.0; n];
        let mut bar_z = Vec::new();
        for l in (0..self.layers.len()).rev() {
            self.layers[l].backward_input(&bar_a, n, &mut bar_z);
            if l > 0 {
                let a_prev = &trace.aas[l - 1];
                bar_a = bar_z.iter().zip(a_prev).map(|(&g, &av)| g * self.activation.d1(av)).collect();
            }
        }
        (values, bar_z)
    }

    /// First directional derivatives `s_b = v_b . grad_x y(x_b)` and the
    /// gradients of `sum_b upstream[b] * s_b` w.r.t. parameters, inputs and
    /// tangents. The tangent slice is sample-concatenated like `xs`.
    ///
    /// Returned tuple: `(s, d/dx, d/dv, d/dparams)`.
    pub fn directional_backprop_batch(
        &self,
        xs: &[f64],
        tangents: &[f64],
        upstream: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, MlpGradient) {
        let n = self.batch_len(xs);
        assert_eq!(tangents.len(), xs.len());
        assert_eq!(upstream.len(), n);
        let trace = self.forward_trace(xs, n);
        let (ts, tas) = self.tangent_trace(&trace, tangents, n);
        let last = self.layers.len() - 1;
        let s = tas[last].clone();

        let mut grad = self.zero_gradient();
        // Seeds at the output layer: s = ta_last, so bar_ta = upstream and
        // bar_a = 0.
        let mut bar_a: Vec<f64> = vec![0.0; n];
        let mut bar_ta: Vec<f64> = upstream.to_vec();
        let (mut bar_z, mut bar_t) = (Vec::new(), Vec::new());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            layer.accumulate(&trace.zs[l], &bar_a, n, true, &mut grad.layers[l]);
            layer.accumulate(&ts[l], &bar_ta, n, false, &mut grad.layers[l]);
            layer.backward_input(&bar_a, n, &mut bar_z);
            layer.backward_input(&bar_ta, n, &mut bar_t);
            if l > 0 {
                // Reverse through z = act(a), t = act'(a) * ta of layer l-1.
                let a_prev = &trace.aas[l - 1];
                let ta_prev = &tas[l - 1];
                let mut next_bar_a = Vec::with_capacity(bar_z.len());
                let mut next_bar_ta = Vec::with_capacity(bar_z.len());
                for k in 0..bar_z.len() {
                    let d1 = self.activation.d1(a_prev[k]);
                    let d2 = self.activation.d2(a_prev[k]);
                    next_bar_a.push(bar_z[k] * d1 + bar_t[k] * d2 * ta_prev[k]);
                    next_bar_ta.push(bar_t[k] * d1);
                }
                bar_a = next_bar_a;
                bar_ta = next_bar_ta;
            }
        }
        (s, bar_z, bar_t, grad)
    }

    /// First and second directional derivatives along per-sample tangents:
    /// `(v . grad y, v^T H v)`, by a second-order forward pass.
    pub fn double_tangent_batch(&self, xs: &[f64], tangents: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.batch_len(xs);
        assert_eq!(tangents.len(), xs.len());
        let trace = self.forward_trace(xs, n);
        let (_ts, tas) = self.tangent_trace(&trace, tangents, n);
        let last = self.layers.len() - 1;

        // Second-order coefficients: w' = act''(a) ta^2 + act'(a) wa.
        let mut w_cur = vec![0.0; xs.len()];
        let mut wa = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(&w_cur, n, false, &mut wa);
            if l < last {
                let a = &trace.aas[l];
                let ta = &tas[l];
                w_cur = (0..wa.len())
                    .map(|k| self.activation.d2(a[k]) * ta[k] * ta[k] + self.activation.d1(a[k]) * wa[k])
                    .collect();
            }
        }
        (tas[last].clone(), wa)
    }

    /// Gradients of the second directional derivative `c_b = v_b^T H(x_b)
    /// v_b` weighted by `upstream`: returns `(c, d/dx, d/dv, d/dparams)`.
    pub fn double_tangent_backprop_batch(
        &self,
        xs: &[f64],
        tangents: &[f64],
        upstream: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, MlpGradient) {
        let n = self.batch_len(xs);
        assert_eq!(tangents.len(), xs.len());
        assert_eq!(upstream.len(), n);
        let trace = self.forward_trace(xs, n);
        let (ts, tas) = self.tangent_trace(&trace, tangents, n);
        let last = self.layers.len() - 1;

        // Second-order forward, keeping intermediates.
        let mut ws: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut was: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        ws.push(vec![0.0; xs.len()]);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut wa = Vec::new();
            layer.forward(&ws[l], n, false, &mut wa);
            if l < last {
                let a = &trace.aas[l];
                let ta = &tas[l];
                let w: Vec<f64> = (0..wa.len())
                    .map(|k| self.activation.d2(a[k]) * ta[k] * ta[k] + self.activation.d1(a[k]) * wa[k])
                    .collect();
                was.push(wa);
                ws.push(w);
            } else {
                was.push(wa);
            }
        }
        let c = was[last].clone();

        let mut grad = self.zero_gradient();
        // Seeds: c = wa_last, so only bar_wa starts nonzero.
        let mut bar_a: Vec<f64> = vec![0.0; n];
        let mut bar_ta: Vec<f64> = vec![0.0; n];
        let mut bar_wa: Vec<f64> = upstream.to_vec();
        let (mut bar_z, mut bar_t, mut bar_w) = (Vec::new(), Vec::new(), Vec::new());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            layer.accumulate(&trace.zs[l], &bar_a, n, true, &mut grad.layers[l]);
            layer.accumulate(&ts[l], &bar_ta, n, false, &mut grad.layers[l]);
            layer.accumulate(&ws[l], &bar_wa, n, false, &mut grad.layers[l]);
            layer.backward_input(&bar_a, n, &mut bar_z);
            layer.backward_input(&bar_ta, n, &mut bar_t);
            layer.backward_input(&bar_wa, n, &mut bar_w);
            if l > 0 {
                // Reverse through the activation triple of layer l-1:
                //   z = act(a); t = act'(a) ta; w = act''(a) ta^2 + act'(a) wa.
                let a_prev = &trace.aas[l - 1];
                let ta_prev = &tas[l - 1];
                let wa_prev = &was[l - 1];
                let len = bar_z.len();
                let mut next_bar_a = Vec::with_capacity(len);
                let mut next_bar_ta = Vec::with_capacity(len);
                let mut next_bar_wa = Vec::with_capacity(len);
                for k in 0..len {
                    let d1 = self.activation.d1(a_prev[k]);
                    let d2 = self.activation.d2(a_prev[k]);
                    let d3 = self.activation.d3(a_prev[k]);
                    let (tv, wv) = (ta_prev[k], wa_prev[k]);
                    next_bar_a.push(
                        bar_z[k] * d1 + bar_t[k] * d2 * tv + bar_w[k] * (d3 * tv * tv + d2 * wv),
                    );
                    next_bar_ta.push(bar_t[k] * d1 + bar_w[k] * 2.0 * d2 * tv);
                    next_bar_wa.push(bar_w[k] * d1);
                }
                bar_a = next_bar_a;
                bar_ta = next_bar_ta;
                bar_wa = next_bar_wa;
            }
        }
        (c, bar_z, bar_t, grad)
    }

    pub fn zero_gradient(&self) -> MlpGradient {
        MlpGradient { layers: self.layers.iter().map(Layer::zeros_like).collect() }
    }
}

impl MlpGradient {
    pub fn add_assign(&mut self, other: &MlpGradient) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            assert_eq!(a.w.len(), b.w.len());
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.layers.iter_mut() {
            for x in l.w.iter_mut().chain(l.b.iter_mut()) {
                *x *= factor;
            }
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.params().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_net(seed: u64) -> Mlp {
        let mut rng = Rng::new(seed);
        Mlp::new(&[3, 6, 5, 1], Activation::Softplus, &mut rng)
    }

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Vec<f64> {
        (0..n * d).map(|_| rng.range(-1.0, 1.0)).collect()
    }

    /// Relative-or-absolute comparison used by every finite-difference check.
    fn close(got: f64, want: f64, tol: f64) -> bool {
        (got - want).abs() <= tol * 1.0_f64.max(want.abs())
    }

    #[test]
    fn activation_derivative_chain_matches_finite_differences() {
        let h = 1e-5;
        for act in [Activation::Softplus, Activation::LeakyRelu(0.2)] {
            for x in [-2.3, -0.7, 0.4, 1.9] {
                let fd1 = (act.act(x + h) - act.act(x - h)) / (2.0 * h);
                assert!(close(act.d1(x), fd1, 1e-8), "{act:?} d1 at {x}");
                let fd2 = (act.d1(x + h) - act.d1(x - h)) / (2.0 * h);
                assert!(close(act.d2(x), fd2, 1e-7), "{act:?} d2 at {x}");
                let fd3 = (act.d2(x + h) - act.d2(x - h)) / (2.0 * h);
                assert!(close(act.d3(x), fd3, 1e-7), "{act:?} d3 at {x}");
            }
        }
        assert_relative_eq!(Activation::Softplus.act(0.0), 2.0_f64.ln(), epsilon = 1e-15);
        // Stability at large magnitudes.
        assert_relative_eq!(Activation::Softplus.act(40.0), 40.0, epsilon = 1e-12);
        assert!(Activation::Softplus.act(-40.0) > 0.0);
        assert!(Activation::Softplus.act(-40.0) < 1e-15);
    }

    #[test]
    fn forward_matches_hand_computation() {
        // 1 -> 1 -> 1 network: y = w2 * softplus(w1 x + b1) + b2.
        let mut mlp = Mlp::new(&[1, 1, 1], Activation::Softplus, &mut Rng::new(0));
        mlp.layers[0].w[0] = 1.5;
        mlp.layers[0].b[0] = -0.25;
        mlp.layers[1].w[0] = -2.0;
        mlp.layers[1].b[0] = 0.5;
        let x = 0.8;
        let expected = -2.0 * Activation::Softplus.act(1.5 * x - 0.25) + 0.5;
        let y = mlp.forward_batch(&[x]);
        assert_relative_eq!(y[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn batched_forward_equals_per_sample() {
        let mlp = tiny_net(1);
        let mut rng = Rng::new(2);
        let xs = random_batch(&mut rng, 17, 3);
        let batched = mlp.forward_batch(&xs);
        for b in 0..17 {
            let single = mlp.forward_batch(&xs[b * 3..(b + 1) * 3]);
            assert_relative_eq!(batched[b], single[0], epsilon = 1e-15);
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mlp = tiny_net(3);
        let mut rng = Rng::new(4);
        let xs = random_batch(&mut rng, 4, 3);
        let upstream: Vec<f64> = (0..4).map(|_| rng.range(-1.0, 1.0)).collect();
        let (_, grad, _) = mlp.backprop_batch(&xs, &upstream);

        let loss = |m: &Mlp| -> f64 {
            m.forward_batch(&xs).iter().zip(&upstream).map(|(y, u)| y * u).sum()
        };
        let h = 1e-6;
        let mut perturbed = mlp.clone();
        let n_params = mlp.param_count();
        for idx in 0..n_params {
            let base = *mlp.params().nth(idx).unwrap();
            *perturbed.params_mut().nth(idx).unwrap() = base + h;
            let up = loss(&perturbed);
            *perturbed.params_mut().nth(idx).unwrap() = base - h;
            let down = loss(&perturbed);
            *perturbed.params_mut().nth(idx).unwrap() = base;
            let fd = (up - down) / (2.0 * h);
            let got = *grad.params().nth(idx).unwrap();
            assert!(close(got, fd, 1e-6), "param {idx}: backprop {got} vs fd {fd}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mlp = tiny_net(5);
        let mut rng = Rng::new(6);
        let xs = random_batch(&mut rng, 3, 3);
        let (values, grads) = mlp.input_gradients_batch(&xs);
        assert_eq!(values.len(), 3);
        let h = 1e-6;
        for b in 0..3 {
            for d in 0..3 {
                let mut plus = xs.clone();
                plus[b * 3 + d] += h;
                let mut minus = xs.clone();
                minus[b * 3 + d] -= h;
                let fd = (mlp.forward_batch(&plus)[b] - mlp.forward_batch(&minus)[b]) / (2.0 * h);
                assert!(close(grads[b * 3 + d], fd, 1e-7), "sample {b} dim {d}");
            }
        }
    }

    #[test]
    fn directional_value_is_tangent_dot_input_gradient() {
        let mlp = tiny_net(7);
        let mut rng = Rng::new(8);
        let xs = random_batch(&mut rng, 5, 3);
        let vs = random_batch(&mut rng, 5, 3);
        let ones = vec![1.0; 5];
        let (s, _, ds_dv, _) = mlp.directional_backprop_batch(&xs, &vs, &ones);
        let (_, input_grads) = mlp.input_gradients_batch(&xs);
        for b in 0..5 {
            let dotv: f64 =
                (0..3).map(|d| vs[b * 3 + d] * input_grads[b * 3 + d]).sum();
            assert_relative_eq!(s[b], dotv, epsilon = 1e-12);
            // s is linear in v, so ds/dv must equal the input gradient.
            for d in 0..3 {
                assert_relative_eq!(ds_dv[b * 3 + d], input_grads[b * 3 + d], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn directional_param_and_input_gradients_match_finite_differences() {
        let mlp = tiny_net(9);
        let mut rng = Rng::new(10);
        let xs = random_batch(&mut rng, 3, 3);
        let vs = random_batch(&mut rng, 3, 3);
        let upstream: Vec<f64> = (0..3).map(|_| rng.range(-1.0, 1.0)).collect();
        let (_, ds_dx, _, grad) = mlp.directional_backprop_batch(&xs, &vs, &upstream);

        let weighted_s = |m: &Mlp, inputs: &[f64]| -> f64 {
            let (s, _) = m.double_tangent_batch(inputs, &vs);
            s.iter().zip(&upstream).map(|(a, u)| a * u).sum()
        };
        let h = 1e-6;

        let mut perturbed = mlp.clone();
        for idx in 0..mlp.param_count() {
            let base = *mlp.params().nth(idx).unwrap();
            *perturbed.params_mut().nth(idx).unwrap() = base + h;
            let up = weighted_s(&perturbed, &xs);
            *perturbed.params_mut().nth(idx).unwrap() = base - h;
            let down = weighted_s(&perturbed, &xs);
            *perturbed.params_mut().nth(idx).unwrap() = base;
            let fd = (up - down) / (2.0 * h);
            let got = *grad.params().nth(idx).unwrap();
            assert!(close(got, fd, 1e-5), "param {idx}: {got} vs {fd}");
        }

        for b in 0..3 {
            for d in 0..3 {
                let mut plus = xs.clone();
                plus[b * 3 + d] += h;
                let mut minus = xs.clone();
                minus[b * 3 + d] -= h;
                let fd = (weighted_s(&mlp, &plus) - weighted_s(&mlp, &minus)) / (2.0 * h);
                assert!(close(ds_dx[b * 3 + d], fd, 1e-5), "sample {b} dim {d}");
            }
        }
    }

    #[test]
    fn double_tangent_second_matches_directional_difference() {
        let mlp = tiny_net(11);
        let mut rng = Rng::new(12);
        let xs = random_batch(&mut rng, 4, 3);
        let vs = random_batch(&mut rng, 4, 3);
        let (first, second) = mlp.double_tangent_batch(&xs, &vs);
        let h = 1e-5;
        for b in 0..4 {
            // c = d/dalpha [ v . grad y(x + alpha v) ] at alpha = 0.
            let shift = |sign: f64| -> Vec<f64> {
                let mut out = xs[b * 3..(b + 1) * 3].to_vec();
                for d in 0..3 {
                    out[d] += sign * h * vs[b * 3 + d];
                }
                out
            };
            let (sp, _) = mlp.double_tangent_batch(&shift(1.0), &vs[b * 3..(b + 1) * 3]);
            let (sm, _) = mlp.double_tangent_batch(&shift(-1.0), &vs[b * 3..(b + 1) * 3]);
            let fd = (sp[0] - sm[0]) / (2.0 * h);
            assert!(close(second[b], fd, 1e-6), "sample {b}: {} vs {fd}", second[b]);
            // And the first output agrees with the plain directional pass.
            let ones = vec![1.0; 4];
            let (s, _, _, _) = mlp.directional_backprop_batch(&xs, &vs, &ones);
            assert_relative_eq!(first[b], s[b], epsilon = 1e-12);
        }
    }

    #[test]
    fn double_tangent_backprop_matches_finite_differences() {
        let mlp = tiny_net(13);
        let mut rng = Rng::new(14);
        let xs = random_batch(&mut rng, 2, 3);
        let vs = random_batch(&mut rng, 2, 3);
        let upstream: Vec<f64> = (0..2).map(|_| rng.range(-1.0, 1.0)).collect();
        let (c, dc_dx, dc_dv, grad) = mlp.double_tangent_backprop_batch(&xs, &vs, &upstream);
        {
            // The value itself agrees with the forward-only pass.
            let (_, c2) = mlp.double_tangent_batch(&xs, &vs);
            for b in 0..2 {
                assert_relative_eq!(c[b], c2[b], epsilon = 1e-12);
            }
        }

        let weighted_c = |m: &Mlp, inputs: &[f64], tangents: &[f64]| -> f64 {
            let (_, c) = m.double_tangent_batch(inputs, tangents);
            c.iter().zip(&upstream).map(|(a, u)| a * u).sum()
        };
        let h = 1e-5;

        let mut perturbed = mlp.clone();
        for idx in 0..mlp.param_count() {
            let base = *mlp.params().nth(idx).unwrap();
            *perturbed.params_mut().nth(idx).unwrap() = base + h;
            let up = weighted_c(&perturbed, &xs, &vs);
            *perturbed.params_mut().nth(idx).unwrap() = base - h;
            let down = weighted_c(&perturbed, &xs, &vs);
            *perturbed.params_mut().nth(idx).unwrap() = base;
            let fd = (up - down) / (2.0 * h);
            let got = *grad.params().nth(idx).unwrap();
            assert!(close(got, fd, 1e-4), "param {idx}: {got} vs {fd}");
        }

        for b in 0..2 {
            for d in 0..3 {
                let mut plus = xs.clone();
                plus[b * 3 + d] += h;
                let mut minus = xs.clone();
                minus[b * 3 + d] -= h;
                let fd = (weighted_c(&mlp, &plus, &vs) - weighted_c(&mlp, &minus, &vs)) / (2.0 * h);
                assert!(close(dc_dx[b * 3 + d], fd, 1e-4), "x: sample {b} dim {d}");

                let mut vplus = vs.clone();
                vplus[b * 3 + d] += h;
                let mut vminus = vs.clone();
                vminus[b * 3 + d] -= h;
                let fd =
                    (weighted_c(&mlp, &xs, &vplus) - weighted_c(&mlp, &xs, &vminus)) / (2.0 * h);
                assert!(close(dc_dv[b * 3 + d], fd, 1e-4), "v: sample {b} dim {d}");
            }
        }
    }

    #[test]
    fn leaky_relu_forward_hand_value() {
        let mut mlp = Mlp::new(&[2, 2, 1], Activation::LeakyRelu(0.2), &mut Rng::new(15));
        mlp.layers[0].w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        mlp.layers[0].b.copy_from_slice(&[0.0, 0.0]);
        mlp.layers[1].w.copy_from_slice(&[1.0, 1.0]);
        mlp.layers[1].b[0] = 0.0;
        // Input (2, -1): hidden = (2, -0.2), output = 1.8.
        let y = mlp.forward_batch(&[2.0, -1.0]);
        assert_relative_eq!(y[0], 1.8, epsilon = 1e-15);
    }

    #[test]
    fn gradient_accumulation_is_linear_over_batch() {
        let mlp = tiny_net(16);
        let mut rng = Rng::new(17);
        let xs = random_batch(&mut rng, 6, 3);
        let upstream: Vec<f64> = (0..6).map(|_| rng.range(-1.0, 1.0)).collect();
        let (_, full, _) = mlp.backprop_batch(&xs, &upstream);
        let mut summed = mlp.zero_gradient();
        for b in 0..6 {
            let (_, g, _) = mlp.backprop_batch(&xs[b * 3..(b + 1) * 3], &upstream[b..b + 1]);
            summed.add_assign(&g);
        }
        for (a, b) in full.params().zip(summed.params()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }
}
