//! Time-conditioned multilayer perceptron with hand-written derivatives.
//!
//! Inputs are `x` concatenated with sinusoidal features of `t`. Hidden layers
//! use a smooth activation so the network is C^2 in both inputs and
//! parameters. Besides plain backprop the network supports:
//!
//! * forward-mode tangents (`jvp`), used for exact divergences;
//! * `input_gradient` for scalar heads;
//! * `loss_parameter_gradient`, which differentiates a loss that depends on
//!   both the outputs and the input gradient. The parameter gradient of
//!   `sum_n gbar_n . grad_x E_n` equals the gradient of the directional
//!   derivative of `E` along `gbar_n`, so it is obtained by running a tangent
//!   pass seeded with `gbar` and reversing through it.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    /// Value, first and second derivative.
    #[inline]
    fn eval3(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let a = z.tanh();
                let d = 1.0 - a * a;
                (a, d, -2.0 * a * d)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                let ds = s * (1.0 - s);
                (z * s, s + z * ds, ds * (2.0 + z * (1.0 - 2.0 * s)))
            }
        }
    }

    #[inline]
    fn eval2(self, z: f64) -> (f64, f64) {
        let (a, d, _) = self.eval3(z);
        (a, d)
    }

    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }
}

/// Architecture description; enough to rebuild a network from a flat
/// parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub data_dim: usize,
    pub out_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_frequencies: Vec<f64>,
}

impl MlpSpec {
    /// Default architecture: 3 x 128 tanh, 8 time frequencies.
    pub fn new(data_dim: usize, out_dim: usize) -> Self {
        MlpSpec {
            data_dim,
            out_dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Tanh,
            time_frequencies: default_time_frequencies(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.data_dim + 2 * self.time_frequencies.len()
    }

    /// `[rows, cols]` of every weight matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<[usize; 2]> {
        let mut dims = vec![self.feature_dim()];
        dims.extend(&self.hidden);
        dims.push(self.out_dim);
        dims.windows(2).map(|w| [w[1], w[0]]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|[r, c]| r * c + r).sum()
    }
}

/// Frequencies `pi, 2 pi, ..., 8 pi`.
pub fn default_time_frequencies() -> Vec<f64> {
    (1..=8).map(|k| PI * k as f64).collect()
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    rows: usize,
    cols: usize,
    w: usize,
    b: usize,
}

/// Intermediate values of one forward pass.
struct Trace {
    features: Array2<f64>,
    /// Activations of the hidden layers.
    act: Vec<Array2<f64>>,
    /// First derivative of the activation at `pre`.
    dact: Vec<Array2<f64>>,
    /// Second derivative of the activation at `pre`.
    ddact: Vec<Array2<f64>>,
    out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl Mlp {
    /// Fan-in scaled uniform init; the output layer starts at zero.
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; spec.param_count()];
        let shapes = spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut offset = 0;
        for (l, [rows, cols]) in shapes.into_iter().enumerate() {
            let bound = 1.0 / (cols as f64).sqrt();
            let count = rows * cols + rows;
            if l != last {
                for p in &mut params[offset..offset + count] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
            offset += count;
        }
        Mlp { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "architecture needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch("parameter vector length".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Adds `delta` to the output-layer bias of a scalar head.
    pub fn shift_output_bias(&mut self, delta: f64) {
        let layer = *self.layers().last().unwrap();
        for b in &mut self.params[layer.b..layer.b + layer.rows] {
            *b += delta;
        }
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.spec
            .layer_shapes()
            .into_iter()
            .map(|[rows, cols]| {
                let layer = Layer {
                    rows,
                    cols,
                    w: offset,
                    b: offset + rows * cols,
                };
                offset += rows * cols + rows;
                layer
            })
            .collect()
    }

    fn weight(&self, layer: Layer) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (layer.rows, layer.cols),
            &self.params[layer.w..layer.w + layer.rows * layer.cols],
        )
        .expect("layer shape")
    }

    fn bias(&self, layer: Layer) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[layer.b..layer.b + layer.rows])
    }

    fn check_inputs(&self, t: ArrayView1<f64>, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.data_dim || t.len() != x.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} columns and one time per row; got {:?} and {} times",
                self.spec.data_dim,
                x.dim(),
                t.len()
            )));
        }
        if x.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn features(&self, t: ArrayView1<f64>, x: ArrayView2<f64>) -> Array2<f64> {
        let d = self.spec.data_dim;
        let k = self.spec.time_frequencies.len();
        let mut f = Array2::zeros((x.nrows(), d + 2 * k));
        f.slice_mut(s![.., ..d]).assign(&x);
        for (mut row, &tn) in f.axis_iter_mut(Axis(0)).zip(t.iter()) {
            for (j, &w) in self.spec.time_frequencies.iter().enumerate() {
                let (sn, cs) = (w * tn).sin_cos();
                row[d + j] = sn;
                row[d + k + j] = cs;
            }
        }
        f
    }

    fn affine(&self, input: &Array2<f64>, layer: Layer) -> Array2<f64> {
        let mut z = input.dot(&self.weight(layer).t());
        z += &self.bias(layer);
        z
    }

    /// Network output, one row per input row.
    pub fn forward(&self, t: ArrayView1<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(t, x)?;
        let layers = self.layers();
        let act = self.spec.activation;
        let mut h = self.features(t, x);
        for &layer in &layers[..layers.len() - 1] {
            h = self.affine(&h, layer);
            h.mapv_inplace(|z| act.eval(z));
        }
        Ok(self.affine(&h, *layers.last().unwrap()))
    }

    fn trace(&self, t: ArrayView1<f64>, x: ArrayView2<f64>, second: bool) -> Trace {
        let layers = self.layers();
        let act = self.spec.activation;
        let features = self.features(t, x);
        let nh = layers.len() - 1;
        let mut acts = Vec::with_capacity(nh);
        let mut dact = Vec::with_capacity(nh);
        let mut ddact = Vec::with_capacity(nh);
        for (l, &layer) in layers[..nh].iter().enumerate() {
            let z = self.affine(if l == 0 { &features } else { &acts[l - 1] }, layer);
            let mut a = Array2::zeros(z.dim());
            let mut da = Array2::zeros(z.dim());
            if second {
                let mut dda = Array2::zeros(z.dim());
                Zip::from(&z)
                    .and(&mut a)
                    .and(&mut da)
                    .and(&mut dda)
                    .for_each(|&z, a, da, dda| {
                        let (v, d1, d2) = act.eval3(z);
                        *a = v;
                        *da = d1;
                        *dda = d2;
                    });
                ddact.push(dda);
            } else {
                Zip::from(&z).and(&mut a).and(&mut da).for_each(|&z, a, da| {
                    let (v, d1) = act.eval2(z);
                    *a = v;
                    *da = d1;
                });
            }
            acts.push(a);
            dact.push(da);
        }
        let last = if nh == 0 { &features } else { &acts[nh - 1] };
        let out = self.affine(last, layers[nh]);
        Trace {
            features,
            act: acts,
            dact,
            ddact,
            out,
        }
    }

    /// Accumulates `adj^T input` into the weight gradient and row sums into the bias gradient.
    fn accumulate(&self, grad: &mut [f64], layer: Layer, adj: &Array2<f64>, input: &Array2<f64>) {
        let gw = adj.t().dot(input);
        for (g, v) in grad[layer.w..layer.w + layer.rows * layer.cols]
            .iter_mut()
            .zip(gw.iter())
        {
            *g += v;
        }
        let gb = adj.sum_axis(Axis(0));
        for (g, v) in grad[layer.b..layer.b + layer.rows].iter_mut().zip(gb.iter()) {
            *g += v;
        }
    }

    /// Parameter gradient of `sum(out_adj * forward(t, x))`.
    pub fn backward(
        &self,
        t: ArrayView1<f64>,
        x: ArrayView2<f64>,
        out_adj: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_inputs(t, x)?;
        if out_adj.dim() != (x.nrows(), self.spec.out_dim) {
            return Err(Error::ShapeMismatch("output adjoint shape".into()));
        }
        let tr = self.trace(t, x, false);
        let grad = self.reverse(&tr, out_adj.to_owned());
        Ok((tr.out, grad))
    }

    /// Loss of the outputs and its parameter gradient in one forward/reverse
    /// sweep. `loss_fn(out)` returns the loss and `dL/d out`.
    pub fn output_loss_gradient<F>(
        &self,
        t: ArrayView1<f64>,
        x: ArrayView2<f64>,
        loss_fn: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<f64>) -> (f64, Array2<f64>),
    {
        self.check_inputs(t, x)?;
        let tr = self.trace(t, x, false);
        let (loss, adj) = loss_fn(tr.out.view());
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss value {loss}")));
        }
        if adj.dim() != tr.out.dim() {
            return Err(Error::ShapeMismatch("output adjoint shape".into()));
        }
        Ok((loss, self.reverse(&tr, adj)))
    }

    fn reverse(&self, tr: &Trace, out_adj: Array2<f64>) -> Vec<f64> {
        let layers = self.layers();
        let nh = layers.len() - 1;
        let mut grad = vec![0.0; self.params.len()];
        let mut adj = out_adj;
        for l in (0..=nh).rev() {
            let input = if l == 0 { &tr.features } else { &tr.act[l - 1] };
            self.accumulate(&mut grad, layers[l], &adj, input);
            if l > 0 {
                let mut up = adj.dot(&self.weight(layers[l]));
                up *= &tr.dact[l - 1];
                adj = up;
            }
        }
        grad
    }

    /// Output and its directional derivative along `dx` (forward mode).
    pub fn jvp(
        &self,
        t: ArrayView1<f64>,
        x: ArrayView2<f64>,
        dx: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_inputs(t, x)?;
        if dx.dim() != x.dim() {
            return Err(Error::ShapeMismatch("tangent shape".into()));
        }
        let tr = self.trace(t, x, false);
        let dout = self.tangent(&tr, dx);
        Ok((tr.out, dout))
    }

    fn tangent_inputs(&self, n: usize, dx: ArrayView2<f64>) -> Array2<f64> {
        let mut df = Array2::zeros((n, self.spec.feature_dim()));
        df.slice_mut(s![.., ..self.spec.data_dim]).assign(&dx);
        df
    }

    fn tangent(&self, tr: &Trace, dx: ArrayView2<f64>) -> Array2<f64> {
        let layers = self.layers();
        let nh = layers.len() - 1;
        let mut dh = self.tangent_inputs(dx.nrows(), dx);
        for l in 0..nh {
            let mut dz = dh.dot(&self.weight(layers[l]).t());
            dz *= &tr.dact[l];
            dh = dz;
        }
        dh.dot(&self.weight(layers[nh]).t())
    }

    /// Output together with `d out_i / d x_i` for every `i` (square nets only).
    pub fn jacobian_diagonal(
        &self,
        t: ArrayView1<f64>,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_inputs(t, x)?;
        let d = self.spec.data_dim;
        if self.spec.out_dim != d {
            return Err(invalid("jacobian diagonal needs out_dim == data_dim"));
        }
        let tr = self.trace(t, x, false);
        let mut diag = Array2::zeros((x.nrows(), d));
        for i in 0..d {
            let mut dx = Array2::zeros(x.dim());
            dx.column_mut(i).fill(1.0);
            let dout = self.tangent(&tr, dx.view());
            diag.column_mut(i).assign(&dout.column(i));
        }
        Ok((tr.out, diag))
    }

    fn check_scalar(&self) -> Result<()> {
        if self.spec.out_dim != 1 {
            return Err(invalid(format!(
                "input gradient needs a scalar head, network has {} outputs",
                self.spec.out_dim
            )));
        }
        Ok(())
    }

    fn gradient_from_trace(&self, tr: &Trace) -> Array2<f64> {
        let layers = self.layers();
        let nh = layers.len() - 1;
        let n = tr.out.nrows();
        let mut adj = Array2::from_elem((n, 1), 1.0);
        for l in (0..=nh).rev() {
            let mut up = adj.dot(&self.weight(layers[l]));
            if l > 0 {
                up *= &tr.dact[l - 1];
            }
            adj = up;
        }
        adj.slice(s![.., ..self.spec.data_dim]).to_owned()
    }

    /// Scalar output and its exact gradient with respect to `x`.
    pub fn value_and_input_gradient(
        &self,
        t: ArrayView1<f64>,
        x: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_scalar()?;
        self.check_inputs(t, x)?;
        let tr = self.trace(t, x, false);
        let g = self.gradient_from_trace(&tr);
        Ok((tr.out.column(0).to_owned(), g))
    }

    pub fn input_gradient(&self, t: ArrayView1<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.value_and_input_gradient(t, x)?.1)
    }

    /// Gradient of a loss built from the scalar outputs `E` and input
    /// gradients `G = grad_x E` of a batch.
    ///
    /// `loss_fn(E, G)` returns the loss together with `dL/dE` and `dL/dG`.
    /// The returned parameter gradient includes the path through `G`.
    pub fn loss_parameter_gradient<F>(
        &self,
        t: ArrayView1<f64>,
        x: ArrayView2<f64>,
        loss_fn: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView1<f64>, ArrayView2<f64>) -> (f64, Array1<f64>, Array2<f64>),
    {
        self.check_scalar()?;
        self.check_inputs(t, x)?;
        let tr = self.trace(t, x, true);
        let g = self.gradient_from_trace(&tr);
        let (loss, e_adj, g_adj) = loss_fn(tr.out.column(0), g.view());
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss value {loss}")));
        }
        if e_adj.len() != x.nrows() || g_adj.dim() != x.dim() {
            return Err(Error::ShapeMismatch("loss adjoint shapes".into()));
        }
        Ok((loss, self.reverse_with_tangent(&tr, e_adj.view(), g_adj.view())))
    }

    /// Reverse pass through both the primal outputs (seeded with `e_adj`)
    /// and the tangent outputs of a tangent pass seeded with `g_adj`.
    fn reverse_with_tangent(
        &self,
        tr: &Trace,
        e_adj: ArrayView1<f64>,
        g_adj: ArrayView2<f64>,
    ) -> Vec<f64> {
        let layers = self.layers();
        let nh = layers.len() - 1;
        let n = tr.out.nrows();

        // Tangent pass: dz_l = dh_{l-1} W_l^T, dh_l = act'(z_l) * dz_l.
        let mut dh = vec![self.tangent_inputs(n, g_adj)];
        let mut dz = Vec::with_capacity(nh);
        for l in 0..nh {
            let z = dh[l].dot(&self.weight(layers[l]).t());
            let mut h = z.clone();
            h *= &tr.dact[l];
            dz.push(z);
            dh.push(h);
        }

        let mut grad = vec![0.0; self.params.len()];
        // Output layer: E = h W^T + b, dE = dh W^T with dE seeded by ones.
        let mut h_adj = e_adj.to_owned().insert_axis(Axis(1));
        let mut dh_adj = Array2::from_elem((n, 1), 1.0);
        for l in (0..=nh).rev() {
            let layer = layers[l];
            let input = if l == 0 { &tr.features } else { &tr.act[l - 1] };
            // Primal affine map and its tangent share W.
            self.accumulate(&mut grad, layer, &h_adj, input);
            let gw = dh_adj.t().dot(&dh[l]);
            for (g, v) in grad[layer.w..layer.w + layer.rows * layer.cols]
                .iter_mut()
                .zip(gw.iter())
            {
                *g += v;
            }
            if l == 0 {
                break;
            }
            let w = self.weight(layer);
            let a_bar = h_adj.dot(&w);
            let da_bar = dh_adj.dot(&w);
            // Through h = act(z) and dh = act'(z) dz.
            let k = l - 1;
            let mut z_bar = Array2::zeros(a_bar.dim());
            Zip::from(&mut z_bar)
                .and(&a_bar)
                .and(&da_bar)
                .and(&tr.dact[k])
                .and(&tr.ddact[k])
                .and(&dz[k])
                .for_each(|zb, &ab, &dab, &d1, &d2, &dzv| {
                    *zb = ab * d1 + dab * d2 * dzv;
                });
            let mut dz_bar = da_bar;
            dz_bar *= &tr.dact[k];
            h_adj = z_bar;
            dh_adj = dz_bar;
        }
        grad
    }
}
