//! Small dense networks with exact reverse-mode gradients, for the actor and critic.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{contract, Error, Result};

const MLP_MAGIC: &[u8; 8] = b"HNRNMLP\0";
const MLP_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn tag(self) -> u64 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Tanh),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
    /// Bumped on every parameter change; forward caches remember it.
    generation: u64,
}

/// Activations recorded by [`Mlp::forward_cached`]; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
    generation: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense { weights: Array2::zeros(l.weights.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }
}

impl Mlp {
    /// Uniform init in ±1/sqrt(fan_in); the last layer is further scaled by `final_scale`.
    pub fn new(layer_dims: &[usize], output: Activation, final_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(contract(format!("invalid layer dims {layer_dims:?}")));
        }
        let n = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt() * if i + 1 == n { final_scale } else { 1.0 };
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-1.0..=1.0) * bound);
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-1.0..=1.0) * bound);
                Dense { weights, bias }
            })
            .collect();
        Ok(Mlp { layers, hidden: Activation::Relu, output, generation: 0 })
    }

    pub fn seeded(layer_dims: &[usize], output: Activation, final_scale: f64, seed: u64) -> Result<Self> {
        Mlp::new(layer_dims, output, final_scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_layers(layers: Vec<Dense>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(contract(format!("layer {i}: bias length does not match weights")));
            }
            if i > 0 && layers[i - 1].weights.nrows() != l.weights.ncols() {
                return Err(contract(format!("layer {i}: input width does not match previous output")));
            }
        }
        Ok(Mlp { layers, hidden, output, generation: 0 })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| contract(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Rows of `input` are samples.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights.t()) + &layer.bias;
            self.activation_of(i).apply(&mut z);
            x = z;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(input.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights.t()) + &layer.bias;
            self.activation_of(i).apply(&mut z);
            activations.push(z);
        }
        Ok(ForwardCache { activations, generation: self.generation })
    }

    /// Gradients of `sum(upstream ∘ output)` with respect to the parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if cache.generation != self.generation || cache.activations.len() != self.layers.len() + 1 {
            return Err(contract("forward cache is stale: parameters changed since it was recorded"));
        }
        if upstream.dim() != cache.output().dim() {
            return Err(contract(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.dim(),
                cache.output().dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_of(i);
            let out = &cache.activations[i + 1];
            if act != Activation::Identity {
                ndarray::Zip::from(&mut delta).and(out).for_each(|d, &o| *d *= act.grad_from_output(o));
            }
            let input = &cache.activations[i];
            let weights = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            let next = delta.dot(&self.layers[i].weights);
            grads.push(Dense { weights, bias });
            delta = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(contract(format!("input width {width} does not match network input {}", self.input_dim())));
        }
        Ok(())
    }

    /// Layout: magic, version, layer count L, L+1 dims, hidden and output activation tags,
    /// then each layer's row-major weights followed by its bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::default();
        w.bytes(MLP_MAGIC);
        w.u64(MLP_VERSION);
        let dims = self.layer_dims();
        w.u64(self.layers.len() as u64);
        dims.iter().for_each(|&d| w.u64(d as u64));
        w.u64(self.hidden.tag());
        w.u64(self.output.tag());
        w.f64s(self.params());
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(data);
        r.expect_magic(MLP_MAGIC)?;
        let version = r.u64()?;
        if version != MLP_VERSION {
            return Err(Error::Format(format!("unsupported network checkpoint version {version}")));
        }
        let n_layers = r.usize()?;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Format(format!("implausible layer count {n_layers}")));
        }
        let dims = (0..=n_layers).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let hidden = Activation::from_tag(r.u64()?)?;
        let output = Activation::from_tag(r.u64()?)?;
        let mut layers = Vec::with_capacity(n_layers);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = Array2::from_shape_vec((fan_out, fan_in), r.f64s(fan_in * fan_out)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            let bias = Array1::from(r.f64s(fan_out)?);
            layers.push(Dense { weights, bias });
        }
        r.finish()?;
        Mlp::from_layers(layers, hidden, output)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Mlp::from_bytes(&std::fs::read(path)?)
    }
}

/// Bias-corrected adaptive moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Gradients,
    pub second: Gradients,
    pub step: u64,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp, step_size: f64) -> Self {
        AdamState {
            first: Gradients::zeros_like(mlp),
            second: Gradients::zeros_like(mlp),
            step: 0,
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One descent step along `grads`.
pub fn adam_step(mlp: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.layers.len() != mlp.layers.len() || state.first.layers.len() != mlp.layers.len() {
        return Err(contract("gradient/optimizer shapes do not match the network"));
    }
    for (g, l) in grads.layers.iter().zip(&mlp.layers) {
        if g.weights.dim() != l.weights.dim() || g.bias.len() != l.bias.len() {
            return Err(contract("gradient shapes do not match the network"));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimizer("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    let lr = state.step_size;
    let eps = state.epsilon;
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    mlp.generation += 1;
    for (i, layer) in mlp.layers.iter_mut().enumerate() {
        let g = &grads.layers[i];
        let m = &mut state.first.layers[i];
        let v = &mut state.second.layers[i];
        ndarray::Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// target ← (1 − mix)·target + mix·online
pub fn soft_update(target: &mut Mlp, online: &Mlp, mix: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(contract(format!("soft-update mix {mix} outside [0, 1]")));
    }
    if target.layer_dims() != online.layer_dims() {
        return Err(contract("soft update between networks of different shapes"));
    }
    target.generation += 1;
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        t.weights.zip_mut_with(&o.weights, |a, &b| *a = (1.0 - mix) * *a + mix * b);
        t.bias.zip_mut_with(&o.bias, |a, &b| *a = (1.0 - mix) * *a + mix * b);
    }
    Ok(())
}

/// Convenience for a single sample.
pub fn forward_one(mlp: &Mlp, input: ArrayView1<f64>) -> Result<Array1<f64>> {
    let x = input.insert_axis(Axis(0));
    Ok(mlp.forward_batch(x)?.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_net_tanh_is_zero() {
        let mut mlp = Mlp::seeded(&[3, 4, 2], Activation::Tanh, 1.0, 1).unwrap();
        mlp.params_mut().for_each(|p| *p = 0.0);
        assert_eq!(mlp.forward(&[0.3, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let layer = Dense { weights: Array2::eye(3), bias: Array1::zeros(3) };
        let mlp = Mlp::from_layers(vec![layer], Activation::Relu, Activation::Identity).unwrap();
        assert_eq!(mlp.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn dimension_mismatch() {
        let mlp = Mlp::seeded(&[3, 4, 2], Activation::Tanh, 1.0, 1).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_linear_layer_gradient_closed_form() {
        let layer = Dense { weights: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], bias: array![0.0, 0.0, 0.0] };
        let mlp = Mlp::from_layers(vec![layer], Activation::Relu, Activation::Identity).unwrap();
        let x = array![[0.5, -1.5]];
        let g = array![[1.0, -2.0, 0.5]];
        let cache = mlp.forward_cached(x.view()).unwrap();
        let (grads, dx) = mlp.backward(&cache, g.view()).unwrap();
        // dW = g^T x
        let expected = g.t().dot(&x);
        assert_eq!(grads.layers[0].weights, expected);
        assert_eq!(grads.layers[0].bias, array![1.0, -2.0, 0.5]);
        assert_eq!(dx, g.dot(&mlp.layers[0].weights));
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mlp = Mlp::seeded(&[4, 8, 3], Activation::Tanh, 1.0, 9).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4]];
        let cache = mlp.forward_cached(x.view()).unwrap();
        let (grads, dx) = mlp.backward(&cache, Array2::zeros((1, 3)).view()).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
        assert!(dx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut mlp = Mlp::seeded(&[2, 3, 1], Activation::Identity, 1.0, 2).unwrap();
        let x = array![[1.0, 2.0]];
        let cache = mlp.forward_cached(x.view()).unwrap();
        let grads = mlp.backward(&cache, array![[1.0]].view()).unwrap().0;
        let mut adam = AdamState::new(&mlp, 0.01);
        adam_step(&mut mlp, &grads, &mut adam).unwrap();
        assert!(matches!(mlp.backward(&cache, array![[1.0]].view()), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut mlp = Mlp::seeded(&[2, 3, 1], Activation::Identity, 1.0, 2).unwrap();
        let before = mlp.clone();
        let mut adam = AdamState::new(&mlp, 0.01);
        let zero = Gradients::zeros_like(&mlp);
        for _ in 0..5 {
            adam_step(&mut mlp, &zero, &mut adam).unwrap();
        }
        assert!(mlp.params().zip(before.params()).all(|(a, b)| a == b));
    }

    #[test]
    fn adam_first_step_magnitude_is_step_size() {
        let mut mlp = Mlp::seeded(&[2, 1], Activation::Identity, 1.0, 2).unwrap();
        let before: Vec<f64> = mlp.params().copied().collect();
        let mut adam = AdamState::new(&mlp, 0.01);
        let mut g = Gradients::zeros_like(&mlp);
        g.layers[0].weights = array![[0.3, -7.0]];
        g.layers[0].bias = array![1e-3];
        adam_step(&mut mlp, &g, &mut adam).unwrap();
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let grads = [0.3, -7.0, 1e-3];
        for ((after, b), g) in mlp.params().zip(&before).zip(grads) {
            let expected = b - 0.01 * g / (f64::abs(g) + 1e-8);
            assert!((after - expected).abs() < 1e-15);
            assert!(((after - b).abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_constant_gradient_descends() {
        let mut mlp = Mlp::seeded(&[1, 1], Activation::Identity, 1.0, 2).unwrap();
        let w0 = mlp.layers[0].weights[[0, 0]];
        let mut adam = AdamState::new(&mlp, 0.001);
        let mut g = Gradients::zeros_like(&mlp);
        g.layers[0].weights[[0, 0]] = 2.5;
        for _ in 0..100 {
            adam_step(&mut mlp, &g, &mut adam).unwrap();
        }
        assert!(mlp.layers[0].weights[[0, 0]] < w0 - 0.05);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut mlp = Mlp::seeded(&[1, 1], Activation::Identity, 1.0, 2).unwrap();
        let mut adam = AdamState::new(&mlp, 0.001);
        let mut g = Gradients::zeros_like(&mlp);
        g.layers[0].bias[0] = f64::NAN;
        assert!(matches!(adam_step(&mut mlp, &g, &mut adam), Err(Error::Optimizer(_))));
    }

    #[test]
    fn soft_update_cases() {
        let online = Mlp::seeded(&[2, 2], Activation::Identity, 1.0, 5).unwrap();
        let mut target = online.clone();
        target.params_mut().for_each(|p| *p = 0.0);
        let zeroed = target.clone();
        soft_update(&mut target, &online, 0.0).unwrap();
        assert!(target.params().zip(zeroed.params()).all(|(a, b)| a == b));
        soft_update(&mut target, &online, 1.0).unwrap();
        assert!(target.params().zip(online.params()).all(|(a, b)| a == b));

        let mut t = online.clone();
        t.params_mut().for_each(|p| *p = 0.0);
        let mut o = online.clone();
        o.params_mut().for_each(|p| *p = 2.0);
        soft_update(&mut t, &o, 0.5).unwrap();
        assert!(t.params().all(|&p| p == 1.0));

        let other = Mlp::seeded(&[2, 3], Activation::Identity, 1.0, 5).unwrap();
        assert!(matches!(soft_update(&mut t, &other, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_layout() {
        let mlp = Mlp::seeded(&[3, 4, 2], Activation::Tanh, 0.1, 4).unwrap();
        let bytes = mlp.to_bytes();
        assert_eq!(&bytes[..8], b"HNRNMLP\0");
        assert_eq!(bytes.len(), 8 + 8 * (2 + 3 + 2) + 8 * mlp.param_count());
        let back = Mlp::from_bytes(&bytes).unwrap();
        assert_eq!(back.layer_dims(), vec![3, 4, 2]);
        assert!(back.params().zip(mlp.params()).all(|(a, b)| a == b));
        assert_eq!(back.output, Activation::Tanh);
        assert!(Mlp::from_bytes(&bytes[1..]).is_err());
    }
}
