//! Parameters, layers and the Adam optimizer on top of [`crate::autograd`].
//!
//! Parameter values live in a [`ParamStore`] (thread-safe, shareable). A forward
//! pass borrows the store through a [`Session`], which binds each parameter to a
//! graph leaf exactly once so that a module used several times in one pass
//! accumulates its gradients.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvOpts, Gradients, Var};
use crate::real::Real;

/// A named tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) {
        let t = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(t.numel(), data.len(), "set_data: size of {name}");
        t.data = Arc::new(data);
    }

    /// Copies every parameter of `other` whose name starts with `prefix`.
    pub fn import_prefix(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
            n += 1;
        }
        n
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }
}

/// Binding of a parameter store to one forward graph.
pub struct Session<'a, T: Real> {
    store: &'a ParamStore<T>,
    train: bool,
    frozen: Vec<String>,
    bound: RefCell<HashMap<String, Var<T>>>,
}

impl<'a, T: Real> Session<'a, T> {
    /// Inference session: no parameter gradients are recorded.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self { store, train: false, frozen: Vec::new(), bound: RefCell::new(HashMap::new()) }
    }

    /// Training session: every parameter is a gradient leaf.
    pub fn training(store: &'a ParamStore<T>) -> Self {
        Self { store, train: true, frozen: Vec::new(), bound: RefCell::new(HashMap::new()) }
    }

    /// Parameters whose names start with any of `prefixes` are bound without gradients.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen.extend(prefixes.iter().map(|s| s.to_string()));
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str) -> Var<T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return v.clone();
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        let grad = self.train && !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = Var::from_shared(t.shape.clone(), Arc::clone(&t.data), grad);
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Collects gradients of every bound parameter from a backward sweep.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Vec<T>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Square-kernel 2-d convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub opts: ConvOpts,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, opts: ConvOpts) -> Self {
        Self { name: name.into(), in_channels, out_channels, kernel, opts }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-uniform weights, zero bias.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        self.init_uniform(store, rng, bound);
    }

    pub fn init_uniform<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, bound: f64) {
        let n = self.out_channels * self.in_channels * self.kernel * self.kernel;
        let w = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        store.insert(
            self.weight_name(),
            Tensor::new(vec![self.out_channels, self.in_channels, self.kernel, self.kernel], w),
        );
        store.insert(self.bias_name(), Tensor::new(vec![self.out_channels], vec![T::zero(); self.out_channels]));
    }

    /// All-zero weights and bias (the layer outputs zero at initialization).
    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        let n = self.out_channels * self.in_channels * self.kernel * self.kernel;
        store.insert(
            self.weight_name(),
            Tensor::new(vec![self.out_channels, self.in_channels, self.kernel, self.kernel], vec![T::zero(); n]),
        );
        store.insert(self.bias_name(), Tensor::new(vec![self.out_channels], vec![T::zero(); self.out_channels]));
    }

    pub fn forward<T: Real>(&self, s: &Session<'_, T>, x: &Var<T>) -> Var<T> {
        let w = s.param(&self.weight_name());
        let b = s.param(&self.bias_name());
        x.conv2d(&w, Some(&b), self.opts)
    }

    /// Deformable forward; only valid for 3×3 same-padding layers.
    pub fn forward_deformable<T: Real>(&self, s: &Session<'_, T>, x: &Var<T>, offsets: &Var<T>) -> Var<T> {
        assert_eq!((self.kernel, self.opts), (3, ConvOpts::same(3)), "deformable layers are 3x3 same");
        let w = s.param(&self.weight_name());
        let b = s.param(&self.bias_name());
        x.deform_conv3x3(offsets, &w, Some(&b))
    }
}

/// Slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.1;

pub fn lrelu<T: Real>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(T::lit(LEAKY_SLOPE))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer with bias-corrected moments, no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    /// Learning-rate multipliers by parameter-name prefix; the longest match wins.
    lr_scale: Vec<(String, f64)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new(), lr_scale: Vec::new() }
    }

    /// Multiplies the learning rate of parameters under `prefix` by `factor`.
    pub fn with_lr_scale(mut self, prefix: impl Into<String>, factor: f64) -> Self {
        self.lr_scale.push((prefix.into(), factor));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.lr_scale
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.config.lr, |(_, f)| self.config.lr * f)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(t) = store.get(name) else { continue };
            let lr = self.lr_for(name);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data: Vec<T> = t.data.as_ref().clone();
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                data[i] -= T::lit(update);
            }
            store.set_data(name, data);
        }
    }
}

/// Global gradient norm, used by the training divergence guard.
pub fn grad_norm<T: Real>(grads: &BTreeMap<String, Vec<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter().map(|v| v.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm does not exceed `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}
