use rand::Rng;

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable array with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered parameter set of a model. Order is construction order and is the
/// serialization order of checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    grads_populated: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            grads_populated: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter shape");
        let grad = vec![T::zero(); value.len()];
        self.params.push(Parameter {
            name: name.into(),
            shape,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
        self.grads_populated = false;
    }

    /// Marks gradients as written for the current step (set by backward).
    pub fn mark_grads_populated(&mut self) {
        self.grads_populated = true;
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].grad
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|&v| U::of(v.f64())).collect(),
                    grad: p.grad.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect(),
            grads_populated: self.grads_populated,
        }
    }

    /// Copies values (not gradients) from a store with identical layout.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.params.len(), other.params.len(), "parameter layout");
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(a.shape, b.shape, "parameter {} shape", a.name);
            a.value.copy_from_slice(&b.value);
        }
    }
}

/// A convolution layer: weights `(c_out, c_in, k, k, k)` plus bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvLayer {
    /// Registers a convolution with He-style uniform fan-in initialization
    /// (`U(-√(6/fan_in), √(6/fan_in))`) and zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * k * k * k).max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = c_out * c_in * k * k * k;
        let w = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        let weight = store.add(format!("{name}.weight"), vec![c_out, c_in, k, k, k], w);
        let bias = store.add(format!("{name}.bias"), vec![c_out], vec![T::zero(); c_out]);
        Self {
            weight,
            bias,
            c_in,
            c_out,
            k,
        }
    }
}

/// Instance-norm affine parameters (γ = 1, β = 0 at init).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl NormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        let beta = store.add(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
        Self {
            gamma,
            beta,
            channels,
        }
    }
}
