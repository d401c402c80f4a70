use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;

/// Dense row-major tensor. Cloning is cheap (shared storage); mutation
/// copies on write.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![F::zero(); n]) }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; n]) }
    }

    /// Gaussian init with the given standard deviation. Samples are drawn
    /// in f64 then converted, so the stream is identical across precisions.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::of(z * std)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// First-dimension extent (rows for 2-D tensors).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Second-dimension extent.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn from_f64(shape: &[usize], vals: &[f64]) -> Self {
        Tensor::new(shape.to_vec(), vals.iter().map(|&v| F::of(v)).collect())
    }

    /// Elementwise accumulate: self += other.
    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + *s;
        }
    }

    /// Squared L2 norm of all elements, accumulated in f64.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|v| { let x = v.f64(); x * x }).sum()
    }
}

/// A named, optionally trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of uniquely named parameters. Order is creation
/// order and is stable, which keeps optimizer state aligned.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<F>) -> ParamId {
        self.add_with(name, tensor, true)
    }

    pub fn add_frozen(&mut self, name: &str, tensor: Tensor<F>) -> ParamId {
        self.add_with(name, tensor, false)
    }

    fn add_with(&mut self, name: &str, tensor: Tensor<F>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter { name: name.to_string(), tensor, trainable });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}
