//! Parameter storage and convolution layers shared by every model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{Real, Shape, Tensor3};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor3<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor3<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor3<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor3<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor3<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor3<T>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor3::len).sum()
    }

    /// Replaces every value, checking names and shapes against the current layout.
    pub fn load(&mut self, entries: Vec<(String, Tensor3<T>)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (i, (name, value)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is `{name}`, expected `{}`",
                    self.names[i]
                )));
            }
            if value.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {}, expected {}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| graph.leaf(v.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor3::cast).collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`] bound to one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles created elsewhere, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Shape, bound: f64) -> Tensor3<T> {
    let data = (0..shape.len())
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor3::new(shape, data).expect("generated length matches shape")
}

/// Bias tensors are stored as `[1, 1, channels]`.
pub fn bias_shape(channels: usize) -> Shape {
    Shape::new(1, 1, channels)
}

/// 1-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv1d {
    /// Kaiming-uniform init with fan-in `in_ch / groups * kernel`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch / spec.groups * kernel).max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform(rng, Shape::new(out_ch, in_ch / spec.groups, kernel), bound);
        let b = uniform(rng, bias_shape(out_ch), bound);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            spec,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }

    /// Tape-free evaluation.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        kernels::conv1d(
            x,
            store.get(self.weight),
            Some(store.get(self.bias).data()),
            self.spec,
        )
    }
}

/// 1-D transposed convolution layer; weight is `(in_ch, out_ch, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    /// Kaiming-uniform init; each output sample sees about `in_ch * kernel / stride` inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel.div_ceil(stride)).max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform(rng, Shape::new(in_ch, out_ch, kernel), bound);
        let b = uniform(rng, bias_shape(out_ch), bound);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose1d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            self.stride,
            self.padding,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        assert_eq!(store.count(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv1d::new(&mut store, "c", 8, 16, 3, ConvSpec::new(1, 1), &mut rng);
        assert_eq!(store.count(), 16 * (8 * 3 + 1));
        assert_eq!(store.names(), &["c.weight".to_string(), "c.bias".to_string()]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Conv1d::new(&mut store, "c", 4, 4, 5, ConvSpec::new(1, 2), &mut rng);
            store
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
        let bound = 1.0 / 20f32.sqrt();
        assert!(build(3).values()[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn load_validates_layout() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor3::zeros(Shape::new(1, 1, 2)));
        let wrong_shape = vec![("a".to_string(), Tensor3::zeros(Shape::new(1, 1, 3)))];
        assert!(store.load(wrong_shape).is_err());
        let wrong_name = vec![("b".to_string(), Tensor3::zeros(Shape::new(1, 1, 2)))];
        assert!(store.load(wrong_name).is_err());
        let ok = vec![("a".to_string(), Tensor3::full(Shape::new(1, 1, 2), 1.0))];
        store.load(ok).unwrap();
        assert_eq!(store.values()[0].data(), &[1.0, 1.0]);
    }
}
