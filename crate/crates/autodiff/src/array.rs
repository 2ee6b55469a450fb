use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Gradients, Var};

/// Dense row-major array that can be enrolled on a [`crate::Tape`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiffArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    node: Option<Var>,
}

impl<T: Real> DiffArray<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return shape_err("DiffArray::new", format!("zero-sized dimension in {shape:?}"));
        }
        if numel != data.len() {
            return shape_err(
                "DiffArray::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None, node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    /// Marks the array as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn node(&self) -> Option<Var> {
        self.node
    }

    pub(crate) fn set_node(&mut self, node: Option<Var>) {
        self.node = node;
    }

    /// Copies this array's gradient out of a finished backward pass and
    /// detaches it from the tape. Returns whether a gradient was found.
    pub fn absorb_grad(&mut self, grads: &Gradients<T>) -> bool {
        let found = match self.node.and_then(|v| grads.get(v)) {
            Some(g) if self.requires_grad => {
                debug_assert_eq!(g.len(), self.data.len());
                self.grad = Some(g.to_vec());
                true
            }
            _ => false,
        };
        self.node = None;
        found
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err("DiffArray::set_grad", "gradient length differs from data");
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Converts element type, dropping gradient and tape state.
    pub fn cast<U: Real>(&self) -> DiffArray<U> {
        DiffArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            requires_grad: self.requires_grad,
            grad: None,
            node: None,
        }
    }
}
