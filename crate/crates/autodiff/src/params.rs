use crate::error::{AutodiffError, Result};
use crate::graph::Graph;
use crate::real::Real;
use crate::tensor::Tensor;

/// Named parameter tensors, ordered like the parameters of the graph they were made for.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Zero-filled parameters matching every parameter node of `graph`.
    pub fn zeros_for(graph: &Graph<T>) -> Self {
        let mut set = Self::new();
        for (name, shape) in graph.parameter_specs() {
            set.names.push(name);
            set.tensors.push(Tensor::zeros(&shape));
        }
        set
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(AutodiffError::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Checks that names and shapes line up with the parameters of `graph`.
    pub fn check_against(&self, graph: &Graph<T>) -> Result<()> {
        for (name, shape) in graph.parameter_specs() {
            let t = self
                .get(&name)
                .ok_or_else(|| AutodiffError::UnknownParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "parameters",
                    detail: format!("`{name}` expects {shape:?}, found {:?}", t.shape()),
                });
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}
