use ndarray::ArrayD;

use crate::{Gradients, Scalar, Var};

/// A named trainable tensor.
///
/// Each parameter is exposed to the graph as a fresh leaf; after an update
/// the leaf is replaced, so gradients from older graphs never alias it.
pub struct Parameter<T: Scalar> {
    name: String,
    var: Var<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        Parameter {
            name: name.into(),
            var: Var::leaf(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn var(&self) -> &Var<T> {
        &self.var
    }

    pub fn value(&self) -> &ArrayD<T> {
        self.var.value()
    }

    pub fn len(&self) -> usize {
        self.var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.var.is_empty()
    }

    pub fn set_value(&mut self, value: ArrayD<T>) {
        assert_eq!(
            value.shape(),
            self.var.shape(),
            "shape change for parameter {}",
            self.name
        );
        self.var = Var::leaf(value);
    }

    pub fn grad<'g>(&self, grads: &'g Gradients<T>) -> Option<&'g ArrayD<T>> {
        grads.get(&self.var)
    }
}

impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        Parameter::new(self.name.clone(), self.value().clone())
    }
}

impl<T: Scalar> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.var.shape())
            .finish()
    }
}
