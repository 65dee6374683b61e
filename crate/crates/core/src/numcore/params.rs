//! Named parameter collections.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Gradients keyed by parameter name. Ordered so that accumulation and
/// optimizer updates are reproducible.
pub type GradMap = BTreeMap<String, Tensor>;

/// Named map from parameter name to tensor. Names are unique and shapes
/// are fixed after insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::InvalidConfig {
                detail: format!("duplicate parameter name `{name}`"),
            });
        }
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    /// Replaces the value of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            None => Err(Error::InvalidConfig {
                detail: format!("unknown parameter `{name}`"),
            }),
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "ParamSet::set",
                        detail: format!(
                            "`{name}`: {:?} vs {:?}",
                            slot.shape(),
                            tensor.shape()
                        ),
                    });
                }
                *slot = tensor;
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<&String> {
        self.map.keys().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn names_are_unique() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0])).unwrap();
        assert!(p.insert("w", Tensor::vector(vec![2.0])).is_err());
    }

    #[test]
    fn shapes_fixed_after_creation() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        assert!(p.set("w", Tensor::vector(vec![0.0; 4])).is_err());
        assert!(p.set("w", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).is_ok());
        assert!(p.set("v", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn iteration_is_name_ordered() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(0.0)).unwrap();
        p.insert("a", Tensor::scalar(0.0)).unwrap();
        let names: Vec<_> = p.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
