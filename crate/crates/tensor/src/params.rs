use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Named trainable tensors. Ordered by name so iteration and checkpoints are
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Moves every parameter of `other` into `self`, prefixing the names.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.params {
            self.params.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Parameters whose name starts with `prefix`, prefix kept.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Serializes as `{"params": {name: {"shape": [...], "data": [...]}}}`.
    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            params: self.params.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("tensors always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, TensorError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let mut params = BTreeMap::new();
        for (name, t) in ck.params {
            // Re-validate: deserialization bypasses the constructor.
            let t = Tensor::new(t.shape().to_vec(), t.into_data())
                .map_err(|e| TensorError::Checkpoint(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    params: BTreeMap<String, Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_schema() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::matrix(1, 2, vec![0.1, -2.5]).unwrap());
        let json = p.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["params"]["w"]["shape"], serde_json::json!([1, 2]));
        assert_eq!(v["params"]["w"]["data"], serde_json::json!([0.1, -2.5]));
        assert_eq!(ParamStore::from_json(&json).unwrap(), p);
    }

    #[test]
    fn checkpoint_rejects_inconsistent_shape() {
        let bad = r#"{"params": {"w": {"shape": [2, 2], "data": [1.0]}}}"#;
        assert!(ParamStore::from_json(bad).is_err());
    }
}
