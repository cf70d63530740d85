//! Named-tensor container serialized as JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "scaforge-tensors/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat list of named tensors plus free-form string metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let nt = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| GradError::Checkpoint(format!("missing tensor {name}")))?;
        Tensor::new(nt.shape.clone(), nt.data.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s).map_err(|e| GradError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(GradError::Checkpoint(format!("unsupported format {}", ck.format)));
        }
        for t in &ck.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(GradError::Checkpoint(format!("tensor {} has inconsistent shape", t.name)));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| GradError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| GradError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut ck = Checkpoint::default();
        ck.meta.insert("trained".into(), "true".into());
        ck.push("w", &Tensor::matrix(2, 2, vec![1.0, -0.5, 1e-300, 3.25]).unwrap());
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("w").unwrap().shape(), &[2, 2]);
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let bad = r#"{"format":"scaforge-tensors/1","tensors":[{"name":"x","shape":[3],"data":[1.0]}]}"#;
        assert!(Checkpoint::from_json(bad).is_err());
    }
}
