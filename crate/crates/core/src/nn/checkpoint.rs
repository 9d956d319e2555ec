use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named tensors plus a stage tag, stored as JSON (floats round-trip exactly).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            config_hash: None,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<P: Parameters + ?Sized>(&mut self, prefix: &str, params: &P) {
        params.visit(prefix, &mut |name, t| {
            self.tensors.insert(name.to_string(), t.clone());
        });
    }

    pub fn from_params<P: Parameters + ?Sized>(tag: &str, params: &P) -> Self {
        let mut c = Self::new(tag);
        c.insert("", params);
        c
    }

    /// Copies stored tensors into `params`; every name must exist with the same shape.
    pub fn load_into<P: Parameters + ?Sized>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let mut err = None;
        params.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => {
                    err = Some(Error::State {
                        stage: self.tag.clone(),
                        detail: format!("checkpoint lacks tensor `{name}`"),
                    })
                }
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::shape(
                        format!("checkpoint tensor `{name}`"),
                        format!("{:?}", t.shape()),
                        format!("{:?}", src.shape()),
                    ))
                }
                Some(src) => t.data_mut().copy_from_slice(src.data()),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        for (name, t) in &c.tensors {
            let n: usize = t.shape().iter().product();
            if n != t.len() {
                return Err(Error::shape(format!("checkpoint tensor `{name}`"), n, t.len()));
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
