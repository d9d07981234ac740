//! Named parameters and the traversal trait shared by every layer and model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Weights are optimized; buffers (running statistics) are state that is
/// saved with the model but never receives a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

impl Parameter {
    pub fn weight(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            kind: ParamKind::Weight,
        }
    }

    pub fn buffer(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(false),
            kind: ParamKind::Buffer,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Weight && self.tensor.requires_grad()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter values by name. Buffers are shared with the model until one
/// side writes.
pub type Snapshot = BTreeMap<String, Tensor>;

pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.name.clone()));
        out
    }

    /// Total scalar count of trainable weights.
    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.is_trainable() {
                n += p.tensor.numel();
            }
        });
        n
    }

    fn set_trainable(&mut self, flag: bool) {
        self.visit_mut(&mut |p| {
            if p.kind == ParamKind::Weight {
                p.tensor.set_requires_grad(flag);
            }
        });
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.tensor.zero_grad());
    }

    fn snapshot(&self) -> Snapshot {
        let mut out = Snapshot::new();
        self.visit(&mut |p| {
            let mut t = p.tensor.clone();
            t.zero_grad();
            out.insert(p.name.clone(), t);
        });
        out
    }

    /// Overwrites every parameter from `snap`; names and shapes must match.
    fn restore(&mut self, snap: &Snapshot) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match snap.get(&p.name) {
                Some(t) if t.shape() == p.tensor.shape() => {
                    let trainable = p.tensor.requires_grad();
                    p.tensor = t.clone().with_requires_grad(trainable);
                }
                Some(t) => err = Some(Error::dim("restore", p.tensor.shape(), t.shape())),
                None => {
                    err = Some(Error::contract(
                        "restore",
                        format!("snapshot has no entry for {}", p.name),
                    ))
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}
