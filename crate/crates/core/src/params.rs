//! Named parameter collections and the directory checkpoint format.
//!
//! A checkpoint directory holds one `TNSR/1` file per entry plus a plain-text
//! `manifest.txt` with one line per entry: `name<TAB>file<TAB>shape`, where the
//! shape is written as extents joined by `x` (for example `3x3x16x32`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MANIFEST: &str = "manifest.txt";

/// Ordered map from parameter name to tensor. Trainable entries have `requires_grad`;
/// running statistics and other buffers do not.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Float = f64> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad)
            .map(|t| t.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Freezes every entry (used for teachers during distillation).
    pub fn freeze(&mut self) {
        self.entries.values_mut().for_each(|t| t.requires_grad = false);
    }

    /// Adds one backward pass worth of gradients into the trainable entries.
    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients<T>) {
        for (name, g) in grads.params() {
            let (Some(g), Some(t)) = (g, self.entries.get_mut(name)) else { continue };
            if t.requires_grad {
                t.accumulate_grad(g);
            }
        }
    }

    /// Overwrites buffer values (running statistics) produced by a forward pass.
    pub fn apply_updates(&mut self, updates: Vec<(String, Vec<T>)>) -> Result<()> {
        for (name, v) in updates {
            let t = self.get_mut(&name)?;
            if t.len() != v.len() {
                return Err(Error::Shape(format!("buffer update for `{name}` has wrong length")));
            }
            t.data_mut().copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Merges `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet<T>) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v);
        }
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, t) in &self.entries {
            let file = format!("{name}.tnsr");
            t.save(dir.join(&file))?;
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let trainable = if t.requires_grad { "" } else { "\tbuffer" };
            writeln!(manifest, "{name}\t{file}\t{}{trainable}", shape.join("x")).unwrap();
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                return Err(Error::Format(format!("manifest line {}: `{line}`", lineno + 1)));
            }
            let shape: Vec<usize> = fields[2]
                .split('x')
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad shape `{}`", fields[2]))))
                .collect::<Result<_>>()?;
            let mut t = Tensor::<T>::load(dir.join(fields[1]))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "`{}` stored as {:?}, manifest says {shape:?}",
                    fields[0],
                    t.shape()
                )));
            }
            t.requires_grad = fields.get(3) != Some(&"buffer");
            out.insert(fields[0], t);
        }
        Ok(out)
    }
}
