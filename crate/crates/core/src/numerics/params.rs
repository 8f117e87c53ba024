use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::error::{NumericsError, Result};
use super::tensor::Tensor;

const HEADER: &str = "paramgroup v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named tensors with a trainable flag each. Names are kept in sorted order,
/// which fixes iteration order for optimizers and serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(NumericsError::Invalid {
                op: "ParamGroup::insert",
                msg: format!("invalid parameter name {name:?}"),
            });
        }
        if self.entries.contains_key(name) {
            return Err(NumericsError::DuplicateName(name.to_string()));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| NumericsError::UnknownName(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| NumericsError::UnknownName(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Serializes to the versioned text format:
    ///
    /// ```text
    /// paramgroup v1
    /// <name> <0|1> shape=<d0>,<d1>,... : <v0> <v1> ...
    /// ```
    ///
    /// Values use Rust's shortest round-trip formatting, so parsing the text
    /// reproduces every value bit for bit.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 * self.numel() + 64);
        out.push_str(HEADER);
        out.push('\n');
        for (name, entry) in &self.entries {
            let shape: Vec<String> = entry.tensor.shape().iter().map(|d| d.to_string()).collect();
            let _ = write!(out, "{} {} shape={} :", name, u8::from(entry.trainable), shape.join(","));
            for v in entry.tensor.data() {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => {
                return Err(NumericsError::Parse {
                    line: 1,
                    msg: format!("expected header `{HEADER}`"),
                })
            }
        }
        let mut group = ParamGroup::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let err = |msg: String| NumericsError::Parse { line: line_no, msg };
            if line.trim().is_empty() {
                continue;
            }
            let (head, values) = line
                .split_once(" :")
                .ok_or_else(|| err("missing ` :` separator".into()))?;
            let mut parts = head.split_whitespace();
            let name = parts.next().ok_or_else(|| err("missing name".into()))?;
            let trainable = match parts.next() {
                Some("1") => true,
                Some("0") => false,
                other => return Err(err(format!("bad trainable flag {other:?}"))),
            };
            let shape_field = parts
                .next()
                .and_then(|s| s.strip_prefix("shape="))
                .ok_or_else(|| err("missing shape=".into()))?;
            let shape = if shape_field.is_empty() {
                Vec::new()
            } else {
                shape_field
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|e| err(format!("bad dim {d:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            let data = values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data).map_err(|e| err(e.to_string()))?;
            group
                .insert(name, tensor, trainable)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(group)
    }
}
