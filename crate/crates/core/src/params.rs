//! Named parameter blocks and the shape-matched sets built from them.
//!
//! Network parameters, gradients, importance values and anchors all share the
//! [`ParamSet`] layout so they can be combined entrywise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor1, Tensor2};

/// Prefix shared by the classification-head blocks, the only blocks allowed
/// to grow between tasks.
pub const HEAD_PREFIX: &str = "fc.";
pub const HEAD_WEIGHT: &str = "fc.weight";
pub const HEAD_BIAS: &str = "fc.bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamValue {
    Matrix(Tensor2),
    Vector(Tensor1),
}

impl ParamValue {
    /// `(rows, cols)`; a vector of length `n` reports `(n, 1)`.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            ParamValue::Matrix(m) => (m.rows(), m.cols()),
            ParamValue::Vector(v) => (v.len(), 1),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            ParamValue::Matrix(m) => m.as_slice(),
            ParamValue::Vector(v) => v.as_slice(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            ParamValue::Matrix(m) => m.as_mut_slice(),
            ParamValue::Vector(v) => v.as_mut_slice(),
        }
    }

    pub fn zeros_like(&self) -> ParamValue {
        match self {
            ParamValue::Matrix(m) => ParamValue::Matrix(Tensor2::zeros(m.rows(), m.cols())),
            ParamValue::Vector(v) => ParamValue::Vector(Tensor1::zeros(v.len())),
        }
    }

    fn same_kind(&self, other: &ParamValue) -> bool {
        matches!(
            (self, other),
            (ParamValue::Matrix(_), ParamValue::Matrix(_)) | (ParamValue::Vector(_), ParamValue::Vector(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub value: ParamValue,
}

impl ParamBlock {
    pub fn matrix(name: impl Into<String>, m: Tensor2) -> Self {
        Self {
            name: name.into(),
            value: ParamValue::Matrix(m),
        }
    }

    pub fn vector(name: impl Into<String>, v: Tensor1) -> Self {
        Self {
            name: name.into(),
            value: ParamValue::Vector(v),
        }
    }

    pub fn is_head(&self) -> bool {
        self.name.starts_with(HEAD_PREFIX)
    }
}

/// An ordered collection of uniquely named parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

/// Gradients share the parameter layout.
pub type GradientSet = ParamSet;

impl ParamSet {
    pub fn new(blocks: Vec<ParamBlock>) -> Result<Self> {
        for (i, b) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::invalid(format!("duplicate parameter block '{}'", b.name)));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    /// Mutable access to the values of every block, in order. Shapes stay fixed.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut [f64]> + '_ {
        self.blocks.iter_mut().map(|b| b.value.as_mut_slice())
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    value: b.value.zeros_like(),
                })
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.blocks.iter().map(|b| b.value.as_slice().len()).sum()
    }

    /// True when both sets have the same block names, kinds and shapes, in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.name == b.name && a.value.same_kind(&b.value) && a.value.shape() == b.value.shape()
            })
    }

    pub(crate) fn check_layout(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!("{what}: parameter layouts differ")))
        }
    }

    /// `self += other` entrywise. Layouts must match.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.check_layout(other, "add")?;
        self.zip_apply(other, |a, b| *a += b);
        Ok(())
    }

    /// `self += alpha * other` entrywise. Layouts must match.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other, "axpy")?;
        self.zip_apply(other, |a, b| *a += alpha * b);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.map_inplace(|v| *v *= s);
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(&mut f64)) {
        for b in &mut self.blocks {
            b.value.as_mut_slice().iter_mut().for_each(&mut f);
        }
    }

    fn zip_apply(&mut self, other: &ParamSet, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, &y) in a.value.as_mut_slice().iter_mut().zip(b.value.as_slice()) {
                f(x, y);
            }
        }
    }

    /// Iterates over every scalar as `(block, flat index, value)`.
    pub fn iter_entries(&self) -> impl Iterator<Item = (&ParamBlock, usize, f64)> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| b.value.as_slice().iter().enumerate().map(move |(i, &v)| (b, i, v)))
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_entries().map(|(_, _, v)| v.abs()).fold(0.0, f64::max)
    }
}

/// How many leading entries of `current` correspond to `reference`.
///
/// Blocks of identical shape overlap completely. A head block may have gained
/// rows since `reference` was taken; the original rows come first in row-major
/// order, so the overlap is a prefix. Any other difference is a layout conflict.
pub(crate) fn anchored_prefix(reference: &ParamBlock, current: &ParamBlock) -> Result<usize> {
    let (rr, rc) = reference.value.shape();
    let (cr, cc) = current.value.shape();
    if (rr, rc) == (cr, cc) && reference.value.same_kind(&current.value) {
        return Ok(rr * rc);
    }
    if current.is_head() && reference.value.same_kind(&current.value) && rc == cc && cr >= rr {
        return Ok(rr * rc);
    }
    Err(Error::invalid(format!(
        "block '{}' changed shape from {rr}x{rc} to {cr}x{cc} outside head growth",
        current.name
    )))
}

/// Pairs blocks of `current` with their counterparts in `reference` by name,
/// yielding the anchored prefix length. Blocks missing from `reference` are
/// reported with prefix 0; blocks of `reference` missing from `current` are
/// an error.
pub(crate) fn align<'a>(
    reference: &'a ParamSet,
    current: &'a ParamSet,
) -> Result<Vec<(Option<&'a ParamBlock>, &'a ParamBlock, usize)>> {
    for r in reference.blocks() {
        if current.get(&r.name).is_none() {
            return Err(Error::invalid(format!("block '{}' missing from current parameters", r.name)));
        }
    }
    current
        .blocks()
        .iter()
        .map(|c| match reference.get(&c.name) {
            Some(r) => anchored_prefix(r, c).map(|n| (Some(r), c, n)),
            None => Ok((None, c, 0)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(rows: usize, cols: usize, fill: f64) -> ParamBlock {
        ParamBlock::matrix(HEAD_WEIGHT, Tensor2::new(rows, cols, vec![fill; rows * cols]).unwrap())
    }

    #[test]
    fn duplicate_names_rejected() {
        let b = ParamBlock::vector("a", Tensor1::zeros(1));
        assert!(ParamSet::new(vec![b.clone(), b]).is_err());
    }

    #[test]
    fn head_growth_is_a_prefix() {
        assert_eq!(anchored_prefix(&head(2, 3, 0.0), &head(4, 3, 0.0)).unwrap(), 6);
        assert!(anchored_prefix(&head(4, 3, 0.0), &head(2, 3, 0.0)).is_err());
        assert!(anchored_prefix(&head(2, 3, 0.0), &head(2, 4, 0.0)).is_err());
        let hidden = |r| ParamBlock::matrix("hidden0.weight", Tensor2::zeros(r, 2));
        assert!(anchored_prefix(&hidden(2), &hidden(3)).is_err());
    }

    #[test]
    fn add_and_axpy() {
        let mut a = ParamSet::new(vec![head(1, 2, 1.0)]).unwrap();
        let b = ParamSet::new(vec![head(1, 2, 2.0)]).unwrap();
        a.add_assign(&b).unwrap();
        a.axpy(-0.5, &b).unwrap();
        assert_eq!(a.blocks()[0].value.as_slice(), &[2.0, 2.0]);
        let c = ParamSet::new(vec![head(2, 2, 0.0)]).unwrap();
        assert!(a.add_assign(&c).is_err());
    }
}
