//! Flat parameter vectors and the depth-wise fragmentation scheme.
//!
//! All model parameters live in one [`ParamVector`]. A [`FragmentationSpec`]
//! groups whole layers into `K` disjoint fragments using a strided
//! assignment (layer `i` goes to fragment `i mod K`); a [`FragmentView`] is
//! the resulting index set into the flat vector.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat vector of model parameters.
///
/// Arithmetic is elementwise and evaluated left to right so results are
/// bit-identical across runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        ParamVector(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_len(&self, other: &ParamVector) {
        assert_eq!(
            self.len(),
            other.len(),
            "parameter vectors differ in length"
        );
    }

    /// `self + other`
    pub fn add(&self, other: &ParamVector) -> ParamVector {
        self.check_len(other);
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self - other`
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.check_len(other);
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * factor).collect())
    }

    /// In-place `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) {
        self.check_len(other);
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &ParamVector) -> ParamVector {
        self.check_len(other);
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.check_len(other);
        self.0.iter().zip(&other.0).fold(0.0, |acc, (a, b)| acc + a * b)
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// One fragment's index set into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FragmentView {
    /// Zero-based fragment index.
    pub index: usize,
    /// Strictly increasing indices into the flat vector.
    pub parameter_indices: Vec<usize>,
    /// Wire size of the fragment's pseudo-gradient in bytes.
    pub byte_size: u64,
}

impl FragmentView {
    pub fn len(&self) -> usize {
        self.parameter_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parameter_indices.is_empty()
    }
}

/// Strided partition of whole layers into `K` fragments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FragmentationSpec {
    layer_sizes: Vec<usize>,
    /// `assignment[layer] = fragment`
    assignment: Vec<usize>,
    fragments: Vec<FragmentView>,
}

impl FragmentationSpec {
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn num_fragments(&self) -> usize {
        self.fragments.len()
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fragments(&self) -> &[FragmentView] {
        &self.fragments
    }

    pub fn fragment(&self, p: usize) -> &FragmentView {
        &self.fragments[p]
    }

    /// Layers owned by fragment `p`, in ascending order.
    pub fn layers_of(&self, p: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &f)| f == p)
            .map(|(layer, _)| layer)
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.fragments.iter().map(|f| f.byte_size).sum()
    }
}

/// Partitions consecutive layers into `k` fragments with a strided
/// assignment. Layers are never split.
pub fn partition(
    layer_sizes: &[usize],
    k: usize,
    bytes_per_element: u64,
) -> Result<FragmentationSpec> {
    if k == 0 {
        return Err(Error::config("fragments", "must be at least 1"));
    }
    if layer_sizes.is_empty() {
        return Err(Error::config("layer_sizes", "at least one layer required"));
    }
    if k > layer_sizes.len() {
        return Err(Error::config(
            "fragments",
            format!(
                "{k} fragments requested but the model only has {} layers",
                layer_sizes.len()
            ),
        ));
    }
    if let Some(layer) = layer_sizes.iter().position(|&s| s == 0) {
        return Err(Error::config(
            "layer_sizes",
            format!("layer {layer} has zero parameters"),
        ));
    }
    if bytes_per_element == 0 {
        return Err(Error::config("bytes_per_element", "must be positive"));
    }

    let assignment: Vec<usize> = (0..layer_sizes.len()).map(|i| i % k).collect();
    let mut indices = vec![Vec::new(); k];
    let mut offset = 0;
    for (layer, &size) in layer_sizes.iter().enumerate() {
        indices[assignment[layer]].extend(offset..offset + size);
        offset += size;
    }

    let fragments = indices
        .into_iter()
        .enumerate()
        .map(|(index, parameter_indices)| FragmentView {
            index,
            byte_size: parameter_indices.len() as u64 * bytes_per_element,
            parameter_indices,
        })
        .collect();

    Ok(FragmentationSpec {
        layer_sizes: layer_sizes.to_vec(),
        assignment,
        fragments,
    })
}

/// Copies out the entries of `v` addressed by `f`.
pub fn gather(v: &ParamVector, f: &FragmentView) -> Result<ParamVector> {
    let values = v.as_slice();
    f.parameter_indices
        .iter()
        .map(|&i| {
            values.get(i).copied().ok_or_else(|| {
                Error::internal(format!(
                    "fragment {} index {i} out of bounds for vector of length {}",
                    f.index,
                    values.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(ParamVector)
}

/// Returns `v` with the entries addressed by `f` replaced by `sub`.
pub fn scatter(v: &ParamVector, f: &FragmentView, sub: &ParamVector) -> Result<ParamVector> {
    let mut out = v.clone();
    scatter_into(&mut out, f, sub)?;
    Ok(out)
}

/// In-place variant of [`scatter`].
pub fn scatter_into(v: &mut ParamVector, f: &FragmentView, sub: &ParamVector) -> Result<()> {
    if sub.len() != f.len() {
        return Err(Error::internal(format!(
            "fragment {} has {} entries but {} values were supplied",
            f.index,
            f.len(),
            sub.len()
        )));
    }
    let len = v.len();
    for (&i, &value) in f.parameter_indices.iter().zip(sub.iter()) {
        let slot = v.0.get_mut(i).ok_or_else(|| {
            Error::internal(format!(
                "fragment {} index {i} out of bounds for vector of length {len}",
                f.index
            ))
        })?;
        *slot = value;
    }
    Ok(())
}
