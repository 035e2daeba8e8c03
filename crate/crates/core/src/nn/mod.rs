//! Minimal reverse-mode autodiff over dense f64 matrices.
//!
//! Every forward pass builds a fresh [`Tape`]; `backward` walks it in
//! reverse. The op set is exactly what the encoder, the prediction/joint
//! networks and the training losses need. All arithmetic is f64 and every
//! op is deterministic, so finite-difference checks hold to tight
//! tolerances and identical seeds give bit-identical runs.

mod mat;
mod optim;
pub mod tape;

pub use mat::Mat;
pub use optim::{AdamW, LrSchedule};
pub use tape::{central_difference, grad_rel_error, sigmoid, CustomGrad, NodeId, Tape};

/// Flattened view over an ordered set of named parameter matrices.
///
/// The flat order (entry order, row-major within an entry) is the layout
/// optimizers and gradient buffers use everywhere.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Mat)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| n != &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.data.len()).sum()
    }

    /// Copies all parameters into one flat vector (entry order, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, m) in &self.entries {
            out.extend_from_slice(&m.data);
        }
        out
    }

    /// Overwrites all parameters from a flat vector produced by `flatten`.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, m) in &mut self.entries {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf node ids for every entry of a `ParamSet` on some tape, in entry
/// order. Produced by [`Tape::leaves_for`].
pub struct ParamLeaves {
    pub ids: Vec<NodeId>,
}

impl ParamLeaves {
    pub fn id(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }
}

impl Tape {
    /// Registers every parameter of `params` as a leaf on this tape.
    pub fn leaves_for(&mut self, params: &ParamSet) -> ParamLeaves {
        let ids = params.iter().map(|(_, m)| self.leaf(m.clone())).collect();
        ParamLeaves { ids }
    }

    /// Accumulates the gradients of the given parameter leaves into a flat
    /// buffer laid out like `ParamSet::flatten`.
    pub fn accumulate_param_grads(&self, leaves: &ParamLeaves, out: &mut [f64]) {
        let mut off = 0;
        for &id in &leaves.ids {
            let g = self.grad(id);
            for (dst, src) in out[off..off + g.data.len()].iter_mut().zip(&g.data) {
                *dst += src;
            }
            off += g.data.len();
        }
        assert_eq!(off, out.len(), "gradient buffer length mismatch");
    }
}
