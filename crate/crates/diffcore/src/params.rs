use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// A named block of trainable values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameter blocks.
///
/// Block order is significant: it fixes the order of optimizer state and of
/// blocks in a checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.blocks.push(ParamBlock {
            name: name.into(),
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.blocks
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| &mut b.value)
    }

    /// Records every block as a parameter leaf on `graph`, in block order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.blocks
            .iter()
            .map(|b| graph.parameter(b.value.clone()))
            .collect()
    }

    /// Gradients for the vars returned by [`ParamSet::bind`].
    pub fn collect_grads(&self, graph: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .zip(vars)
            .map(|(b, &v)| {
                graph
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; b.value.len()])
            })
            .collect()
    }

    /// A copy with every block name prefixed by `prefix/`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: format!("{prefix}/{}", b.name),
                    value: b.value.clone(),
                })
                .collect(),
        }
    }

    /// Blocks whose name starts with `prefix/`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let lead = format!("{prefix}/");
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .filter_map(|b| {
                    b.name.strip_prefix(&lead).map(|rest| ParamBlock {
                        name: rest.to_string(),
                        value: b.value.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.blocks.extend(other.blocks);
    }
}

/// Adds `src` into `dst` elementwise, block by block.
pub fn accumulate_grads(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

/// Zero-filled gradient buffers shaped like `params`.
pub fn zero_grads(params: &ParamSet) -> Vec<Vec<f64>> {
    params
        .blocks()
        .iter()
        .map(|b| vec![0.0; b.value.len()])
        .collect()
}
