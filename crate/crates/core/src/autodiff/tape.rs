//! Reverse-mode tape over vector-valued nodes.
//!
//! Every node holds a flat `Vec<f64>`. Operations are coarse (a whole
//! frustum, a whole image render, a whole loss) so a fit step records a few
//! dozen nodes rather than millions of scalars.

use std::any::Any;

use crate::error::{Error, Result};

pub type Saved = Box<dyn Any + Send + Sync>;

/// A differentiable operation on flat f64 vectors.
pub trait Op: Send + Sync {
    fn name(&self) -> &str;

    /// Output value plus anything the backward pass wants to reuse.
    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)>;

    /// Vector-Jacobian product: one gradient per input, each the length of
    /// that input, or empty when the input is not differentiable.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], saved: &Saved, grad: &[f64]) -> Vec<Vec<f64>>;
}

/// Nothing saved.
pub fn no_saved() -> Saved {
    Box::new(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Kind {
    Leaf,
    Apply {
        op: Box<dyn Op>,
        inputs: Vec<Var>,
        saved: Saved,
    },
}

struct Node {
    value: Vec<f64>,
    kind: Kind,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, kind: Kind, tracked: bool) -> Var {
        self.nodes.push(Node { value, kind, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Kind::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Kind::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn apply(&mut self, op: impl Op + 'static, inputs: &[Var]) -> Result<Var> {
        self.apply_boxed(Box::new(op), inputs)
    }

    pub fn apply_boxed(&mut self, op: Box<dyn Op>, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = {
            let vals: Vec<&[f64]> = inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
            op.forward(&vals)?
        };
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(
                op.name(),
                format!("forward produced {} at output index {i}", value[i]),
            ));
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(
            value,
            Kind::Apply {
                op,
                inputs: inputs.to_vec(),
                saved,
            },
            tracked,
        ))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, node has {n} values")));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Backpropagate an arbitrary cotangent from `root`.
    pub fn backward_seeded(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(Error::Shape("seed length does not match node".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Kind::Apply { op, inputs, saved } = &node.kind else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let vals: Vec<&[f64]> = inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
            let gin = op.backward(&vals, &node.value, saved, &g);
            grads[i] = Some(g);
            for (v, gi) in inputs.iter().zip(gin) {
                if gi.is_empty() || !self.nodes[v.0].tracked {
                    continue;
                }
                if gi.len() != self.nodes[v.0].value.len() {
                    return Err(Error::Shape(format!(
                        "{}: gradient of length {} for input of length {}",
                        op.name(),
                        gi.len(),
                        self.nodes[v.0].value.len()
                    )));
                }
                if let Some(k) = gi.iter().position(|x| !x.is_finite()) {
                    return Err(Error::numerical(
                        op.name(),
                        format!("backward produced {} at input index {k}", gi[k]),
                    ));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
