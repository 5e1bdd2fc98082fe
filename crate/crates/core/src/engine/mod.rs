//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! forward-over-reverse second-order products.
//!
//! Programs are recorded into a [`Graph`] by running ordinary Rust code
//! against it. First-order gradients come from one reverse sweep. Gradients
//! of functions of a gradient (the norm penalties used throughout training)
//! come from a tangent sweep seeded on the inner variables followed by a
//! reverse sweep over tangent-carrying values, which costs a small constant
//! multiple of one gradient evaluation.

mod graph;
pub(crate) mod kernels;
mod sweep;

use alloc::string::String;
use alloc::vec::Vec;

pub use graph::{Graph, Var};
pub use sweep::{Adjoint, Tangents};

use crate::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("shape mismatch in `{op}` (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("program input `{0}` not supplied")]
    MissingInput(String),
    #[error("input `{0}` declared twice")]
    DuplicateInput(String),
    #[error("node {node} is not a scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("`{op}` is not differentiable at its current input (node {node})")]
    NonDifferentiable { op: &'static str, node: usize },
}

/// Name → variable map produced by [`Graph::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: Vec<(String, Var)>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var, EngineError> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| EngineError::MissingInput(name.into()))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    pub fn extend(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }
}

/// Result of [`Graph::mixed_directional`].
#[derive(Debug, Clone)]
pub struct MixedDirectional {
    /// `∂f/∂outer`.
    pub gradient: Vec<Vec<f64>>,
    /// `∂/∂outer ⟨d, ∂f/∂inner⟩`.
    pub hessian_direction: Vec<Vec<f64>>,
}

/// Result of [`Graph::penalized_gradient`].
#[derive(Debug, Clone)]
pub struct PenalizedGradient {
    /// `‖∂f/∂inner‖²`.
    pub penalty: f64,
    /// `∂f/∂inner`.
    pub inner_gradient: Vec<Vec<f64>>,
    /// `∂/∂outer (f + weight·‖∂f/∂inner‖²)`.
    pub gradient: Vec<Vec<f64>>,
}

impl Graph {
    /// Declares every entry of `params` as a named input.
    pub fn bind(&mut self, params: &ParameterSet) -> Result<Bindings, EngineError> {
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            vars.push((String::from(name), self.input(name, t)?));
        }
        Ok(Bindings { vars })
    }

    fn scalar_seed(&self, output: Var) -> Result<[f64; 1], EngineError> {
        self.scalar(output).map(|_| [1.0])
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>, EngineError> {
        let seed = self.scalar_seed(output)?;
        Ok(self
            .reverse(output, &seed, wrt, None)?
            .into_iter()
            .map(|a| a.grad)
            .collect())
    }

    /// Forward-over-reverse product: with tangent `direction` on `inner`,
    /// returns `∂f/∂outer` and `∂/∂outer ⟨direction, ∂f/∂inner⟩`.
    ///
    /// `seed` defaults to 1 for a scalar output; for vector outputs it selects
    /// the linear functional of the output being differentiated.
    pub fn mixed_directional(
        &self,
        output: Var,
        seed: Option<&[f64]>,
        inner: &[Var],
        direction: &[&[f64]],
        outer: &[Var],
    ) -> Result<MixedDirectional, EngineError> {
        let unit;
        let seed = match seed {
            Some(s) => s,
            None => {
                unit = self.scalar_seed(output)?;
                &unit[..]
            }
        };
        let seeds: Vec<(Var, &[f64])> = inner.iter().copied().zip(direction.iter().copied()).collect();
        let tangents = self.tangents(&seeds)?;
        let adj = self.reverse(output, seed, outer, Some(&tangents))?;
        let (gradient, hessian_direction) = adj.into_iter().map(|a| (a.grad, a.tangent)).unzip();
        Ok(MixedDirectional {
            gradient,
            hessian_direction,
        })
    }

    /// Gradient with respect to `outer` of `f + weight·‖∇_inner f‖²`, with the
    /// inner variables held at their recorded values.
    pub fn penalized_gradient(
        &self,
        output: Var,
        inner: &[Var],
        outer: &[Var],
        weight: f64,
    ) -> Result<PenalizedGradient, EngineError> {
        let inner_gradient = self.gradient(output, inner)?;
        let penalty: f64 = inner_gradient.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
        let direction: Vec<Vec<f64>> = inner_gradient
            .iter()
            .map(|g| g.iter().map(|v| 2.0 * weight * v).collect())
            .collect();
        let dirs: Vec<&[f64]> = direction.iter().map(|d| d.as_slice()).collect();
        let mixed = self.mixed_directional(output, None, inner, &dirs, outer)?;
        let gradient = mixed
            .gradient
            .into_iter()
            .zip(mixed.hessian_direction)
            .map(|(mut g, h)| {
                kernels::axpy(1.0, &h, &mut g);
                g
            })
            .collect();
        Ok(PenalizedGradient {
            penalty,
            inner_gradient,
            gradient,
        })
    }
}

/// A program maps bound inputs to a recorded output.
pub trait Program {
    fn build(&self, graph: &mut Graph, inputs: &Bindings) -> Result<Var, EngineError>;
}

impl<F> Program for F
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var, EngineError>,
{
    fn build(&self, graph: &mut Graph, inputs: &Bindings) -> Result<Var, EngineError> {
        self(graph, inputs)
    }
}

/// Records `program` on `inputs`, returning the computation record and its output.
pub fn record(program: &impl Program, inputs: &ParameterSet) -> Result<(Graph, Bindings, Var), EngineError> {
    let mut g = Graph::new();
    let b = g.bind(inputs)?;
    let out = program.build(&mut g, &b)?;
    Ok((g, b, out))
}

/// Forward value of `program` at `inputs`.
pub fn evaluate(program: &impl Program, inputs: &ParameterSet) -> Result<Tensor, EngineError> {
    let (g, _, out) = record(program, inputs)?;
    Ok(g.tensor(out))
}

fn to_parameter_set(names: &ParameterSet, values: Vec<Vec<f64>>) -> ParameterSet {
    let flat: Vec<f64> = values.into_iter().flatten().collect();
    names.unflatten(&flat).expect("gradient layout matches inputs")
}

/// Gradient of a scalar program with respect to all of its inputs.
pub fn gradient(program: &impl Program, inputs: &ParameterSet) -> Result<ParameterSet, EngineError> {
    let (g, b, out) = record(program, inputs)?;
    let wrt: Vec<Var> = b.vars().collect();
    Ok(to_parameter_set(inputs, g.gradient(out, &wrt)?))
}

/// `∇_outer ‖∇_inner f‖²` for a scalar program over `inner ∪ outer`.
pub fn gradient_of_gradient_norm(
    program: &impl Program,
    inner: &ParameterSet,
    outer: &ParameterSet,
) -> Result<ParameterSet, EngineError> {
    let mut g = Graph::new();
    let bi = g.bind(inner)?;
    let bo = g.bind(outer)?;
    let inner_vars: Vec<Var> = bi.vars().collect();
    let outer_vars: Vec<Var> = bo.vars().collect();
    let mut all = bi;
    all.extend(bo);
    let out = program.build(&mut g, &all)?;
    let inner_grad = g.gradient(out, &inner_vars)?;
    let direction: Vec<Vec<f64>> = inner_grad.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
    let dirs: Vec<&[f64]> = direction.iter().map(|d| d.as_slice()).collect();
    let mixed = g.mixed_directional(out, None, &inner_vars, &dirs, &outer_vars)?;
    Ok(to_parameter_set(outer, mixed.hessian_direction))
}

#[cfg(test)]
mod tests;
