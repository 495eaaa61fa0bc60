//! Layer graph and its executor.

use super::conv::{self, ConvSpec};
use super::ops::{self, BnCache, PoolSpec};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { slot: usize },
    Conv(ConvSpec),
    Deconv(ConvSpec),
    BatchNorm,
    Relu,
    MaxPoolW(PoolSpec),
    Concat,
    Add,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv(_) => "conv",
            Op::Deconv(_) => "deconv",
            Op::BatchNorm => "batchnorm",
            Op::Relu => "relu",
            Op::MaxPoolW(_) => "maxpool_w",
            Op::Concat => "concat",
            Op::Add => "add",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl Role {
    pub fn trainable(self) -> bool {
        !matches!(self, Role::RunningMean | Role::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub value: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
    /// Conv/deconv: `[weight, bias]`; batchnorm: `[gamma, beta, mean, var]`.
    pub params: Vec<usize>,
    pub channels: usize,
}

/// A topologically ordered layer graph with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T = f32> {
    pub nodes: Vec<Node>,
    pub params: Vec<Param<T>>,
    pub input_channels: Vec<usize>,
    pub output: usize,
}

#[derive(Debug)]
enum Cache<T> {
    None,
    Bn(BnCache<T>),
    Pool(Vec<u32>),
}

/// Activations kept by a training forward pass for the backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self, node: usize) -> &Tensor<T> {
        &self.outputs[node]
    }
}

#[derive(Debug, Clone)]
pub struct Grads<T> {
    /// One entry per graph parameter; empty for running statistics.
    pub params: Vec<Vec<T>>,
    pub inputs: Vec<Tensor<T>>,
}

fn numeric_guard<T: Scalar>(node: &Node, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite values after {} `{}`",
            node.op.kind(),
            node.name
        )))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn output_channels(&self) -> usize {
        self.nodes[self.output].channels
    }

    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    role: p.role,
                    value: p.value.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
            input_channels: self.input_channels.clone(),
            output: self.output,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    fn pv(&self, node: &Node, i: usize) -> &[T] {
        &self.params[node.params[i]].value
    }

    fn check_inputs(&self, inputs: &[&Tensor<T>]) -> Result<()> {
        if inputs.len() != self.input_channels.len() {
            return Err(Error::contract(format!(
                "graph takes {} inputs, got {}",
                self.input_channels.len(),
                inputs.len()
            )));
        }
        for (slot, (t, &c)) in inputs.iter().zip(&self.input_channels).enumerate() {
            if t.c() != c {
                return Err(Error::contract(format!(
                    "input {slot} expects {c} channels, got shape {:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    }

    /// Eval-mode evaluation of one node.
    fn eval_node(&self, node: &Node, xs: &[&Tensor<T>], inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(match &node.op {
            Op::Input { slot } => inputs[*slot].clone(),
            Op::Conv(spec) => conv::conv2d_forward(xs[0], spec, self.pv(node, 0), self.pv(node, 1))?,
            Op::Deconv(spec) => conv::deconv2d_forward(xs[0], spec, self.pv(node, 0), self.pv(node, 1))?,
            Op::BatchNorm => ops::batchnorm_eval(
                xs[0],
                self.pv(node, 0),
                self.pv(node, 1),
                self.pv(node, 2),
                self.pv(node, 3),
            )?,
            Op::Relu => ops::relu_forward(xs[0]),
            Op::MaxPoolW(spec) => ops::maxpool_w_forward(xs[0], spec)?.0,
            Op::Concat => ops::concat_forward(xs)?,
            Op::Add => ops::add_forward(xs[0], xs[1])?,
        })
    }

    /// Training-mode forward pass. Batchnorm uses batch statistics and
    /// updates its running estimates.
    pub fn forward_train(&mut self, inputs: &[&Tensor<T>]) -> Result<Tape<T>> {
        self.check_inputs(inputs)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &outputs[i]).collect();
            let (y, cache) = match &node.op {
                Op::BatchNorm => {
                    let (y, c) = ops::batchnorm_train_forward(xs[0], self.pv(node, 0), self.pv(node, 1))?;
                    (y, Cache::Bn(c))
                }
                Op::MaxPoolW(spec) => {
                    let (y, arg) = ops::maxpool_w_forward(xs[0], spec)?;
                    (y, Cache::Pool(arg))
                }
                _ => (self.eval_node(node, &xs, inputs)?, Cache::None),
            };
            numeric_guard(node, &y)?;
            if let Cache::Bn(c) = &cache {
                let (m, v) = (node.params[2], node.params[3]);
                ops::update_running(&mut self.params[m].value, &c.mean);
                ops::update_running(&mut self.params[v].value, &c.var_unbiased);
            }
            outputs.push(y);
            caches.push(cache);
        }
        Ok(Tape { outputs, caches })
    }

    pub fn backward(&self, tape: &Tape<T>, dout: Tensor<T>) -> Result<Grads<T>> {
        let n = self.nodes.len();
        let mut dnode: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        dnode[self.output] = Some(dout);
        let mut dparams: Vec<Vec<T>> = self
            .params
            .iter()
            .map(|p| if p.role.trainable() { vec![T::zero(); p.value.len()] } else { Vec::new() })
            .collect();
        let mut dinputs: Vec<Tensor<T>> = Vec::new();
        for slot in 0..self.input_channels.len() {
            let shape = self
                .nodes
                .iter()
                .position(|nd| nd.op == Op::Input { slot })
                .map(|i| tape.outputs[i].shape)
                .unwrap_or([0; 4]);
            dinputs.push(Tensor::zeros(shape));
        }
        for idx in (0..n).rev() {
            let Some(dy) = dnode[idx].take() else { continue };
            let node = &self.nodes[idx];
            let x = |k: usize| &tape.outputs[node.inputs[k]];
            let push = |dnode: &mut Vec<Option<Tensor<T>>>, k: usize, g: Tensor<T>| {
                let target = node.inputs[k];
                match &mut dnode[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input { slot } => dinputs[*slot].add_assign(&dy),
                Op::Conv(spec) | Op::Deconv(spec) => {
                    let g = if matches!(node.op, Op::Conv(_)) {
                        conv::conv2d_backward(x(0), spec, self.pv(node, 0), &dy)?
                    } else {
                        conv::deconv2d_backward(x(0), spec, self.pv(node, 0), &dy)?
                    };
                    accumulate(&mut dparams[node.params[0]], &g.dw);
                    accumulate(&mut dparams[node.params[1]], &g.db);
                    push(&mut dnode, 0, g.dx);
                }
                Op::BatchNorm => {
                    let Cache::Bn(cache) = &tape.caches[idx] else {
                        return Err(Error::contract(format!("missing batchnorm cache for {}", node.name)));
                    };
                    let g = ops::batchnorm_train_backward(cache, self.pv(node, 0), &dy);
                    accumulate(&mut dparams[node.params[0]], &g.dgamma);
                    accumulate(&mut dparams[node.params[1]], &g.dbeta);
                    push(&mut dnode, 0, g.dx);
                }
                Op::Relu => push(&mut dnode, 0, ops::relu_backward(&tape.outputs[idx], &dy)),
                Op::MaxPoolW(_) => {
                    let Cache::Pool(arg) = &tape.caches[idx] else {
                        return Err(Error::contract(format!("missing pooling cache for {}", node.name)));
                    };
                    push(&mut dnode, 0, ops::maxpool_w_backward(x(0).shape, arg, &dy));
                }
                Op::Concat => {
                    let chans: Vec<usize> = node.inputs.iter().map(|&i| tape.outputs[i].c()).collect();
                    for (k, g) in ops::concat_backward(&chans, &dy).into_iter().enumerate() {
                        push(&mut dnode, k, g);
                    }
                }
                Op::Add => {
                    push(&mut dnode, 1, dy.clone());
                    push(&mut dnode, 0, dy);
                }
            }
        }
        Ok(Grads {
            params: dparams,
            inputs: dinputs,
        })
    }

    /// Eval-mode forward pass returning the output node.
    pub fn infer(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.infer_visit(inputs, |_, _| {})
    }

    /// Eval-mode forward pass calling `visit(node, output)` for every node.
    /// Activations are released after their last consumer runs.
    pub fn infer_visit(
        &self,
        inputs: &[&Tensor<T>],
        mut visit: impl FnMut(usize, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        self.check_inputs(inputs)?;
        let n = self.nodes.len();
        let mut last_use = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = i;
            }
        }
        last_use[self.output] = usize::MAX;
        let mut outputs: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for idx in 0..n {
            let node = &self.nodes[idx];
            let y = {
                let xs: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|&i| outputs[i].as_ref().expect("activation released early"))
                    .collect();
                self.eval_node(node, &xs, inputs)?
            };
            numeric_guard(node, &y)?;
            visit(idx, &y);
            outputs[idx] = Some(y);
            for &j in &node.inputs {
                if last_use[j] == idx {
                    outputs[j] = None;
                }
            }
        }
        outputs[self.output]
            .take()
            .ok_or_else(|| Error::contract("graph output was not computed"))
    }

    /// Mutable views of every parameter, aligned with [`Grads::params`].
    pub fn param_slices(&mut self) -> Vec<&mut [T]> {
        self.params.iter_mut().map(|p| p.value.as_mut_slice()).collect()
    }
}

fn accumulate<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
