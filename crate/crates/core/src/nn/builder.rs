//! Graph construction, including the fire family of composite blocks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::ConvSpec;
use super::graph::{Graph, Node, Op, Param, Role};
use super::ops::PoolSpec;
use crate::error::{Error, Result};

pub type NodeId = usize;

pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<Param<f32>>,
    input_channels: Vec<usize>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            input_channels: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>, params: Vec<usize>, channels: usize) -> NodeId {
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
            params,
            channels,
        });
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, shape: Vec<usize>, role: Role, value: Vec<f32>) -> usize {
        self.params.push(Param {
            name,
            shape,
            role,
            value,
        });
        self.params.len() - 1
    }

    fn kaiming(&mut self, len: usize, fan_in: usize) -> Vec<f32> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
        (0..len).map(|_| self.rng.gen_range(-bound..=bound)).collect()
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        let slot = self.input_channels.len();
        self.input_channels.push(channels);
        self.push(name, Op::Input { slot }, vec![], vec![], channels)
    }

    pub fn conv(&mut self, name: &str, x: NodeId, cout: usize, k: (usize, usize), stride: (usize, usize)) -> NodeId {
        let cin = self.channels(x);
        let spec = ConvSpec::new(cin, cout, k, stride, (k.0 / 2, k.1 / 2));
        let w = self.kaiming(spec.weight_len(), k.0 * k.1 * cin);
        let wi = self.param(format!("{name}.weight"), vec![k.0, k.1, cin, cout], Role::Weight, w);
        let bi = self.param(format!("{name}.bias"), vec![cout], Role::Bias, vec![0.0; cout]);
        self.push(name, Op::Conv(spec), vec![x], vec![wi, bi], cout)
    }

    /// Transposed conv upsampling width by `factor` (kernel `1×2f`,
    /// stride `f`, padding `f/2`).
    pub fn deconv(&mut self, name: &str, x: NodeId, cout: usize, factor: usize) -> NodeId {
        let cin = self.channels(x);
        let spec = ConvSpec::new(cin, cout, (1, 2 * factor), (1, factor), (0, factor / 2));
        let w = self.kaiming(spec.weight_len(), 2 * cin);
        let wi = self.param(format!("{name}.weight"), vec![1, 2 * factor, cout, cin], Role::Weight, w);
        let bi = self.param(format!("{name}.bias"), vec![cout], Role::Bias, vec![0.0; cout]);
        self.push(name, Op::Deconv(spec), vec![x], vec![wi, bi], cout)
    }

    pub fn batchnorm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        let ids = vec![
            self.param(format!("{name}.gamma"), vec![c], Role::Gamma, vec![1.0; c]),
            self.param(format!("{name}.beta"), vec![c], Role::Beta, vec![0.0; c]),
            self.param(format!("{name}.running_mean"), vec![c], Role::RunningMean, vec![0.0; c]),
            self.param(format!("{name}.running_var"), vec![c], Role::RunningVar, vec![1.0; c]),
        ];
        self.push(name, Op::BatchNorm, vec![x], ids, c)
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(name, Op::Relu, vec![x], vec![], c)
    }

    pub fn maxpool_w(&mut self, name: &str, x: NodeId, spec: PoolSpec) -> NodeId {
        let c = self.channels(x);
        self.push(name, Op::MaxPoolW(spec), vec![x], vec![], c)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        let c = xs.iter().map(|&x| self.channels(x)).sum();
        self.push(name, Op::Concat, xs.to_vec(), vec![], c)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, cb) = (self.channels(a), self.channels(b));
        if ca != cb {
            return Err(Error::contract(format!("{name}: cannot add {ca} and {cb} channels")));
        }
        Ok(self.push(name, Op::Add, vec![a, b], vec![], ca))
    }

    /// conv → batchnorm, optionally followed by ReLU.
    pub fn conv_bn(
        &mut self,
        name: &str,
        x: NodeId,
        cout: usize,
        k: (usize, usize),
        stride: (usize, usize),
        relu: bool,
    ) -> NodeId {
        let c = self.conv(&format!("{name}.conv"), x, cout, k, stride);
        let b = self.batchnorm(&format!("{name}.bn"), c);
        if relu {
            self.relu(&format!("{name}.relu"), b)
        } else {
            b
        }
    }

    fn expand(&mut self, name: &str, s: NodeId, e1: usize, e3: usize, relu: bool) -> Result<NodeId> {
        if e1 != e3 {
            return Err(Error::contract(format!("{name}: expand widths {e1} and {e3} must match")));
        }
        let a = self.conv_bn(&format!("{name}.expand1x1"), s, e1, (1, 1), (1, 1), relu);
        let b = self.conv_bn(&format!("{name}.expand3x3"), s, e3, (3, 3), (1, 1), relu);
        Ok(self.concat(&format!("{name}.concat"), &[a, b]))
    }

    pub fn fire(&mut self, name: &str, x: NodeId, s1: usize, e1: usize, e3: usize) -> Result<NodeId> {
        let s = self.conv_bn(&format!("{name}.squeeze"), x, s1, (1, 1), (1, 1), true);
        self.expand(name, s, e1, e3, true)
    }

    /// Fire block whose expand outputs are added to the input before the
    /// final ReLU.
    pub fn fire_residual(&mut self, name: &str, x: NodeId, s1: usize, e1: usize, e3: usize) -> Result<NodeId> {
        if self.channels(x) != e1 + e3 {
            return Err(Error::contract(format!(
                "{name}: residual needs {} input channels, got {}",
                e1 + e3,
                self.channels(x)
            )));
        }
        let s = self.conv_bn(&format!("{name}.squeeze"), x, s1, (1, 1), (1, 1), true);
        let cat = self.expand(name, s, e1, e3, false)?;
        let sum = self.add(&format!("{name}.add"), cat, x)?;
        Ok(self.relu(&format!("{name}.relu"), sum))
    }

    /// Fire block with a width-wise transposed conv between squeeze and
    /// expand.
    pub fn fire_deconv(
        &mut self,
        name: &str,
        x: NodeId,
        s1: usize,
        e1: usize,
        e3: usize,
        factor: usize,
    ) -> Result<NodeId> {
        let s = self.conv_bn(&format!("{name}.squeeze"), x, s1, (1, 1), (1, 1), true);
        let d = self.deconv(&format!("{name}.deconv"), s, s1, factor);
        let d = self.relu(&format!("{name}.deconv_relu"), d);
        self.expand(name, d, e1, e3, true)
    }

    pub fn finish(self, output: NodeId) -> Graph<f32> {
        Graph {
            nodes: self.nodes,
            params: self.params,
            input_channels: self.input_channels,
            output,
        }
    }
}
