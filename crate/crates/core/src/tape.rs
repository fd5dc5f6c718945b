//! Reverse-mode tape over `(C, H, W)` tensors.
//!
//! Parameters live in a [`ParamStore`]; the tape records operations on
//! node values and replays them backwards from any set of seeded outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, upsample_nearest, upsample_nearest_backward, ConvGeometry, Tensor,
};
use crate::warp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named flat parameter buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    buffers: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, values: Vec<f64>) -> ParamId {
        self.names.push(name.into());
        self.buffers.push(values);
        ParamId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.buffers[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.buffers
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.buffers.iter().map(Vec::len).collect()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.buffers.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.buffers.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Self::Tanh => x.tanh(),
            Self::Sigmoid => crate::solver::sigmoid(x),
        }
    }

    /// Derivative from the input `x` and output `y`.
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Self::Tanh => 1.0 - y * y,
            Self::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv {
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
        geometry: ConvGeometry,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Sample {
        image: NodeId,
        grid: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Slice {
        x: NodeId,
        start: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients from one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    pub params: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id.0]
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("tape node {} ({op:?})", self.nodes.len())));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf holding a constant or an input; gradients still reach it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, value)
    }

    pub fn conv(&mut self, x: NodeId, weight: ParamId, bias: ParamId, geometry: ConvGeometry) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.channels != geometry.in_channels
            || self.params.get(weight).len() != geometry.weight_len()
            || self.params.get(bias).len() != geometry.out_channels
        {
            return Err(Error::dims(format!(
                "conv {}→{} k{} on {} channels",
                geometry.in_channels, geometry.out_channels, geometry.kernel, xv.channels
            )));
        }
        let out = conv2d_forward(xv, self.params.get(weight), self.params.get(bias), &geometry);
        self.push(
            Op::Conv {
                x,
                weight,
                bias,
                geometry,
            },
            out,
        )
    }

    pub fn act(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(Op::Act { x, kind }, out)
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::InvalidValue("upsample factor 0".into()));
        }
        let out = upsample_nearest(self.value(x), factor);
        self.push(Op::Upsample { x, factor }, out)
    }

    /// Bilinear sampling of `image` at the normalized coordinates in `grid`.
    pub fn sample(&mut self, image: NodeId, grid: NodeId) -> Result<NodeId> {
        let out = warp::sample(self.value(image), self.value(grid))?;
        self.push(Op::Sample { image, grid }, out)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::dims(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= v;
        }
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), out)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values)?;
        self.push(Op::Concat(parts.to_vec()), out)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let c = self.value(x).channels;
        if start + count > c || count == 0 {
            return Err(Error::dims(format!("channels {start}..{} of {c}", start + count)));
        }
        let out = self.value(x).slice_channels(start, count);
        self.push(Op::Slice { x, start }, out)
    }

    /// Reverse pass from cotangents on any number of nodes.
    pub fn backward(&self, seeds: &[(NodeId, &Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Vec<f64>> = self.params.lengths().into_iter().map(|n| vec![0.0; n]).collect();
        for (id, g) in seeds {
            if !g.same_shape(self.value(*id)) {
                return Err(Error::dims(format!(
                    "seed {:?} for node of shape {:?}",
                    g.shape(),
                    self.value(*id).shape()
                )));
            }
            accumulate(&mut grads, *id, (*g).clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    geometry,
                } => {
                    let (dx, dw, db) = conv2d_backward(self.value(*x), self.params.get(*weight), &g, geometry);
                    add_into(&mut pgrads[weight.0], &dw);
                    add_into(&mut pgrads[bias.0], &db);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for ((d, xi), yi) in dx.data.iter_mut().zip(&xv.data).zip(&node.value.data) {
                        *d *= kind.slope(*xi, *yi);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x, factor } => {
                    accumulate(&mut grads, *x, upsample_nearest_backward(&g, *factor));
                }
                Op::Sample { image, grid } => {
                    let (di, dg) = warp::sample_backward(self.value(*image), self.value(*grid), &g)?;
                    accumulate(&mut grads, *image, di);
                    accumulate(&mut grads, *grid, dg);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (d, v) in da.data.iter_mut().zip(&self.value(*b).data) {
                        *d *= v;
                    }
                    let mut db = g.clone();
                    for (d, v) in db.data.iter_mut().zip(&self.value(*a).data) {
                        *d *= v;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.map(|v| v * s)),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).channels;
                        accumulate(&mut grads, *p, g.slice_channels(start, c));
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.channels, xv.height, xv.width);
                    let n = xv.plane_len();
                    dx.data[start * n..start * n + g.data.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, *x, dx);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}
