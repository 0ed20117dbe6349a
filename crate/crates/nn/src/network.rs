use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layer::{conv_out_extent, LayerKind};
use crate::ops::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Where a node reads one of its operands from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input(usize),
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Layer graph without weights. Nodes are stored in topological order: a
/// node may only read network inputs or earlier nodes, so the graph is
/// acyclic by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Channel count of each network input.
    pub inputs: Vec<usize>,
    pub nodes: Vec<NodeSpec>,
    pub output: usize,
}

impl NetworkSpec {
    /// Checks ordering, arity and channel consistency. Returns the channel
    /// count (or feature count for linear layers) produced by each node.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.nodes.is_empty() {
            return Err(NnError::Graph("network has no nodes".into()));
        }
        if self.output >= self.nodes.len() {
            return Err(NnError::Graph(format!(
                "output node {} out of range",
                self.output
            )));
        }
        let mut channels: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let mut src_ch = Vec::with_capacity(node.inputs.len());
            for s in &node.inputs {
                let c = match *s {
                    Source::Input(k) => *self.inputs.get(k).ok_or_else(|| {
                        NnError::Graph(format!("node {i} reads missing input {k}"))
                    })?,
                    Source::Node(j) if j < i => channels[j],
                    Source::Node(j) => {
                        return Err(NnError::Graph(format!(
                            "node {i} reads node {j}, which is not earlier in the graph"
                        )))
                    }
                };
                src_ch.push(c);
            }
            let arity_ok = match node.kind {
                LayerKind::Concat => !src_ch.is_empty(),
                _ => src_ch.len() == 1,
            };
            if !arity_ok {
                return Err(NnError::Graph(format!(
                    "node {i} ({}) has {} inputs",
                    node.kind.name(),
                    src_ch.len()
                )));
            }
            let out = match node.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if kernel % 2 == 0 || stride == 0 {
                        return Err(NnError::Graph(format!(
                            "node {i}: conv kernel must be odd and stride positive"
                        )));
                    }
                    if src_ch[0] != in_channels {
                        return Err(NnError::Shape {
                            node: i,
                            kind: "conv2d".into(),
                            msg: format!("expects {in_channels} channels, producer gives {}", src_ch[0]),
                        });
                    }
                    out_channels
                }
                LayerKind::Linear { out_features, .. } => out_features,
                LayerKind::Concat => src_ch.iter().sum(),
                _ => src_ch[0],
            };
            channels.push(out);
        }
        Ok(channels)
    }
}

/// Handle to a value while building a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value {
    src: Source,
    channels: usize,
}

impl Value {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Index of the producing node, if this value is not a network input.
    pub fn node(&self) -> Option<usize> {
        match self.src {
            Source::Node(i) => Some(i),
            Source::Input(_) => None,
        }
    }
}

/// Incremental builder for a [`NetworkSpec`].
#[derive(Debug)]
pub struct GraphBuilder {
    inputs: Vec<usize>,
    nodes: Vec<NodeSpec>,
}

impl GraphBuilder {
    pub fn new(input_channels: &[usize]) -> Self {
        Self {
            inputs: input_channels.to_vec(),
            nodes: Vec::new(),
        }
    }

    pub fn input(&self, i: usize) -> Value {
        Value {
            src: Source::Input(i),
            channels: self.inputs[i],
        }
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<Source>, channels: usize) -> Value {
        self.nodes.push(NodeSpec {
            kind,
            inputs,
            name: None,
        });
        Value {
            src: Source::Node(self.nodes.len() - 1),
            channels,
        }
    }

    /// Stride-1 convolution with zero "same" padding.
    pub fn conv(&mut self, x: Value, out_channels: usize, kernel: usize) -> Value {
        self.conv_with(x, out_channels, kernel, 1, kernel / 2)
    }

    pub fn conv_with(
        &mut self,
        x: Value,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Value {
        self.push(
            LayerKind::Conv2d {
                in_channels: x.channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            vec![x.src],
            out_channels,
        )
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.push(LayerKind::Relu, vec![x.src], x.channels)
    }

    pub fn maxpool2(&mut self, x: Value) -> Value {
        self.push(LayerKind::MaxPool2, vec![x.src], x.channels)
    }

    pub fn upsample2(&mut self, x: Value) -> Value {
        self.push(LayerKind::Upsample2, vec![x.src], x.channels)
    }

    pub fn concat(&mut self, xs: &[Value]) -> Value {
        let c = xs.iter().map(|v| v.channels).sum();
        self.push(LayerKind::Concat, xs.iter().map(|v| v.src).collect(), c)
    }

    pub fn linear(&mut self, x: Value, in_features: usize, out_features: usize) -> Value {
        self.push(
            LayerKind::Linear {
                in_features,
                out_features,
            },
            vec![x.src],
            out_features,
        )
    }

    /// Attach a name to the node that produced `v`.
    pub fn name(&mut self, v: Value, name: &str) {
        if let Source::Node(i) = v.src {
            self.nodes[i].name = Some(name.to_string());
        }
    }

    pub fn finish(self, output: Value) -> Result<NetworkSpec> {
        let output = output
            .node()
            .ok_or_else(|| NnError::Graph("output must be a node, not an input".into()))?;
        let spec = NetworkSpec {
            inputs: self.inputs,
            nodes: self.nodes,
            output,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Argmax(Vec<u32>),
}

/// Activations kept by a training forward pass for use by `backward`.
#[derive(Clone, Debug)]
struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux>,
}

/// Gradients produced by [`Network::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    /// One tensor per parameter, in [`Network::params`] order.
    pub params: Vec<Tensor<T>>,
    /// Gradient with respect to each network input.
    pub inputs: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            params: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            inputs: Vec::new(),
        }
    }

    /// Accumulate parameter gradients from `other`.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(NnError::GradientMismatch(format!(
                "{} vs {} parameter tensors",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for p in &mut self.params {
            p.scale(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.params.iter().map(|p| p.sum_sq()).sum::<T>().sqrt()
    }

    /// Rescale so the global norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: T) {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }
}

/// A layer graph together with its weights.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    /// Flat parameter list: weight then bias for each parametric node.
    params: Vec<Tensor<T>>,
    /// Index of each node's weight in `params`.
    slots: Vec<Option<usize>>,
    tape: Option<Tape<T>>,
}

impl<T: Real> Network<T> {
    /// Build with uniform weights in `±sqrt(6 / (fan_in + fan_out))` and zero
    /// biases.
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        Self::with_init(spec, |fans, n| {
            let (fi, fo) = fans;
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            (0..n)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect()
        })
    }

    /// Build with every parameter set to zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        Self::with_init(spec, |_, n| vec![T::zero(); n])
    }

    fn with_init(
        spec: NetworkSpec,
        mut init: impl FnMut((usize, usize), usize) -> Vec<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(spec.nodes.len());
        for node in &spec.nodes {
            match (node.kind.param_shapes(), node.kind.fans()) {
                (Some((ws, bs)), Some(fans)) => {
                    slots.push(Some(params.len()));
                    let n: usize = ws.iter().product();
                    params.push(Tensor::new(&ws, init(fans, n))?);
                    params.push(Tensor::zeros(&bs));
                }
                _ => slots.push(None),
            }
        }
        Ok(Self {
            spec,
            params,
            slots,
            tape: None,
        })
    }

    /// Replace all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NnError::GradientMismatch(
                "parameter set does not match the network layout".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Weight and bias of a parametric node.
    pub fn node_params_mut(&mut self, node: usize) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        let slot = (*self.slots.get(node)?)?;
        let (a, b) = self.params.split_at_mut(slot + 1);
        Some((&mut a[slot], &mut b[0]))
    }

    /// Index of the node carrying `name`.
    pub fn find_node(&self, name: &str) -> Option<usize> {
        self.spec
            .nodes
            .iter()
            .position(|n| n.name.as_deref() == Some(name))
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            slots: self.slots.clone(),
            tape: None,
        }
    }

    pub fn has_recorded_forward(&self) -> bool {
        self.tape.is_some()
    }

    /// Inference forward pass. Intermediate activations are released as soon
    /// as their last consumer has run.
    pub fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.forward_node(inputs, self.spec.output)
    }

    /// Inference pass returning the activation of an arbitrary node.
    pub fn forward_node(&self, inputs: &[Tensor<T>], node: usize) -> Result<Tensor<T>> {
        if node >= self.spec.nodes.len() {
            return Err(NnError::Graph(format!("no node {node}")));
        }
        let (mut acts, _) = self.run(inputs, false, node)?;
        Ok(acts[node].take().expect("requested node retained"))
    }

    /// Forward pass that records the activations needed by [`Self::backward`].
    pub fn forward_train(&mut self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (acts, aux) = self.run(inputs, true, self.spec.output)?;
        let acts: Vec<Tensor<T>> = acts
            .into_iter()
            .map(|a| a.expect("recorded activation"))
            .collect();
        let out = acts[self.spec.output].clone();
        self.tape = Some(Tape {
            inputs: inputs.to_vec(),
            acts,
            aux,
        });
        Ok(out)
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.len() != self.spec.inputs.len() {
            return Err(NnError::Shape {
                node: 0,
                kind: "input".into(),
                msg: format!(
                    "network takes {} inputs, got {}",
                    self.spec.inputs.len(),
                    inputs.len()
                ),
            });
        }
        for (i, (t, &c)) in inputs.iter().zip(&self.spec.inputs).enumerate() {
            if t.shape().len() < 2 || t.shape()[1] != c {
                return Err(NnError::Shape {
                    node: 0,
                    kind: "input".into(),
                    msg: format!("input {i} should have {c} channels, got shape {:?}", t.shape()),
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, inputs: &[Tensor<T>], record: bool, keep: usize) -> Result<(Vec<Option<Tensor<T>>>, Vec<Aux>)> {
        self.check_inputs(inputs)?;
        let nodes = &self.spec.nodes;
        let mut last_use = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            for s in &node.inputs {
                if let Source::Node(j) = *s {
                    last_use[j] = i;
                }
            }
        }
        last_use[keep] = usize::MAX;

        let mut acts: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut aux = Vec::with_capacity(if record { nodes.len() } else { 0 });
        for (i, node) in nodes.iter().enumerate() {
            let srcs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input(k) => &inputs[k],
                    Source::Node(j) => acts[j].as_ref().expect("activation still alive"),
                })
                .collect();
            let (out, a) = self.eval_node(i, &srcs)?;
            acts[i] = Some(out);
            if record {
                aux.push(a);
            } else {
                for s in &node.inputs {
                    if let Source::Node(j) = *s {
                        if last_use[j] == i {
                            acts[j] = None;
                        }
                    }
                }
            }
        }
        Ok((acts, aux))
    }

    fn shape_err(&self, node: usize, msg: String) -> NnError {
        NnError::Shape {
            node,
            kind: self.spec.nodes[node].kind.name().into(),
            msg,
        }
    }

    fn conv_geom(&self, node: usize, x: &Tensor<T>) -> Result<ConvGeom> {
        let LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec.nodes[node].kind
        else {
            unreachable!("conv_geom on non-conv node")
        };
        let (_, c, h, w) = x.dims4().map_err(|e| self.shape_err(node, e.to_string()))?;
        if c != in_channels {
            return Err(self.shape_err(node, format!("expects {in_channels} channels, got {c}")));
        }
        let hout = conv_out_extent(h, kernel, stride, padding);
        let wout = conv_out_extent(w, kernel, stride, padding);
        match (hout, wout) {
            (Some(hout), Some(wout)) if hout > 0 && wout > 0 => Ok(ConvGeom {
                cin: in_channels,
                cout: out_channels,
                k: kernel,
                stride,
                pad: padding,
                h,
                w,
                hout,
                wout,
            }),
            _ => Err(self.shape_err(node, format!("input {h}x{w} too small for kernel {kernel}"))),
        }
    }

    fn eval_node(&self, i: usize, srcs: &[&Tensor<T>]) -> Result<(Tensor<T>, Aux)> {
        let kind = &self.spec.nodes[i].kind;
        let x = srcs[0];
        match *kind {
            LayerKind::Conv2d { .. } => {
                let g = self.conv_geom(i, x)?;
                let slot = self.slots[i].expect("conv has params");
                Ok((
                    ops::conv2d_forward(x, &self.params[slot], &self.params[slot + 1], &g),
                    Aux::None,
                ))
            }
            LayerKind::MaxPool2 => {
                let (_, _, h, w) = x.dims4().map_err(|e| self.shape_err(i, e.to_string()))?;
                if h < 2 || w < 2 {
                    return Err(self.shape_err(i, format!("input {h}x{w} too small to pool")));
                }
                let (y, arg) = ops::maxpool2_forward(x);
                Ok((y, Aux::Argmax(arg)))
            }
            LayerKind::Upsample2 => {
                x.dims4().map_err(|e| self.shape_err(i, e.to_string()))?;
                Ok((ops::upsample2_forward(x), Aux::None))
            }
            LayerKind::Relu => Ok((ops::relu_forward(x), Aux::None)),
            LayerKind::Concat => {
                let (n, _, h, w) = x.dims4().map_err(|e| self.shape_err(i, e.to_string()))?;
                for s in srcs {
                    let (n2, _, h2, w2) = s.dims4().map_err(|e| self.shape_err(i, e.to_string()))?;
                    if (n2, h2, w2) != (n, h, w) {
                        return Err(self.shape_err(
                            i,
                            format!("operands {:?} and {:?} differ outside channels", x.shape(), s.shape()),
                        ));
                    }
                }
                Ok((ops::concat_forward(srcs), Aux::None))
            }
            LayerKind::Linear { in_features, .. } => {
                let n = x.shape()[0];
                if n == 0 || x.len() != n * in_features {
                    return Err(self.shape_err(
                        i,
                        format!("expects {in_features} features per sample, got shape {:?}", x.shape()),
                    ));
                }
                let flat = x.clone().reshape(&[n, in_features])?;
                let slot = self.slots[i].expect("linear has params");
                Ok((
                    ops::linear_forward(&flat, &self.params[slot], &self.params[slot + 1]),
                    Aux::None,
                ))
            }
        }
    }

    /// Back-propagate `output_grad` through the recorded forward pass,
    /// consuming the recording.
    pub fn backward(&mut self, output_grad: &Tensor<T>) -> Result<Gradients<T>> {
        let tape = self.tape.take().ok_or(NnError::NoRecordedForward)?;
        let out_shape = tape.acts[self.spec.output].shape();
        if output_grad.shape() != out_shape {
            return Err(self.shape_err(
                self.spec.output,
                format!(
                    "loss gradient shape {:?} differs from output {:?}",
                    output_grad.shape(),
                    out_shape
                ),
            ));
        }
        let nodes = &self.spec.nodes;
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut input_grads: Vec<Option<Tensor<T>>> = vec![None; tape.inputs.len()];
        let mut param_grads: Vec<Tensor<T>> =
            self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        node_grads[self.spec.output] = Some(output_grad.clone());

        fn deposit<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
                None => *slot = Some(g),
            }
        }

        for i in (0..nodes.len()).rev() {
            let Some(dy) = node_grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let src = |k: usize| -> &Tensor<T> {
                match node.inputs[k] {
                    Source::Input(j) => &tape.inputs[j],
                    Source::Node(j) => &tape.acts[j],
                }
            };
            let dxs: Vec<Tensor<T>> = match node.kind {
                LayerKind::Conv2d { .. } => {
                    let x = src(0);
                    let g = self.conv_geom(i, x)?;
                    let slot = self.slots[i].expect("conv params");
                    let (dx, dw, db) = ops::conv2d_backward(x, &self.params[slot], &dy, &g);
                    param_grads[slot].add_assign(&dw)?;
                    param_grads[slot + 1].add_assign(&db)?;
                    vec![dx]
                }
                LayerKind::Linear { in_features, .. } => {
                    let x = src(0);
                    let n = x.shape()[0];
                    let flat = x.clone().reshape(&[n, in_features])?;
                    let slot = self.slots[i].expect("linear params");
                    let (dx, dw, db) = ops::linear_backward(&flat, &self.params[slot], &dy);
                    param_grads[slot].add_assign(&dw)?;
                    param_grads[slot + 1].add_assign(&db)?;
                    vec![dx.reshape(x.shape())?]
                }
                LayerKind::MaxPool2 => {
                    let Aux::Argmax(ref arg) = tape.aux[i] else {
                        unreachable!("maxpool records argmax")
                    };
                    vec![ops::maxpool2_backward(src(0).shape(), arg, &dy)]
                }
                LayerKind::Upsample2 => vec![ops::upsample2_backward(src(0).shape(), &dy)],
                LayerKind::Relu => vec![ops::relu_backward(&tape.acts[i], &dy)],
                LayerKind::Concat => {
                    let shapes: Vec<Vec<usize>> =
                        (0..node.inputs.len()).map(|k| src(k).shape().to_vec()).collect();
                    ops::concat_backward(&shapes, &dy)
                }
            };
            for (s, dx) in node.inputs.iter().zip(dxs) {
                match *s {
                    Source::Input(j) => deposit(&mut input_grads[j], dx),
                    Source::Node(j) => deposit(&mut node_grads[j], dx),
                }
            }
        }

        let inputs = input_grads
            .into_iter()
            .zip(&tape.inputs)
            .map(|(g, x)| g.unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok(Gradients {
            params: param_grads,
            inputs,
        })
    }
}
