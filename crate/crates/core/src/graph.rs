//! Dependency graphs of CNN layers and the tensors that cross a split.
//!
//! Node ids are a topological order: every node only consumes outputs of
//! nodes with a smaller id. A split point `s` runs nodes `0..=s` on the
//! client and `s+1..=N` on the server, so `s = 0` is server-only (just the
//! input tensor crosses) and `s = N` is client-only.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub type NodeId = usize;

pub const MODEL_HEADER: &str = "ONLOADRT-MODEL v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("dependency cycle through node {node}")]
    Cycle { node: NodeId },
    #[error("node {node} consumes node {input}, which is not declared before it")]
    OrderViolation { node: NodeId, input: NodeId },
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("node {node} ({kind}) takes {expected} inputs, got {got}")]
    Arity {
        node: NodeId,
        kind: OpKind,
        expected: &'static str,
        got: usize,
    },
    #[error("graph must start with the single input node and end with the single output node")]
    Endpoints,
    #[error("node {0} has no consumer")]
    Dangling(NodeId),
    #[error("split point {split} is outside [0, {max}]")]
    SplitOutOfRange { split: usize, max: usize },
    #[error("model file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Conv2d,
    Relu,
    Add,
    MaxPool,
    AvgPool,
    Dense,
    Flatten,
    Concat,
    Output,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::Dense => "dense",
            OpKind::Flatten => "flatten",
            OpKind::Concat => "concat",
            OpKind::Output => "output",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "input" => OpKind::Input,
            "conv2d" => OpKind::Conv2d,
            "relu" => OpKind::Relu,
            "add" => OpKind::Add,
            "maxpool" => OpKind::MaxPool,
            "avgpool" => OpKind::AvgPool,
            "dense" => OpKind::Dense,
            "flatten" => OpKind::Flatten,
            "concat" => OpKind::Concat,
            "output" => OpKind::Output,
            other => return Err(GraphError::UnknownOperator(other.to_string())),
        })
    }
}

/// Operator with its attributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Input { shape: Vec<usize> },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Add,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Dense { units: usize },
    Flatten,
    /// Concatenation along the leading (channel) axis, in input order.
    Concat,
    Output,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu => OpKind::Relu,
            Op::Add => OpKind::Add,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::Flatten => OpKind::Flatten,
            Op::Concat => OpKind::Concat,
            Op::Output => OpKind::Output,
        }
    }

    fn arity_ok(&self, n: usize) -> Result<(), &'static str> {
        let ok = match self.kind() {
            OpKind::Input => n == 0,
            OpKind::Add | OpKind::Concat => n >= 2,
            _ => n == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(match self.kind() {
                OpKind::Input => "0",
                OpKind::Add | OpKind::Concat => "at least 2",
                _ => "exactly 1",
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNode {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// The cut at split `s`: `dep_ids` are client-side producers read by
/// server-side consumers, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPoint {
    pub split: NodeId,
    pub dep_ids: Vec<NodeId>,
}

/// Immutable, validated DAG of layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepGraph {
    nodes: Vec<LayerNode>,
    consumers: Vec<Vec<NodeId>>,
}

impl DepGraph {
    /// Validates and builds a graph from nodes listed in declaration order.
    ///
    /// Ids are reassigned from declaration order; `inputs` must refer to
    /// those positions.
    pub fn new(ops: Vec<(Op, Vec<NodeId>)>) -> Result<Self, GraphError> {
        let count = ops.len();
        let nodes: Vec<LayerNode> = ops
            .into_iter()
            .enumerate()
            .map(|(id, (op, inputs))| LayerNode { id, op, inputs })
            .collect();

        for node in &nodes {
            if let Err(expected) = node.op.arity_ok(node.inputs.len()) {
                return Err(GraphError::Arity {
                    node: node.id,
                    kind: node.op.kind(),
                    expected,
                    got: node.inputs.len(),
                });
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= count) {
                return Err(GraphError::OrderViolation { node: node.id, input: bad });
            }
        }
        check_acyclic(&nodes)?;
        if let Some(node) = nodes.iter().find(|n| n.inputs.iter().any(|&i| i >= n.id)) {
            let input = *node.inputs.iter().find(|&&i| i >= node.id).unwrap();
            return Err(GraphError::OrderViolation { node: node.id, input });
        }

        let inputs = nodes.iter().filter(|n| n.op.kind() == OpKind::Input).count();
        let outputs = nodes.iter().filter(|n| n.op.kind() == OpKind::Output).count();
        if count < 2
            || inputs != 1
            || outputs != 1
            || nodes[0].op.kind() != OpKind::Input
            || nodes[count - 1].op.kind() != OpKind::Output
        {
            return Err(GraphError::Endpoints);
        }

        let mut consumers = vec![Vec::new(); count];
        for node in &nodes {
            for &i in &node.inputs {
                if !consumers[i].contains(&node.id) {
                    consumers[i].push(node.id);
                }
            }
        }
        if let Some(id) = (0..count - 1).find(|&id| consumers[id].is_empty()) {
            return Err(GraphError::Dangling(id));
        }
        Ok(Self { nodes, consumers })
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id]
    }

    /// Id of the output node, `N`. Split points range over `0..=N`.
    pub fn output_id(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn input_shape(&self) -> &[usize] {
        match &self.nodes[0].op {
            Op::Input { shape } => shape,
            _ => unreachable!("validated in DepGraph::new"),
        }
    }

    pub fn split_dependencies(&self, split: usize) -> Result<SplitPoint, GraphError> {
        let max = self.output_id();
        if split > max {
            return Err(GraphError::SplitOutOfRange { split, max });
        }
        let dep_ids = (0..=split)
            .filter(|&p| self.consumers[p].iter().any(|&q| q > split))
            .collect();
        Ok(SplitPoint { split, dep_ids })
    }

    /// All split points, or with `relu_only` just those whose crossing
    /// tensors are all ReLU outputs. The two extremes are always kept.
    pub fn candidate_splits(&self, relu_only: bool) -> Vec<SplitPoint> {
        let max = self.output_id();
        (0..=max)
            .map(|s| self.split_dependencies(s).expect("in range"))
            .filter(|sp| {
                !relu_only
                    || sp.split == 0
                    || sp.split == max
                    || sp
                        .dep_ids
                        .iter()
                        .all(|&d| self.nodes[d].op.kind() == OpKind::Relu)
            })
            .collect()
    }

    /// Parses the versioned text model format.
    ///
    /// ```text
    /// ONLOADRT-MODEL v1
    /// 0 input shape=3,16,16
    /// 1 conv2d in=0 out=16 kernel=3 stride=1 pad=1
    /// 2 relu in=1
    /// 3 output in=2
    /// ```
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, MODEL_HEADER)) => {}
            Some((line, other)) => {
                return Err(GraphError::Parse {
                    line,
                    msg: format!("expected header `{MODEL_HEADER}`, found `{other}`"),
                })
            }
            None => return Err(GraphError::Parse { line: 1, msg: "empty model file".into() }),
        }

        let mut ops = Vec::new();
        for (line, text) in lines {
            let perr = |msg: String| GraphError::Parse { line, msg };
            let mut fields = text.split_whitespace();
            let id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| perr("missing node id".into()))?;
            if id != ops.len() {
                return Err(perr(format!("node id {id} declared out of order, expected {}", ops.len())));
            }
            let kind: OpKind = fields
                .next()
                .ok_or_else(|| perr("missing operator".into()))?
                .parse()?;
            let mut attrs = Attrs::default();
            for field in fields {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| perr(format!("expected key=value, found `{field}`")))?;
                attrs.0.push((k.to_string(), v.to_string()));
            }
            let inputs = match attrs.take("in") {
                Some(v) => parse_list(&v).map_err(|e| perr(format!("in: {e}")))?,
                None => Vec::new(),
            };
            let op = attrs.build(kind).map_err(perr)?;
            ops.push((op, inputs));
        }
        Self::new(ops)
    }

    /// Canonical text form accepted by [`DepGraph::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_HEADER}\n");
        for node in &self.nodes {
            out.push_str(&format!("{} {}", node.id, node.op.kind()));
            if !node.inputs.is_empty() {
                let ins: Vec<String> = node.inputs.iter().map(|i| i.to_string()).collect();
                out.push_str(&format!(" in={}", ins.join(",")));
            }
            match &node.op {
                Op::Input { shape } => {
                    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                    out.push_str(&format!(" shape={}", dims.join(",")));
                }
                Op::Conv2d { out_channels, kernel, stride, padding } => out.push_str(&format!(
                    " out={out_channels} kernel={kernel} stride={stride} pad={padding}"
                )),
                Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
                    out.push_str(&format!(" kernel={kernel} stride={stride}"))
                }
                Op::Dense { units } => out.push_str(&format!(" units={units}")),
                Op::Relu | Op::Add | Op::Flatten | Op::Concat | Op::Output => {}
            }
            out.push('\n');
        }
        out
    }
}

fn check_acyclic(nodes: &[LayerNode]) -> Result<(), GraphError> {
    let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
    let mut consumers = vec![Vec::new(); nodes.len()];
    for n in nodes {
        for &i in &n.inputs {
            consumers[i].push(n.id);
        }
    }
    let mut ready: VecDeque<NodeId> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(id) = ready.pop_front() {
        seen += 1;
        for &c in &consumers[id] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if seen == nodes.len() {
        Ok(())
    } else {
        let node = (0..nodes.len()).find(|&i| indegree[i] > 0).unwrap_or(0);
        Err(GraphError::Cycle { node })
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|p| p.parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

#[derive(Default)]
struct Attrs(Vec<(String, String)>);

impl Attrs {
    fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.0.iter().position(|(k, _)| k == key)?;
        Some(self.0.remove(pos).1)
    }

    fn num(&mut self, key: &str, default: Option<usize>) -> Result<usize, String> {
        match self.take(key) {
            Some(v) => v.parse().map_err(|e| format!("{key}: `{v}`: {e}")),
            None => default.ok_or_else(|| format!("missing attribute `{key}`")),
        }
    }

    fn build(mut self, kind: OpKind) -> Result<Op, String> {
        let op = match kind {
            OpKind::Input => {
                let shape = self.take("shape").ok_or("missing attribute `shape`")?;
                Op::Input { shape: parse_list(&shape)? }
            }
            OpKind::Conv2d => Op::Conv2d {
                out_channels: self.num("out", None)?,
                kernel: self.num("kernel", None)?,
                stride: self.num("stride", Some(1))?,
                padding: self.num("pad", Some(0))?,
            },
            OpKind::MaxPool | OpKind::AvgPool => {
                let kernel = self.num("kernel", None)?;
                let stride = self.num("stride", Some(kernel))?;
                if kind == OpKind::MaxPool {
                    Op::MaxPool { kernel, stride }
                } else {
                    Op::AvgPool { kernel, stride }
                }
            }
            OpKind::Dense => Op::Dense { units: self.num("units", None)? },
            OpKind::Relu => Op::Relu,
            OpKind::Add => Op::Add,
            OpKind::Flatten => Op::Flatten,
            OpKind::Concat => Op::Concat,
            OpKind::Output => Op::Output,
        };
        if let Some((k, _)) = self.0.first() {
            return Err(format!("unexpected attribute `{k}` for {kind}"));
        }
        Ok(op)
    }
}
