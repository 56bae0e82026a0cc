//! Deterministic reference executor with partial-range execution.
//!
//! A plan runs a contiguous id range. Inputs of nodes inside the range are
//! either produced inside it or injected (tensors received from the other
//! party); nodes outside the range are never evaluated. Every operator
//! accumulates in a fixed, input-index ascending order so the same plan
//! always yields bit-identical tensors.

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::graph::{DepGraph, NodeId, Op};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("node {node} needs the output of node {input}, which was neither produced nor injected")]
    MissingDependency { node: NodeId, input: NodeId },
    #[error("node {node}: {msg}")]
    Shape { node: NodeId, msg: String },
    #[error("node {0} has no weights")]
    MissingWeights(NodeId),
    #[error("invalid run range {from}..={to} for a graph with output id {max}")]
    InvalidRange { from: NodeId, to: NodeId, max: NodeId },
}

/// Which nodes to run and which tensors to resume from.
#[derive(Debug, Clone, Default)]
pub struct ExecPlan {
    pub from: NodeId,
    pub to: NodeId,
    pub inject: BTreeMap<NodeId, Tensor>,
}

impl ExecPlan {
    pub fn full(graph: &DepGraph, input: Tensor) -> Self {
        Self::client(graph.output_id(), input)
    }

    /// Client side of split `s`: nodes `0..=s`, fed by the model input.
    pub fn client(split: NodeId, input: Tensor) -> Self {
        Self {
            from: 0,
            to: split,
            inject: BTreeMap::from([(0, input)]),
        }
    }

    /// Server side of split `s` (< N): nodes `s+1..=N`, resumed from the
    /// dependency tensors of the cut.
    pub fn server(graph: &DepGraph, split: NodeId, deps: BTreeMap<NodeId, Tensor>) -> Self {
        Self {
            from: split + 1,
            to: graph.output_id(),
            inject: deps,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Execution {
    /// Tensors of evaluated nodes still needed after the range: cut
    /// dependencies and, if it ran, the output node.
    pub outputs: BTreeMap<NodeId, Tensor>,
    /// Evaluated node ids in execution order.
    pub evaluated: Vec<NodeId>,
    /// Wall time per evaluated node, parallel to `evaluated`.
    pub layer_ms: Vec<f64>,
}

pub fn execute(model: &Model, plan: &ExecPlan) -> Result<Execution, EngineError> {
    run(model, plan, false).map(|(exec, _)| exec)
}

/// Full forward pass returning every node's output tensor along with the
/// per-layer timings. Used by calibration.
pub fn execute_all(model: &Model, input: Tensor) -> Result<(Execution, Vec<Tensor>), EngineError> {
    let plan = ExecPlan::full(model.graph(), input);
    let (exec, all) = run(model, &plan, true)?;
    Ok((exec, all.into_iter().map(|t| t.expect("full range")).collect()))
}

pub fn forward_logits(model: &Model, input: Tensor) -> Result<Tensor, EngineError> {
    let out = model.graph().output_id();
    let mut exec = execute(model, &ExecPlan::full(model.graph(), input))?;
    Ok(exec.outputs.remove(&out).expect("output node always emitted"))
}

fn run(
    model: &Model,
    plan: &ExecPlan,
    keep_all: bool,
) -> Result<(Execution, Vec<Option<Tensor>>), EngineError> {
    let graph = model.graph();
    let max = graph.output_id();
    if plan.from > plan.to || plan.to > max {
        return Err(EngineError::InvalidRange { from: plan.from, to: plan.to, max });
    }

    // Last consumer inside the range, so intermediates can be dropped early.
    let mut last_use = vec![None; max + 1];
    for id in plan.from..=plan.to {
        for &i in &graph.node(id).inputs {
            last_use[i] = Some(id);
        }
    }

    let mut produced: Vec<Option<Tensor>> = vec![None; max + 1];
    let mut exec = Execution::default();
    for id in plan.from..=plan.to {
        let node = graph.node(id);
        let started = Instant::now();
        let out = {
            let mut args = Vec::with_capacity(node.inputs.len());
            for &i in &node.inputs {
                let t = produced[i]
                    .as_ref()
                    .or_else(|| plan.inject.get(&i))
                    .ok_or(EngineError::MissingDependency { node: id, input: i })?;
                args.push(t);
            }
            eval(model, id, &args, plan.inject.get(&id))?
        };
        exec.layer_ms.push(started.elapsed().as_secs_f64() * 1e3);
        exec.evaluated.push(id);

        let needed_later = id == max || graph.consumers(id).iter().any(|&c| c > plan.to);
        if needed_later {
            exec.outputs.insert(id, out.clone());
        }
        produced[id] = Some(out);
        if !keep_all {
            for &i in &node.inputs {
                if last_use[i] == Some(id) {
                    produced[i] = None;
                }
            }
        }
    }
    Ok((exec, produced))
}

fn eval(model: &Model, id: NodeId, args: &[&Tensor], injected: Option<&Tensor>) -> Result<Tensor, EngineError> {
    let node = model.graph().node(id);
    let shape_err = |msg: String| EngineError::Shape { node: id, msg };
    let params = || model.weights().get(id).ok_or(EngineError::MissingWeights(id));
    let out = match &node.op {
        Op::Input { shape } => {
            let t = injected.ok_or(EngineError::MissingDependency { node: id, input: id })?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(format!("input shape {:?}, expected {shape:?}", t.shape())));
            }
            t.clone()
        }
        Op::Conv2d { out_channels, kernel, stride, padding } => {
            conv2d(args[0], params()?, *out_channels, *kernel, *stride, *padding).map_err(shape_err)?
        }
        Op::Relu => {
            let data = args[0].data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Tensor::new(args[0].shape().to_vec(), data).expect("same shape")
        }
        Op::Add => {
            let shape = args[0].shape();
            if let Some(bad) = args.iter().find(|t| t.shape() != shape) {
                return Err(shape_err(format!("add of {:?} and {:?}", shape, bad.shape())));
            }
            let mut data = args[0].data().to_vec();
            for t in &args[1..] {
                for (acc, v) in data.iter_mut().zip(t.data()) {
                    *acc += v;
                }
            }
            Tensor::new(shape.to_vec(), data).expect("same shape")
        }
        Op::MaxPool { kernel, stride } => pool(args[0], *kernel, *stride, true).map_err(shape_err)?,
        Op::AvgPool { kernel, stride } => pool(args[0], *kernel, *stride, false).map_err(shape_err)?,
        Op::Dense { units } => dense(args[0], params()?, *units).map_err(shape_err)?,
        Op::Flatten => args[0].reshaped(vec![args[0].len()]).expect("same length"),
        Op::Concat => {
            let tail = &args[0].shape()[1..];
            if let Some(bad) = args.iter().find(|t| &t.shape()[1..] != tail) {
                return Err(shape_err(format!("concat of {:?} and {:?}", args[0].shape(), bad.shape())));
            }
            let lead: usize = args.iter().map(|t| t.shape()[0]).sum();
            let data = args.iter().flat_map(|t| t.data().iter().copied()).collect();
            let mut shape = vec![lead];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data).expect("consistent concat")
        }
        Op::Output => args[0].clone(),
    };
    Ok(out)
}

fn out_dim(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || len + 2 * padding < kernel {
        None
    } else {
        Some((len + 2 * padding - kernel) / stride + 1)
    }
}

fn conv2d(
    x: &Tensor,
    params: &[f32],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor, String> {
    let [in_c, h, w] = x.shape() else {
        return Err(format!("conv2d expects [C, H, W], got {:?}", x.shape()));
    };
    let (in_c, h, w) = (*in_c, *h, *w);
    let (oh, ow) = match (out_dim(h, k, stride, pad), out_dim(w, k, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(format!("kernel {k} stride {stride} does not fit {h}x{w}")),
    };
    let kernel_len = out_c * in_c * k * k;
    if params.len() != kernel_len + out_c {
        return Err(format!("expected {} conv parameters, found {}", kernel_len + out_c, params.len()));
    }
    let (kernels, bias) = params.split_at(kernel_len);
    let xd = x.data();
    let mut out = vec![0.0f32; out_c * oh * ow];
    for o in 0..out_c {
        let ko = &kernels[o * in_c * k * k..(o + 1) * in_c * k * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for c in 0..in_c {
                    let kc = &ko[c * k * k..(c + 1) * k * k];
                    let plane = &xd[c * h * w..(c + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kc[ky * k + kx] * row[ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![out_c, oh, ow], out).map_err(|e| e.to_string())
}

fn pool(x: &Tensor, k: usize, stride: usize, max: bool) -> Result<Tensor, String> {
    let [c, h, w] = x.shape() else {
        return Err(format!("pooling expects [C, H, W], got {:?}", x.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    let (oh, ow) = match (out_dim(h, k, stride, 0), out_dim(w, k, stride, 0)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(format!("window {k} stride {stride} does not fit {h}x{w}")),
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let norm = 1.0 / (k * k) as f32;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if max { f32::NEG_INFINITY } else { 0.0 };
                for ky in 0..k {
                    for kx in 0..k {
                        let v = xd[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                        if max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                    }
                }
                out.push(if max { acc } else { acc * norm });
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).map_err(|e| e.to_string())
}

fn dense(x: &Tensor, params: &[f32], units: usize) -> Result<Tensor, String> {
    let n = x.len();
    if params.len() != units * n + units {
        return Err(format!("expected {} dense parameters for {n} inputs, found {}", units * n + units, params.len()));
    }
    let (matrix, bias) = params.split_at(units * n);
    let out = (0..units)
        .map(|u| {
            let row = &matrix[u * n..(u + 1) * n];
            row.iter().zip(x.data()).fold(bias[u], |acc, (w, v)| acc + w * v)
        })
        .collect();
    Tensor::new(vec![units], out).map_err(|e| e.to_string())
}

/// Static output shape of every node.
pub fn infer_shapes(graph: &DepGraph) -> Result<Vec<Vec<usize>>, EngineError> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(graph.nodes().len());
    for node in graph.nodes() {
        let err = |msg: String| EngineError::Shape { node: node.id, msg };
        let ins: Vec<&[usize]> = node.inputs.iter().map(|&i| shapes[i].as_slice()).collect();
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize), EngineError> {
            match s {
                [c, h, w] => Ok((*c, *h, *w)),
                other => Err(err(format!("expects [C, H, W], got {other:?}"))),
            }
        };
        let shape = match &node.op {
            Op::Input { shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(err(format!("invalid input shape {shape:?}")));
                }
                shape.clone()
            }
            Op::Conv2d { out_channels, kernel, stride, padding } => {
                let (_, h, w) = spatial(ins[0])?;
                match (out_dim(h, *kernel, *stride, *padding), out_dim(w, *kernel, *stride, *padding)) {
                    (Some(oh), Some(ow)) if *out_channels > 0 => vec![*out_channels, oh, ow],
                    _ => return Err(err(format!("conv2d does not fit {h}x{w}"))),
                }
            }
            Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
                let (c, h, w) = spatial(ins[0])?;
                match (out_dim(h, *kernel, *stride, 0), out_dim(w, *kernel, *stride, 0)) {
                    (Some(oh), Some(ow)) => vec![c, oh, ow],
                    _ => return Err(err(format!("pool window does not fit {h}x{w}"))),
                }
            }
            Op::Relu | Op::Output => ins[0].to_vec(),
            Op::Add => {
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(err(format!("add of mismatched shapes {ins:?}")));
                }
                ins[0].to_vec()
            }
            Op::Dense { units } if *units > 0 => vec![*units],
            Op::Dense { .. } => return Err(err("dense with zero units".into())),
            Op::Flatten => vec![ins[0].iter().product()],
            Op::Concat => {
                if ins.iter().any(|s| s.len() != ins[0].len() || s[1..] != ins[0][1..]) {
                    return Err(err(format!("concat of mismatched shapes {ins:?}")));
                }
                let mut s = ins[0].to_vec();
                s[0] = ins.iter().map(|s| s[0]).sum();
                s
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Weights;

    fn model(ops: Vec<(Op, Vec<NodeId>)>, params: Vec<(NodeId, Vec<f32>)>) -> Model {
        Model::new(DepGraph::new(ops).unwrap(), Weights::new(params.into_iter().collect())).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let m = model(
            vec![(Op::Input { shape: vec![3] }, vec![]), (Op::Relu, vec![0]), (Op::Output, vec![1])],
            vec![],
        );
        let out = forward_logits(&m, Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_dense() {
        let m = model(
            vec![(Op::Input { shape: vec![2] }, vec![]), (Op::Dense { units: 2 }, vec![0]), (Op::Output, vec![1])],
            vec![(1, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])],
        );
        let out = forward_logits(&m, Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn identity_pointwise_conv() {
        let c = 3;
        let mut params = vec![0.0; c * c];
        for i in 0..c {
            params[i * c + i] = 1.0;
        }
        params.extend([0.0; 3]);
        let m = model(
            vec![
                (Op::Input { shape: vec![3, 4, 5] }, vec![]),
                (Op::Conv2d { out_channels: 3, kernel: 1, stride: 1, padding: 0 }, vec![0]),
                (Op::Output, vec![1]),
            ],
            vec![(1, params)],
        );
        let data: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin()).collect();
        let input = Tensor::new(vec![3, 4, 5], data).unwrap();
        assert_eq!(forward_logits(&m, input.clone()).unwrap(), input);
    }

    #[test]
    fn conv_padding_and_stride_against_hand_values() {
        // 1x3x3 input, single 2x2 all-ones kernel, bias 1, stride 1, pad 0.
        let m = model(
            vec![
                (Op::Input { shape: vec![1, 3, 3] }, vec![]),
                (Op::Conv2d { out_channels: 1, kernel: 2, stride: 1, padding: 0 }, vec![0]),
                (Op::Output, vec![1]),
            ],
            vec![(1, vec![1.0, 1.0, 1.0, 1.0, 1.0])],
        );
        let input = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let out = forward_logits(&m, input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[13.0, 17.0, 25.0, 29.0]);
    }

    #[test]
    fn pooling_and_concat() {
        let m = model(
            vec![
                (Op::Input { shape: vec![1, 2, 2] }, vec![]),
                (Op::MaxPool { kernel: 2, stride: 2 }, vec![0]),
                (Op::AvgPool { kernel: 2, stride: 2 }, vec![0]),
                (Op::Concat, vec![1, 2]),
                (Op::Flatten, vec![3]),
                (Op::Output, vec![4]),
            ],
            vec![],
        );
        let out = forward_logits(&m, Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[6.0, 3.0]);
    }

    fn residual() -> Model {
        model(
            vec![
                (Op::Input { shape: vec![1, 3, 3] }, vec![]),
                (Op::Conv2d { out_channels: 1, kernel: 3, stride: 1, padding: 1 }, vec![0]),
                (Op::Relu, vec![1]),
                (Op::Add, vec![2, 0]),
                (Op::Output, vec![3]),
            ],
            vec![(1, vec![0.5, -1.0, 0.25, 1.0, -0.5, 0.75, -0.25, 1.0, 0.5, -0.1])],
        )
    }

    #[test]
    fn residual_split_matches_unsplit() {
        let m = residual();
        let input = Tensor::new(vec![1, 3, 3], vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.0, 1.1, -0.7, 0.5]).unwrap();
        let full = forward_logits(&m, input.clone()).unwrap();

        let client = execute(&m, &ExecPlan::client(2, input)).unwrap();
        assert_eq!(client.outputs.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(client.evaluated, vec![0, 1, 2]);

        let server = execute(&m, &ExecPlan::server(m.graph(), 2, client.outputs)).unwrap();
        assert_eq!(server.evaluated, vec![3, 4]);
        assert_eq!(server.outputs[&4].to_le_bytes(), full.to_le_bytes());
    }

    #[test]
    fn missing_injection_is_reported() {
        let m = residual();
        let input = Tensor::new(vec![1, 3, 3], vec![0.0; 9]).unwrap();
        let mut deps = execute(&m, &ExecPlan::client(2, input)).unwrap().outputs;
        deps.remove(&0);
        assert_eq!(
            execute(&m, &ExecPlan::server(m.graph(), 2, deps)).unwrap_err(),
            EngineError::MissingDependency { node: 3, input: 0 }
        );
    }

    #[test]
    fn wrong_input_shape_is_a_shape_error() {
        let m = residual();
        let err = forward_logits(&m, Tensor::new(vec![1, 9], vec![0.0; 9]).unwrap()).unwrap_err();
        assert!(matches!(err, EngineError::Shape { node: 0, .. }));
    }

    #[test]
    fn shape_inference_rejects_mismatched_add() {
        let g = DepGraph::new(vec![
            (Op::Input { shape: vec![1, 4, 4] }, vec![]),
            (Op::MaxPool { kernel: 2, stride: 2 }, vec![0]),
            (Op::Add, vec![0, 1]),
            (Op::Output, vec![2]),
        ])
        .unwrap();
        assert!(matches!(infer_shapes(&g), Err(EngineError::Shape { node: 2, .. })));
    }
}
