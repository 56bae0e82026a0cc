use std::collections::BTreeMap;
use std::time::Instant;

use super::profile::policy_for;
use super::{ConfigProfile, ProfileDB, ProfilerError};
use crate::engine::{execute, execute_all, ExecPlan};
use crate::graph::NodeId;
use crate::ispm::{pack, unpack, Codec, Precision};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CalibrationSpec {
    pub splits: Vec<NodeId>,
    pub precisions: Vec<Precision>,
    pub codec: Codec,
    /// Processing-unit tag for the measured layer times. The same times
    /// stand in for the server until a server-side calibration replaces
    /// them.
    pub unit: String,
}

impl CalibrationSpec {
    /// Every candidate split of `model` (only those right after a ReLU
    /// when `relu_only`), with the given precisions.
    pub fn candidates(model: &Model, relu_only: bool, precisions: Vec<Precision>, codec: Codec) -> Self {
        Self {
            splits: model.graph().candidate_splits(relu_only).iter().map(|s| s.split).collect(),
            precisions,
            codec,
            unit: "host".into(),
        }
    }
}

/// One pass over `inputs`: mean layer times, and for every configuration
/// the mean packing time, mean packed size and top-1 disagreement against
/// the unsplit full-precision logits.
pub fn calibrate(model: &Model, inputs: &[Tensor], spec: &CalibrationSpec) -> Result<ProfileDB, ProfilerError> {
    if inputs.is_empty() {
        return Err(ProfilerError::EmptyCalibration);
    }
    let graph = model.graph();
    let last = graph.output_id();
    let mut splits = spec.splits.clone();
    splits.sort_unstable();
    splits.dedup();
    let cuts = splits
        .iter()
        .map(|&s| graph.split_dependencies(s).map(|sp| sp.dep_ids))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ProfilerError::Malformed(e.to_string()))?;
    let mut precisions = Vec::new();
    for &p in &spec.precisions {
        if !precisions.contains(&p) {
            precisions.push(p);
        }
    }
    let np = precisions.len();

    // Warm caches so the first timed pass is not an outlier.
    execute_all(model, inputs[0].clone())?;

    let mut layer_ms = vec![0.0; last + 1];
    let mut sums = vec![ConfigProfile::default(); splits.len() * np];
    for input in inputs {
        let (exec, tensors) = execute_all(model, input.clone())?;
        for (&id, &ms) in exec.evaluated.iter().zip(&exec.layer_ms) {
            layer_ms[id] += ms;
        }
        let reference_top1 = tensors[last].argmax();

        for (si, (&s, deps)) in splits.iter().zip(&cuts).enumerate() {
            if s == last {
                continue;
            }
            for (pi, &precision) in precisions.iter().enumerate() {
                let policy = policy_for(precision, spec.codec);
                let started = Instant::now();
                let packed = deps
                    .iter()
                    .map(|&d| pack(d, &tensors[d], policy))
                    .collect::<Result<Vec<_>, _>>()?;
                let pack_ms = started.elapsed().as_secs_f64() * 1e3;

                let cell = &mut sums[si * np + pi];
                cell.pack_ms += pack_ms;
                cell.dep_bytes += packed.iter().map(|p| p.encoded_len()).sum::<usize>() as f64;
                if precision != Precision::Passthrough {
                    let restored = packed
                        .iter()
                        .map(|p| Ok((p.dep_id, unpack(p)?)))
                        .collect::<Result<BTreeMap<_, _>, ProfilerError>>()?;
                    let mut run = execute(model, &ExecPlan::server(graph, s, restored))?;
                    let logits = run.outputs.remove(&last).expect("server range ends at the output");
                    if logits.argmax() != reference_top1 {
                        cell.acc_delta += 1.0;
                    }
                }
            }
        }
    }

    let n = inputs.len() as f64;
    layer_ms.iter_mut().for_each(|t| *t /= n);
    let entries = sums
        .into_iter()
        .map(|c| ConfigProfile {
            pack_ms: c.pack_ms / n,
            dep_bytes: c.dep_bytes / n,
            acc_delta: 100.0 * c.acc_delta / n,
        })
        .collect();
    let db = ProfileDB {
        model_digest: model.digest(),
        codec: spec.codec,
        layer_ms: BTreeMap::from([(spec.unit.clone(), layer_ms)]),
        client_unit: spec.unit.clone(),
        server_unit: spec.unit.clone(),
        splits,
        precisions,
        entries,
    };
    db.validate()?;
    Ok(db)
}
