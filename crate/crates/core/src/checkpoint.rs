//! Model checkpoints.
//!
//! A checkpoint file is three parts back to back:
//!
//! 1. the magic line `ATGCN-CHECKPOINT 1\n`,
//! 2. one line of JSON (the manifest: model spec, gravity radii, training
//!    counters and a `(name, shape, offset)` entry per tensor),
//! 3. the payload: every tensor as little-endian IEEE-754 `f64`, at the byte
//!    offsets listed in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{build_partitioned_adjacency, GravityRadii, PartitionedGraph, SUBSETS};
use crate::model::{Model, ModelSpec};
use crate::skeleton::SkeletonLayout;

const MAGIC: &str = "ATGCN-CHECKPOINT 1";

/// Bookkeeping saved alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    pub seed: u64,
    pub epochs_completed: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    /// Gravity radii the partitioned graph was built from.
    pub radii: Vec<f64>,
    pub state: TrainingState,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

impl Manifest {
    /// The partitioned graph for the 18-joint layout from the stored radii.
    pub fn graph(&self) -> Result<PartitionedGraph> {
        let radii = GravityRadii { r: self.radii.clone() };
        build_partitioned_adjacency(&SkeletonLayout::openpose18(), &radii, 1e-9)
    }
}

pub fn write_checkpoint(model: &Model, state: &TrainingState, writer: impl Write) -> Result<()> {
    let mut writer = writer;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.state() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        spec: model.spec().clone(),
        radii: model.graph().radii.r.clone(),
        state: state.clone(),
        tensors,
        payload_bytes: payload.len(),
    };
    let json = serde_json::to_string(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    writeln!(writer, "{MAGIC}")?;
    writeln!(writer, "{json}")?;
    writer.write_all(&payload)?;
    writer.flush()?;
    Ok(())
}

pub fn save(model: &Model, state: &TrainingState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    write_checkpoint(model, state, std::io::BufWriter::new(file)).map_err(|e| e.in_file(path))
}

/// Manifest and raw tensors, before a model is assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn read_checkpoint(reader: impl Read) -> Result<RawCheckpoint> {
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::CorruptManifest("missing checkpoint header".into()));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let manifest: Manifest =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() < manifest.payload_bytes {
        return Err(Error::TruncatedPayload {
            expected: manifest.payload_bytes,
            found: payload.len(),
        });
    }
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 8;
        if end > manifest.payload_bytes {
            return Err(Error::CorruptManifest(format!(
                "tensor {} extends past the payload",
                entry.name
            )));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if tensors
            .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)
            .is_some()
        {
            return Err(Error::CorruptManifest(format!("tensor {} listed twice", entry.name)));
        }
    }
    Ok(RawCheckpoint { manifest, tensors })
}

pub fn read_file(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_checkpoint(file).map_err(|e| e.in_file(path))
}

impl RawCheckpoint {
    /// Assembles the stored model on `graph`.
    pub fn into_model(self, graph: PartitionedGraph) -> Result<(Model, TrainingState)> {
        let mut model = Model::new(self.manifest.spec.clone(), graph, 0)?;
        model.load_state(self.tensors)?;
        Ok((model, self.manifest.state))
    }

    /// Like [`Self::into_model`], after checking the stored spec against
    /// `expected`.
    pub fn into_model_as(self, graph: PartitionedGraph, expected: &ModelSpec) -> Result<(Model, TrainingState)> {
        let stored = &self.manifest.spec;
        if stored != expected {
            let channels = |s: &ModelSpec| s.blocks.iter().map(|b| b.out_channels).collect::<Vec<_>>();
            return Err(Error::Shape(format!(
                "checkpoint holds blocks {:?} with head {:?}, expected blocks {:?} with head {:?}",
                channels(stored),
                stored.head,
                channels(expected),
                expected.head
            )));
        }
        self.into_model(graph)
    }
}

pub fn load(path: impl AsRef<Path>, graph: PartitionedGraph) -> Result<(Model, TrainingState)> {
    read_file(path)?.into_model(graph)
}

/// Converts a state dict of the public reference ST-GCN implementation to
/// this crate's tensor names and layouts. Expected names (per block `i`):
///
/// | reference | here |
/// |---|---|
/// | `data_bn.{weight,bias,running_mean,running_var}` (`v*C + c`) | `stem.bn.*` (`c*J + j`) |
/// | `st_gcn_networks.i.gcn.conv.weight` `[S*O, C, 1, 1]` | `blocks.i.gcn.weight` `[S, C, O]` |
/// | `st_gcn_networks.i.gcn.conv.bias` `[S*O]` | `blocks.i.gcn.bias` `[S, O]` |
/// | `edge_importance.i` `[S, J, J]` (source, target) | `blocks.i.edge_importance` (target, source) |
/// | `st_gcn_networks.i.tcn.0.*` | `blocks.i.tcn.bn1.*` |
/// | `st_gcn_networks.i.tcn.2.{weight,bias}` `[O, O, K, 1]` | `blocks.i.tcn.conv.*` `[O, O, K]` |
/// | `st_gcn_networks.i.tcn.3.*` | `blocks.i.tcn.bn2.*` |
/// | `st_gcn_networks.i.residual.0.{weight,bias}` `[O, C, 1, 1]` | `blocks.i.residual.conv.*` `[O, C, 1]` |
/// | `st_gcn_networks.i.residual.1.*` | `blocks.i.residual.bn.*` |
/// | `fcn.weight` `[400, C, 1, 1]`, `fcn.bias` | `head.weight` `[C, 400]`, `head.bias` |
///
/// `num_batches_tracked` entries are dropped. Unknown names are an error.
pub fn import_reference_state(
    reference: BTreeMap<String, Tensor>,
    input_channels: usize,
    joints: usize,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, t) in reference {
        if name.ends_with("num_batches_tracked") {
            continue;
        }
        let (new_name, tensor) = if let Some(field) = name.strip_prefix("data_bn.") {
            let c = input_channels;
            if t.numel() != c * joints {
                return Err(Error::Shape(format!("{name}: expected {} values", c * joints)));
            }
            let d = t.data();
            let reordered = Tensor::from_fn(&[c * joints], |idx| d[(idx % joints) * c + idx / joints]);
            (format!("stem.bn.{field}"), reordered)
        } else if let Some(rest) = name.strip_prefix("edge_importance.") {
            let j = joints;
            if t.shape() != [SUBSETS, j, j] {
                return Err(Error::Shape(format!("{name}: expected [{SUBSETS}, {j}, {j}]")));
            }
            let d = t.data();
            let transposed = Tensor::from_fn(&[SUBSETS, j, j], |idx| {
                let (k, r, c) = (idx / (j * j), idx / j % j, idx % j);
                d[(k * j + c) * j + r]
            });
            (format!("blocks.{rest}.edge_importance"), transposed)
        } else if let Some(field) = name.strip_prefix("fcn.") {
            match field {
                "weight" => {
                    let (o, c) = (t.shape()[0], t.numel() / t.shape()[0]);
                    let d = t.data();
                    ("head.weight".to_string(), Tensor::from_fn(&[c, o], |idx| d[(idx % o) * c + idx / o]))
                }
                "bias" => ("head.bias".to_string(), t),
                _ => return Err(Error::Model(format!("unknown reference tensor {name}"))),
            }
        } else if let Some(rest) = name.strip_prefix("st_gcn_networks.") {
            let (block, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Model(format!("unknown reference tensor {name}")))?;
            let prefix = format!("blocks.{block}");
            let shape = t.shape().to_vec();
            let bn = |sub: &str, f: &str| format!("{prefix}.{sub}.{}", f);
            match field.split_once('.').map(|(a, b)| (a, b)) {
                Some(("gcn", "conv.weight")) => {
                    let (so, c) = (shape[0], shape[1]);
                    let o = so / SUBSETS;
                    let d = t.data();
                    let w = Tensor::from_fn(&[SUBSETS, c, o], |idx| {
                        let (k, ci, oo) = (idx / (c * o), idx / o % c, idx % o);
                        d[(k * o + oo) * c + ci]
                    });
                    (format!("{prefix}.gcn.weight"), w)
                }
                Some(("gcn", "conv.bias")) => {
                    let o = t.numel() / SUBSETS;
                    (format!("{prefix}.gcn.bias"), t.reshape(vec![SUBSETS, o])?)
                }
                Some(("tcn", f)) => match f.split_once('.') {
                    Some(("0", f)) => (bn("tcn.bn1", f), t),
                    Some(("2", "weight")) => {
                        let s = vec![shape[0], shape[1], shape[2]];
                        (format!("{prefix}.tcn.conv.weight"), t.reshape(s)?)
                    }
                    Some(("2", "bias")) => (format!("{prefix}.tcn.conv.bias"), t),
                    Some(("3", f)) => (bn("tcn.bn2", f), t),
                    _ => return Err(Error::Model(format!("unknown reference tensor {name}"))),
                },
                Some(("residual", f)) => match f.split_once('.') {
                    Some(("0", "weight")) => {
                        let s = vec![shape[0], shape[1], 1];
                        (format!("{prefix}.residual.conv.weight"), t.reshape(s)?)
                    }
                    Some(("0", "bias")) => (format!("{prefix}.residual.conv.bias"), t),
                    Some(("1", f)) => (bn("residual.bn", f), t),
                    _ => return Err(Error::Model(format!("unknown reference tensor {name}"))),
                },
                _ => return Err(Error::Model(format!("unknown reference tensor {name}"))),
            }
        } else {
            return Err(Error::Model(format!("unknown reference tensor {name}")));
        };
        out.insert(new_name, tensor);
    }
    Ok(out)
}
