//! Model parameters: embedding tables, role-attention projections,
//! relational graph convolution weights, the recurrent unit, and the
//! scoring head, plus a versioned JSON checkpoint with exact float
//! round-trip (shortest-representation serialization).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::ehr::EntitySpace;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding width.
    pub dim: usize,
    /// Recurrent state width.
    pub dim_h: usize,
    /// Scoring head hidden width.
    pub head_hidden: usize,
    pub n_diseases: usize,
    pub n_procedures: usize,
    pub n_medications: usize,
    /// Graph convolution layers.
    pub rgcn_layers: usize,
    /// Edge relation types.
    pub n_relations: usize,
}

impl ModelDims {
    pub fn new(space: &EntitySpace) -> ModelDims {
        ModelDims {
            dim: 64,
            dim_h: 64,
            head_hidden: 64,
            n_diseases: space.n_diseases,
            n_procedures: space.n_procedures,
            n_medications: space.n_medications,
            rgcn_layers: 2,
            n_relations: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("dim_h", self.dim_h),
            ("head_hidden", self.head_hidden),
            ("n_medications", self.n_medications),
            ("rgcn_layers", self.rgcn_layers),
            ("n_relations", self.n_relations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-entity-kind attention projection: scalar logit = w . h + b.
#[derive(Debug, Clone, PartialEq)]
pub struct DsaParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub dims: ModelDims,
    pub embed_d: Tensor,
    pub embed_p: Tensor,
    pub embed_m: Tensor,
    pub dsa_d: DsaParams,
    pub dsa_p: DsaParams,
    pub dsa_m: DsaParams,
    /// Self-loop weight per layer.
    pub rgcn_self: Vec<Tensor>,
    /// Relation update matrix per layer and relation; the effective
    /// relation weight is identity plus this.
    pub rgcn_rel: Vec<Vec<Tensor>>,
    pub gru_wz: Tensor,
    pub gru_uz: Tensor,
    pub gru_bz: Tensor,
    pub gru_wr: Tensor,
    pub gru_ur: Tensor,
    pub gru_br: Tensor,
    pub gru_wn: Tensor,
    pub gru_un: Tensor,
    pub gru_bn: Tensor,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

fn uniform_tensor(rows: usize, cols: usize, bound: f64, seed: u64, name: &str) -> Tensor {
    let mut rng = stream(seed, &format!("init/{name}"));
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { rows, cols, data }
}

/// Fan-balanced uniform initialization for a rows-by-cols weight applied
/// as output = W input.
fn glorot(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform_tensor(rows, cols, bound, seed, name)
}

fn embedding(rows: usize, dim: usize, seed: u64, name: &str) -> Tensor {
    uniform_tensor(rows, dim, 1.0 / (dim as f64).sqrt(), seed, name)
}

impl ModelParameters {
    /// Deterministic seeded initialization: every tensor draws from its own
    /// named stream, so values do not depend on initialization order.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<ModelParameters> {
        dims.validate()?;
        let d = dims.dim;
        let dsa = |name: &str| DsaParams {
            w: uniform_tensor(d, 1, 1.0 / (d as f64).sqrt(), seed, &format!("{name}.w")),
            b: Tensor::zeros(1, 1),
        };
        let rgcn_self = (0..dims.rgcn_layers)
            .map(|l| glorot(d, d, seed, &format!("rgcn_self_{l}")))
            .collect();
        let rgcn_rel = (0..dims.rgcn_layers)
            .map(|l| {
                (0..dims.n_relations)
                    .map(|r| glorot(d, d, seed, &format!("rgcn_rel_{l}_{r}")))
                    .collect()
            })
            .collect();
        let input = 3 * d;
        Ok(ModelParameters {
            dims: *dims,
            embed_d: embedding(dims.n_diseases, d, seed, "embed_d"),
            embed_p: embedding(dims.n_procedures, d, seed, "embed_p"),
            embed_m: embedding(dims.n_medications, d, seed, "embed_m"),
            dsa_d: dsa("dsa_d"),
            dsa_p: dsa("dsa_p"),
            dsa_m: dsa("dsa_m"),
            rgcn_self,
            rgcn_rel,
            gru_wz: glorot(dims.dim_h, input, seed, "gru_wz"),
            gru_uz: glorot(dims.dim_h, dims.dim_h, seed, "gru_uz"),
            gru_bz: Tensor::zeros(dims.dim_h, 1),
            gru_wr: glorot(dims.dim_h, input, seed, "gru_wr"),
            gru_ur: glorot(dims.dim_h, dims.dim_h, seed, "gru_ur"),
            gru_br: Tensor::zeros(dims.dim_h, 1),
            gru_wn: glorot(dims.dim_h, input, seed, "gru_wn"),
            gru_un: glorot(dims.dim_h, dims.dim_h, seed, "gru_un"),
            gru_bn: Tensor::zeros(dims.dim_h, 1),
            head_w1: glorot(dims.head_hidden, dims.dim_h, seed, "head_w1"),
            head_b1: Tensor::zeros(dims.head_hidden, 1),
            head_w2: glorot(dims.n_medications, dims.head_hidden, seed, "head_w2"),
            head_b2: Tensor::zeros(dims.n_medications, 1),
        })
    }

    /// Canonical (name, tensor) listing; iteration order is fixed, so
    /// optimizer state can be keyed by position.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed_d".into(), &self.embed_d),
            ("embed_p".into(), &self.embed_p),
            ("embed_m".into(), &self.embed_m),
            ("dsa_d.w".into(), &self.dsa_d.w),
            ("dsa_d.b".into(), &self.dsa_d.b),
            ("dsa_p.w".into(), &self.dsa_p.w),
            ("dsa_p.b".into(), &self.dsa_p.b),
            ("dsa_m.w".into(), &self.dsa_m.w),
            ("dsa_m.b".into(), &self.dsa_m.b),
        ];
        for (l, t) in self.rgcn_self.iter().enumerate() {
            out.push((format!("rgcn_self_{l}"), t));
        }
        for (l, rels) in self.rgcn_rel.iter().enumerate() {
            for (r, t) in rels.iter().enumerate() {
                out.push((format!("rgcn_rel_{l}_{r}"), t));
            }
        }
        out.extend([
            ("gru_wz".to_string(), &self.gru_wz),
            ("gru_uz".to_string(), &self.gru_uz),
            ("gru_bz".to_string(), &self.gru_bz),
            ("gru_wr".to_string(), &self.gru_wr),
            ("gru_ur".to_string(), &self.gru_ur),
            ("gru_br".to_string(), &self.gru_br),
            ("gru_wn".to_string(), &self.gru_wn),
            ("gru_un".to_string(), &self.gru_un),
            ("gru_bn".to_string(), &self.gru_bn),
            ("head_w1".to_string(), &self.head_w1),
            ("head_b1".to_string(), &self.head_b1),
            ("head_w2".to_string(), &self.head_w2),
            ("head_b2".to_string(), &self.head_b2),
        ]);
        out
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed_d".into(), &mut self.embed_d),
            ("embed_p".into(), &mut self.embed_p),
            ("embed_m".into(), &mut self.embed_m),
            ("dsa_d.w".into(), &mut self.dsa_d.w),
            ("dsa_d.b".into(), &mut self.dsa_d.b),
            ("dsa_p.w".into(), &mut self.dsa_p.w),
            ("dsa_p.b".into(), &mut self.dsa_p.b),
            ("dsa_m.w".into(), &mut self.dsa_m.w),
            ("dsa_m.b".into(), &mut self.dsa_m.b),
        ];
        for (l, t) in self.rgcn_self.iter_mut().enumerate() {
            out.push((format!("rgcn_self_{l}"), t));
        }
        for (l, rels) in self.rgcn_rel.iter_mut().enumerate() {
            for (r, t) in rels.iter_mut().enumerate() {
                out.push((format!("rgcn_rel_{l}_{r}"), t));
            }
        }
        out.push(("gru_wz".to_string(), &mut self.gru_wz));
        out.push(("gru_uz".to_string(), &mut self.gru_uz));
        out.push(("gru_bz".to_string(), &mut self.gru_bz));
        out.push(("gru_wr".to_string(), &mut self.gru_wr));
        out.push(("gru_ur".to_string(), &mut self.gru_ur));
        out.push(("gru_br".to_string(), &mut self.gru_br));
        out.push(("gru_wn".to_string(), &mut self.gru_wn));
        out.push(("gru_un".to_string(), &mut self.gru_un));
        out.push(("gru_bn".to_string(), &mut self.gru_bn));
        out.push(("head_w1".to_string(), &mut self.head_w1));
        out.push(("head_b1".to_string(), &mut self.head_b1));
        out.push(("head_w2".to_string(), &mut self.head_w2));
        out.push(("head_b2".to_string(), &mut self.head_b2));
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter tensor, in the same canonical order as
/// [`ModelParameters::tensors`], so a forward pass can look weights up by
/// field and the optimizer can zip gradients with tensors by position.
pub struct ParameterLeaves {
    pub embed_d: NodeId,
    pub embed_p: NodeId,
    pub embed_m: NodeId,
    /// (w, b) per entity kind: diseases, procedures, medications.
    pub dsa: [(NodeId, NodeId); 3],
    pub rgcn_self: Vec<NodeId>,
    pub rgcn_rel: Vec<Vec<NodeId>>,
    pub gru_wz: NodeId,
    pub gru_uz: NodeId,
    pub gru_bz: NodeId,
    pub gru_wr: NodeId,
    pub gru_ur: NodeId,
    pub gru_br: NodeId,
    pub gru_wn: NodeId,
    pub gru_un: NodeId,
    pub gru_bn: NodeId,
    pub head_w1: NodeId,
    pub head_b1: NodeId,
    pub head_w2: NodeId,
    pub head_b2: NodeId,
}

impl ParameterLeaves {
    pub fn load(tape: &mut Tape, params: &ModelParameters) -> ParameterLeaves {
        let ids: Vec<NodeId> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf_matrix(t.rows, t.cols, t.data.clone()))
            .collect();
        Self::from_ordered_ids(&params.dims, &ids)
    }

    /// Reassembles the struct from ids listed in canonical tensor order.
    pub fn from_ordered_ids(dims: &ModelDims, ids: &[NodeId]) -> ParameterLeaves {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("leaf id list too short");
        let leaves = ParameterLeaves {
            embed_d: next(),
            embed_p: next(),
            embed_m: next(),
            dsa: [(next(), next()), (next(), next()), (next(), next())],
            rgcn_self: (0..dims.rgcn_layers).map(|_| next()).collect(),
            rgcn_rel: (0..dims.rgcn_layers)
                .map(|_| (0..dims.n_relations).map(|_| next()).collect())
                .collect(),
            gru_wz: next(),
            gru_uz: next(),
            gru_bz: next(),
            gru_wr: next(),
            gru_ur: next(),
            gru_br: next(),
            gru_wn: next(),
            gru_un: next(),
            gru_bn: next(),
            head_w1: next(),
            head_b1: next(),
            head_w2: next(),
            head_b2: next(),
        };
        assert!(it.next().is_none(), "leaf id list too long");
        leaves
    }

    /// Ids in canonical tensor order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embed_d, self.embed_p, self.embed_m];
        for (w, b) in self.dsa {
            out.push(w);
            out.push(b);
        }
        out.extend(&self.rgcn_self);
        for rels in &self.rgcn_rel {
            out.extend(rels);
        }
        out.extend([
            self.gru_wz,
            self.gru_uz,
            self.gru_bz,
            self.gru_wr,
            self.gru_ur,
            self.gru_br,
            self.gru_wn,
            self.gru_un,
            self.gru_bn,
            self.head_w1,
            self.head_b1,
            self.head_w2,
            self.head_b2,
        ]);
        out
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    dims: ModelDims,
    tensors: BTreeMap<String, Tensor>,
}

pub fn checkpoint_to_json(params: &ModelParameters, config_hash: Option<&str>) -> String {
    let doc = CheckpointDoc {
        version: CHECKPOINT_FORMAT_VERSION,
        config_hash: config_hash.map(str::to_owned),
        dims: params.dims,
        tensors: params.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
    };
    serde_json::to_string(&doc).expect("checkpoint serialization cannot fail")
}

pub fn checkpoint_from_json(json: &str) -> Result<(ModelParameters, Option<String>)> {
    let mut doc: CheckpointDoc =
        serde_json::from_str(json).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    if doc.version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            doc.version
        )));
    }
    let mut params = ModelParameters::init(&doc.dims, 0)?;
    let mut used = 0usize;
    for (name, tensor) in params.tensors_mut() {
        let stored = doc.tensors.remove(&name).ok_or_else(|| {
            Error::Validation(format!("checkpoint is missing tensor {name:?}"))
        })?;
        if stored.rows != tensor.rows || stored.cols != tensor.cols {
            return Err(Error::Validation(format!(
                "tensor {name:?} has shape {}x{}, expected {}x{}",
                stored.rows, stored.cols, tensor.rows, tensor.cols
            )));
        }
        *tensor = stored;
        used += 1;
    }
    if !doc.tensors.is_empty() {
        let extra: Vec<&String> = doc.tensors.keys().collect();
        return Err(Error::Validation(format!("checkpoint has unknown tensors {extra:?}")));
    }
    debug_assert!(used > 0);
    Ok((params, doc.config_hash))
}
