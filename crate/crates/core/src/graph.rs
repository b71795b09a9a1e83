//! Fused transformer-encoder computation graph.
//!
//! Builds the operator sequence for a given (batch, sequence length), derives
//! the usage records of every intermediate tensor, and accounts GEMM FLOPs.
//! Non-GEMM kernels between two GEMMs are collapsed into a single fused
//! operator, so the operator list alternates between GEMM and fused nodes.

use std::collections::HashSet;

use thiserror::Error;

/// Bytes per tensor element. All activations are 32-bit floats.
pub const ELEM_BYTES: u64 = 4;

/// Identifier of an intermediate tensor.
pub type TensorId = String;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("all model dimensions must be at least 1")]
    ZeroDimension,
    #[error("hidden_size {hidden} is not divisible by num_heads {heads}")]
    HeadSplit { hidden: usize, heads: usize },
    #[error("seq_len {seq_len} exceeds max_seq_len {max_seq_len}")]
    SeqLenTooLong { seq_len: usize, max_seq_len: usize },
    #[error("batch and seq_len must be at least 1")]
    EmptyShape,
    #[error("malformed usage record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

/// Encoder-stack hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        hidden_size: usize,
        intermediate_size: usize,
        max_seq_len: usize,
    ) -> Result<Self, GraphError> {
        if num_layers == 0
            || num_heads == 0
            || hidden_size == 0
            || intermediate_size == 0
            || max_seq_len == 0
        {
            return Err(GraphError::ZeroDimension);
        }
        if hidden_size % num_heads != 0 {
            return Err(GraphError::HeadSplit { hidden: hidden_size, heads: num_heads });
        }
        Ok(Self { num_layers, num_heads, hidden_size, intermediate_size, max_seq_len })
    }

    /// The 12-layer base encoder configuration used for calibration.
    pub fn bert_base() -> Self {
        Self::new(12, 12, 768, 3072, 512).expect("valid preset")
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// One intermediate tensor's size and live interval over the topological
/// operator order: alive from `first_op` (its producer) through `last_op`
/// (its last consumer), inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorUsageRecord {
    pub tensor_id: TensorId,
    pub first_op: usize,
    pub last_op: usize,
    pub size: u64,
}

impl TensorUsageRecord {
    pub fn new(tensor_id: impl Into<TensorId>, first_op: usize, last_op: usize, size: u64) -> Self {
        Self { tensor_id: tensor_id.into(), first_op, last_op, size }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.first_op > self.last_op {
            return Err(GraphError::MalformedRecord {
                line: 0,
                reason: format!("{}: first_op > last_op", self.tensor_id),
            });
        }
        if self.size == 0 {
            return Err(GraphError::MalformedRecord {
                line: 0,
                reason: format!("{}: size must be > 0", self.tensor_id),
            });
        }
        Ok(())
    }

    /// Whether two live intervals intersect: max(first_ops) <= min(last_ops).
    pub fn overlaps(&self, other: &Self) -> bool {
        self.first_op.max(other.first_op) <= self.last_op.min(other.last_op)
    }
}

/// Operator node kind. GEMMs carry their multiply shape (batched GEMMs are
/// flattened into `m`); everything between two GEMMs is one fused node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    Gemm { m: u64, n: u64, k: u64 },
    Fused { label: &'static str },
}

impl OpKind {
    /// FLOPs under the 2*m*n*k convention; fused nodes count as zero.
    pub fn flops(&self) -> u64 {
        match self {
            OpKind::Gemm { m, n, k } => 2 * m * n * k,
            OpKind::Fused { .. } => 0,
        }
    }
}

/// An operator in topological order together with the tensor it produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpDesc {
    pub kind: OpKind,
    pub output: TensorId,
}

/// Fused encoder graph: operator list plus intermediate-tensor usage records.
///
/// `layer_repeat` is 1 for a fully emitted graph. In single-layer mode the
/// ops and records describe one layer and `layer_repeat` carries the stack
/// depth, so offset planning can run once and be reused per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedGraph {
    pub ops: Vec<OpDesc>,
    pub tensors: Vec<TensorUsageRecord>,
    pub layer_repeat: usize,
}

impl FusedGraph {
    /// Total GEMM FLOPs: the 2*m*n*k sum over listed GEMM ops, scaled by
    /// `layer_repeat`.
    pub fn gemm_flops(&self) -> u64 {
        self.ops.iter().map(|op| op.kind.flops()).sum::<u64>() * self.layer_repeat as u64
    }

    pub fn usage_records(&self) -> &[TensorUsageRecord] {
        &self.tensors
    }
}

/// Serializes records to the line format `tensor_id first_op last_op size_bytes`.
pub fn records_to_string(records: &[TensorUsageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} {} {}\n", r.tensor_id, r.first_op, r.last_op, r.size));
    }
    out
}

/// Parses the record line format. Blank lines and `#` comments are skipped.
pub fn records_from_str(s: &str) -> Result<Vec<TensorUsageRecord>, GraphError> {
    let mut records = Vec::new();
    for (idx, raw) in s.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(GraphError::MalformedRecord {
                line,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |f: &str, what: &str| {
            f.parse::<u64>().map_err(|_| GraphError::MalformedRecord {
                line,
                reason: format!("{what} is not an unsigned integer: {f}"),
            })
        };
        let rec = TensorUsageRecord::new(
            fields[0],
            parse(fields[1], "first_op")? as usize,
            parse(fields[2], "last_op")? as usize,
            parse(fields[3], "size_bytes")?,
        );
        rec.validate().map_err(|e| match e {
            GraphError::MalformedRecord { reason, .. } => GraphError::MalformedRecord { line, reason },
            other => other,
        })?;
        records.push(rec);
    }
    Ok(records)
}

fn check_shape(config: &ModelConfig, batch: usize, seq_len: usize) -> Result<(), GraphError> {
    if batch == 0 || seq_len == 0 {
        return Err(GraphError::EmptyShape);
    }
    if seq_len > config.max_seq_len {
        return Err(GraphError::SeqLenTooLong { seq_len, max_seq_len: config.max_seq_len });
    }
    Ok(())
}

/// Builds the fused graph for the full encoder stack.
pub fn build_encoder_graph(
    config: &ModelConfig,
    batch: usize,
    seq_len: usize,
) -> Result<FusedGraph, GraphError> {
    check_shape(config, batch, seq_len)?;
    let mut ops = Vec::new();
    let mut tensors = Vec::new();
    for layer in 0..config.num_layers {
        push_layer(config, batch, seq_len, layer, config.num_layers, &mut ops, &mut tensors);
    }
    Ok(FusedGraph { ops, tensors, layer_repeat: 1 })
}

/// Builds one layer's ops and records with `layer_repeat = num_layers`.
///
/// Every layer of the stack is structurally identical, so offsets planned for
/// one layer's records can be reused across the stack instead of planning all
/// `num_layers * OPS_PER_LAYER` tensors.
pub fn build_encoder_layer_graph(
    config: &ModelConfig,
    batch: usize,
    seq_len: usize,
) -> Result<FusedGraph, GraphError> {
    check_shape(config, batch, seq_len)?;
    let mut ops = Vec::new();
    let mut tensors = Vec::new();
    push_layer(config, batch, seq_len, 0, 1, &mut ops, &mut tensors);
    Ok(FusedGraph { ops, tensors, layer_repeat: config.num_layers })
}

/// Operators emitted per encoder layer (6 GEMMs interleaved with 6 fused nodes).
pub const OPS_PER_LAYER: usize = 12;

fn push_layer(
    config: &ModelConfig,
    batch: usize,
    seq_len: usize,
    layer: usize,
    emitted_layers: usize,
    ops: &mut Vec<OpDesc>,
    tensors: &mut Vec<TensorUsageRecord>,
) {
    let b = batch as u64;
    let s = seq_len as u64;
    let h = config.hidden_size as u64;
    let heads = config.num_heads as u64;
    let d = config.head_dim() as u64;
    let inter = config.intermediate_size as u64;
    let base = layer * OPS_PER_LAYER;

    let qkv_bytes = 3 * b * s * h * ELEM_BYTES;
    let score_bytes = b * heads * s * s * ELEM_BYTES;
    let hidden_bytes = b * s * h * ELEM_BYTES;
    let inter_bytes = b * s * inter * ELEM_BYTES;

    let id = |name: &str| format!("l{layer}_{name}");

    let mut op = |kind: OpKind, output: &str| {
        ops.push(OpDesc { kind, output: id(output) });
    };

    // Multi-head attention half.
    op(OpKind::Gemm { m: b * s, n: 3 * h, k: h }, "qkv");
    op(OpKind::Fused { label: "add_bias_transpose" }, "qkv_t");
    op(OpKind::Gemm { m: b * heads * s, n: s, k: d }, "scores");
    op(OpKind::Fused { label: "mask_softmax" }, "probs");
    op(OpKind::Gemm { m: b * heads * s, n: d, k: s }, "ctx");
    op(OpKind::Fused { label: "transpose_back" }, "ctx_t");
    op(OpKind::Gemm { m: b * s, n: h, k: h }, "attn_out");
    op(OpKind::Fused { label: "add_bias_residual_layernorm" }, "attn_ln");
    // Feed-forward half.
    op(OpKind::Gemm { m: b * s, n: inter, k: h }, "ffn_inner");
    op(OpKind::Fused { label: "add_bias_gelu" }, "ffn_act");
    op(OpKind::Gemm { m: b * s, n: h, k: inter }, "ffn_out");
    op(OpKind::Fused { label: "add_bias_residual_layernorm" }, "out");

    let mut rec = |name: &str, first: usize, last: usize, size: u64| {
        tensors.push(TensorUsageRecord::new(id(name), base + first, base + last, size));
    };

    rec("qkv", 0, 1, qkv_bytes);
    rec("qkv_t", 1, 4, qkv_bytes); // read by the score GEMM and the context GEMM
    rec("scores", 2, 3, score_bytes);
    rec("probs", 3, 4, score_bytes);
    rec("ctx", 4, 5, hidden_bytes);
    rec("ctx_t", 5, 6, hidden_bytes);
    rec("attn_out", 6, 7, hidden_bytes);
    rec("attn_ln", 7, 11, hidden_bytes); // feeds the FFN and the second residual add
    rec("ffn_inner", 8, 9, inter_bytes);
    rec("ffn_act", 9, 10, inter_bytes);
    rec("ffn_out", 10, 11, hidden_bytes);
    // The layer output stays live into the next layer: its QKV GEMM and the
    // residual add of its attention block.
    let out_last = if layer + 1 < emitted_layers { 11 + 8 } else { 11 };
    rec("out", 11, out_last, hidden_bytes);
}

/// GEMM FLOP split by sequence-length scaling: the component linear in `s`
/// (all projection and FFN GEMMs) and the component quadratic in `s` (the
/// two attention GEMMs).
pub fn flops_split(config: &ModelConfig, batch: usize, seq_len: usize) -> (u64, u64) {
    let b = batch as u64;
    let s = seq_len as u64;
    let h = config.hidden_size as u64;
    let inter = config.intermediate_size as u64;
    let layers = config.num_layers as u64;
    let linear = layers * b * (8 * s * h * h + 4 * s * h * inter);
    let quadratic = layers * b * (4 * s * s * h);
    (linear, quadratic)
}

/// Total GEMM FLOPs for one inference, closed form. Equals the per-GEMM
/// 2*m*n*k enumeration over [`build_encoder_graph`] exactly; non-GEMM FLOPs
/// are not counted.
pub fn flops(config: &ModelConfig, batch: usize, seq_len: usize) -> u64 {
    let (linear, quadratic) = flops_split(config, batch, seq_len);
    linear + quadratic
}

/// Rejects duplicate tensor ids and invalid intervals/sizes.
pub fn validate_records(records: &[TensorUsageRecord]) -> Result<(), GraphError> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.tensor_id.as_str()) {
            return Err(GraphError::MalformedRecord {
                line: 0,
                reason: format!("duplicate tensor_id {}", r.tensor_id),
            });
        }
    }
    Ok(())
}
