//! The three attention variants.
//!
//! Early fusion (`sas_attention`) runs vanilla causal self-attention on an
//! integrated embedding. Non-invasive fusion (`nova_attention`) takes
//! queries and keys from the integrated embedding but values from the pure
//! item representation. Decoupled fusion (`dif_attention`) gives every
//! side-information stream its own query/key projections and logit matrix,
//! then fuses the logit matrices — not the embeddings — before softmax.
//!
//! All functions accept `[n, d]` inputs (single sequence, used by tests and
//! diagnostics) or `[B, n, d]` batches. Position streams may be `[n, d_f]`
//! while the batch is 3-D; their logits broadcast across the batch.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::trunc_normal;
use crate::numcore::Value;

/// How per-stream attention matrices combine into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Element-wise sum.
    Add,
    /// Learned linear map across the stacked source axis (one coefficient
    /// per source plus a bias), initialized to emulate addition.
    Concat,
    /// Softmax-normalized per-source scalars, so the weights sum to one.
    Gate,
}

/// Query/key projections for one side-information stream in one layer:
/// per head, `d_fj × d_hj` matrices.
#[derive(Debug, Clone)]
pub struct StreamProjections {
    pub w_q: Vec<Value>,
    pub w_k: Vec<Value>,
}

/// Parameters of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// Per head, `d × d_h` item projections.
    pub w_q: Vec<Value>,
    pub w_k: Vec<Value>,
    pub w_v: Vec<Value>,
    /// Per stream, the decoupled projections (empty outside the dif variant).
    pub streams: Vec<StreamProjections>,
    /// Per head, fusion coefficients: `p+1` scalars for gate, `p+2` for
    /// concat (the last is the bias). Empty for addition.
    pub fuse: Vec<Value>,
    /// `d × d` output projection applied to the concatenated heads.
    pub w_out: Value,
}

impl AttentionParams {
    /// Fresh projections: truncated normal (std 0.02); gate coefficients
    /// start equal, concat coefficients start at (1, …, 1, 0) so both
    /// fusions initially behave like addition up to normalization.
    pub fn init(
        d: usize,
        heads: usize,
        stream_dims: &[usize],
        fusion: Fusion,
        rng: &mut ChaCha8Rng,
    ) -> AttentionParams {
        assert!(heads >= 1 && d % heads == 0, "d={d} not divisible by h={heads}");
        let d_h = d / heads;
        let proj = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            Value::param(&[rows, cols], trunc_normal(rng, rows * cols, 0.02))
        };
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        for _ in 0..heads {
            w_q.push(proj(rng, d, d_h));
            w_k.push(proj(rng, d, d_h));
            w_v.push(proj(rng, d, d_h));
        }
        let mut streams = Vec::new();
        for &d_f in stream_dims {
            assert!(d_f % heads == 0, "d_f={d_f} not divisible by h={heads}");
            let d_hj = d_f / heads;
            let mut sq = Vec::new();
            let mut sk = Vec::new();
            for _ in 0..heads {
                sq.push(proj(rng, d_f, d_hj));
                sk.push(proj(rng, d_f, d_hj));
            }
            streams.push(StreamProjections { w_q: sq, w_k: sk });
        }
        let p = stream_dims.len();
        let fuse = match fusion {
            Fusion::Add => Vec::new(),
            Fusion::Gate => (0..heads)
                .map(|_| Value::param(&[p + 1], vec![0.0; p + 1]))
                .collect(),
            Fusion::Concat => (0..heads)
                .map(|_| {
                    let mut c = vec![1.0; p + 2];
                    c[p + 1] = 0.0;
                    Value::param(&[p + 2], c)
                })
                .collect(),
        };
        AttentionParams {
            w_q,
            w_k,
            w_v,
            streams,
            fuse,
            w_out: proj(rng, d, d),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }
}

/// Causal mask over left-padded sequences. Row t of a real position may
/// attend to real positions ≤ t; a padding row attends only to itself so
/// its softmax stays defined (its output never reaches a real row).
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub batch: usize,
    pub n: usize,
    allowed: Rc<Vec<bool>>,
}

impl AttnMask {
    pub fn causal(lengths: &[usize], n: usize) -> AttnMask {
        let batch = lengths.len();
        let mut allowed = vec![false; batch * n * n];
        for (b, &len) in lengths.iter().enumerate() {
            let first_real = n - len.min(n);
            for t in 0..n {
                for s in 0..n {
                    allowed[(b * n + t) * n + s] = s == t || (s <= t && s >= first_real);
                }
            }
        }
        AttnMask {
            batch,
            n,
            allowed: Rc::new(allowed),
        }
    }

    /// Full-length causal mask for a single `[n, d]` sequence.
    pub fn causal_single(n: usize) -> AttnMask {
        Self::causal(&[n], n)
    }

    fn for_logits(&self, logits: &Value) -> Result<Rc<Vec<bool>>> {
        let want = match logits.ndim() {
            2 => self.n * self.n,
            3 => self.batch * self.n * self.n,
            _ => 0,
        };
        if logits.numel() != want {
            return Err(Error::Contract(format!(
                "mask built for batch={} n={} does not fit logits shape {:?}",
                self.batch,
                self.n,
                logits.shape()
            )));
        }
        if logits.ndim() == 2 {
            Ok(Rc::new(self.allowed[..self.n * self.n].to_vec()))
        } else {
            Ok(self.allowed.clone())
        }
    }
}

/// Pre-softmax attention matrices and weights captured for one (layer,
/// head): the decoupled sources, the fused matrix, and the post-softmax
/// rows, all `n × n` row-major for one sequence.
#[derive(Debug, Clone, Serialize)]
pub struct HeadTrace {
    pub layer: usize,
    pub head: usize,
    pub n: usize,
    pub sources: Vec<(String, Vec<f64>)>,
    pub fused: Vec<f64>,
    pub softmax: Vec<f64>,
}

/// Traces of every head in one layer.
pub type LayerTrace = Vec<HeadTrace>;

/// Extract the first sequence's `n × n` block from 2-D or 3-D logits.
fn first_matrix(v: &Value, n: usize) -> Vec<f64> {
    v.data()[..n * n].to_vec()
}

fn qk_logits(x: &Value, w_q: &Value, w_k: &Value) -> Result<Value> {
    let q = x.matmul(w_q)?;
    let k = x.matmul(w_k)?;
    match x.ndim() {
        2 => q.matmul_nt(&k),
        3 => q.bmm_nt(&k),
        _ => Err(Error::Contract(format!(
            "attention input must be 2-D or 3-D, got {:?}",
            x.shape()
        ))),
    }
}

/// Decoupled item logits for one head: `(R·W_Q)(R·W_K)ᵀ`, no scaling, no
/// mask (both are applied by the composition).
pub fn item_logits(r_id: &Value, head: usize, params: &AttentionParams) -> Result<Value> {
    qk_logits(r_id, &params.w_q[head], &params.w_k[head])
}

/// Decoupled logits for one attribute stream and head.
pub fn attribute_logits(
    emb: &Value,
    head: usize,
    stream: &StreamProjections,
) -> Result<Value> {
    qk_logits(emb, &stream.w_q[head], &stream.w_k[head])
}

/// Fuse per-stream logit matrices. `sources[0]` is the item matrix by
/// convention; later entries may be `[n, n]` while the first is batched, in
/// which case they broadcast. `coeffs` carries the learned gate/concat
/// parameters for this head (ignored for addition).
pub fn fuse_logits(sources: &[Value], fusion: Fusion, coeffs: Option<&Value>) -> Result<Value> {
    if sources.is_empty() {
        return Err(Error::Contract("fuse_logits on an empty source list".into()));
    }
    let add_to = |acc: &Value, src: &Value| -> Result<Value> {
        if acc.ndim() == 3 && src.ndim() == 2 {
            acc.add_bcast(src)
        } else {
            acc.add(src)
        }
    };
    match fusion {
        Fusion::Add => {
            let mut acc = sources[0].clone();
            for s in &sources[1..] {
                acc = add_to(&acc, s)?;
            }
            Ok(acc)
        }
        Fusion::Gate => {
            let coeffs = coeffs.ok_or_else(|| {
                Error::Contract("gate fusion requires coefficient parameters".into())
            })?;
            if coeffs.numel() != sources.len() {
                return Err(Error::Contract(format!(
                    "gate fusion: {} coefficients for {} sources",
                    coeffs.numel(),
                    sources.len()
                )));
            }
            let weights = coeffs
                .reshape(&[1, coeffs.numel()])?
                .masked_softmax(None)?
                .reshape(&[coeffs.numel()])?;
            let mut acc = sources[0].mul_coeff(&weights, 0)?;
            for (k, s) in sources.iter().enumerate().skip(1) {
                acc = add_to(&acc, &s.mul_coeff(&weights, k)?)?;
            }
            Ok(acc)
        }
        Fusion::Concat => {
            let coeffs = coeffs.ok_or_else(|| {
                Error::Contract("concat fusion requires coefficient parameters".into())
            })?;
            if coeffs.numel() != sources.len() + 1 {
                return Err(Error::Contract(format!(
                    "concat fusion: {} coefficients for {} sources (+1 bias)",
                    coeffs.numel(),
                    sources.len()
                )));
            }
            let mut acc = sources[0].mul_coeff(coeffs, 0)?;
            for (k, s) in sources.iter().enumerate().skip(1) {
                acc = add_to(&acc, &s.mul_coeff(coeffs, k)?)?;
            }
            acc.add_coeff(coeffs, sources.len())
        }
    }
}

/// A named side-information stream entering decoupled attention.
pub struct Stream<'a> {
    pub name: &'a str,
    pub emb: &'a Value,
}

fn attention_output(probs: &Value, values: &Value) -> Result<Value> {
    match probs.ndim() {
        2 => probs.matmul(values),
        _ => probs.bmm(values),
    }
}

/// Decoupled-fusion attention: per head, fuse the item and per-stream logit
/// matrices, scale by `1/√d` (d = item hidden size), softmax under the
/// causal mask, and apply to the item values. Heads are concatenated and
/// output-projected. `capture` additionally returns per-head traces of the
/// first sequence.
pub fn dif_attention(
    r_id: &Value,
    streams: &[Stream<'_>],
    params: &AttentionParams,
    fusion: Fusion,
    mask: &AttnMask,
    layer: usize,
    capture: bool,
) -> Result<(Value, Option<LayerTrace>)> {
    if streams.len() != params.streams.len() {
        return Err(Error::Contract(format!(
            "{} streams supplied but params carry {}",
            streams.len(),
            params.streams.len()
        )));
    }
    let d = r_id.last_dim_checked()?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::new();
    let mut traces = capture.then(Vec::new);
    for i in 0..params.heads() {
        let att_id = item_logits(r_id, i, params)?;
        let mut sources = vec![att_id];
        for (s, proj) in streams.iter().zip(&params.streams) {
            sources.push(attribute_logits(s.emb, i, proj)?);
        }
        let fused = fuse_logits(&sources, fusion, params.fuse.get(i))?;
        let probs = fused.scale(scale).masked_softmax(Some(mask.for_logits(&fused)?))?;
        if let Some(t) = traces.as_mut() {
            let n = mask.n;
            let mut named = vec![("item".to_string(), first_matrix(&sources[0], n))];
            for (s, src) in streams.iter().zip(&sources[1..]) {
                named.push((s.name.to_string(), first_matrix(src, n)));
            }
            t.push(HeadTrace {
                layer,
                head: i,
                n,
                sources: named,
                fused: first_matrix(&fused, n),
                softmax: first_matrix(&probs, n),
            });
        }
        let values = r_id.matmul(&params.w_v[i])?;
        heads.push(attention_output(&probs, &values)?);
    }
    let concat = Value::concat_last(&heads)?;
    Ok((concat.matmul(&params.w_out)?, traces))
}

/// Early-fusion attention: queries, keys, and values all from the
/// integrated embedding.
pub fn sas_attention(
    r_fused: &Value,
    params: &AttentionParams,
    mask: &AttnMask,
    layer: usize,
    capture: bool,
) -> Result<(Value, Option<LayerTrace>)> {
    fused_qk_attention(r_fused, r_fused, params, mask, layer, capture)
}

/// Non-invasive attention: queries and keys from the integrated embedding,
/// values from the pure item representation.
pub fn nova_attention(
    r_fused: &Value,
    r_id: &Value,
    params: &AttentionParams,
    mask: &AttnMask,
    layer: usize,
    capture: bool,
) -> Result<(Value, Option<LayerTrace>)> {
    if r_fused.shape() != r_id.shape() {
        return Err(Error::DimMismatch {
            op: "nova_attention",
            lhs: r_fused.shape().to_vec(),
            rhs: r_id.shape().to_vec(),
        });
    }
    fused_qk_attention(r_fused, r_id, params, mask, layer, capture)
}

fn fused_qk_attention(
    qk_src: &Value,
    v_src: &Value,
    params: &AttentionParams,
    mask: &AttnMask,
    layer: usize,
    capture: bool,
) -> Result<(Value, Option<LayerTrace>)> {
    let d = qk_src.last_dim_checked()?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::new();
    let mut traces = capture.then(Vec::new);
    for i in 0..params.heads() {
        let att = item_logits(qk_src, i, params)?;
        let probs = att.scale(scale).masked_softmax(Some(mask.for_logits(&att)?))?;
        if let Some(t) = traces.as_mut() {
            let n = mask.n;
            t.push(HeadTrace {
                layer,
                head: i,
                n,
                sources: vec![],
                fused: first_matrix(&att, n),
                softmax: first_matrix(&probs, n),
            });
        }
        let values = v_src.matmul(&params.w_v[i])?;
        heads.push(attention_output(&probs, &values)?);
    }
    let concat = Value::concat_last(&heads)?;
    Ok((concat.matmul(&params.w_out)?, traces))
}

impl Value {
    fn last_dim_checked(&self) -> Result<usize> {
        self.shape().last().copied().ok_or_else(|| {
            Error::Contract("attention input must have at least one axis".into())
        })
    }
}

#[cfg(test)]
mod tests;
