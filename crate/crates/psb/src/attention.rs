//! Attention primitives for slot binding.
//!
//! Two cores: standard dot-product attention (softmax over keys) and
//! inverted attention (softmax over the joint queries-and-heads axis per
//! key, then renormalization across keys per query row). Inverted attention
//! makes slots compete for input features. Causal masking replaces masked
//! logits with negative infinity inside the softmax; relative positional
//! bias adds a learned per-head logit that depends only on the time offset
//! between query and key.

use rand_chacha::ChaCha8Rng;

use crate::error::{PsbError, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tape::{OnEmpty, Tape, Var};
use crate::tensor::{Mask, Real, Tensor};

/// Configuration for one attention site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub inverted: bool,
    pub causal: bool,
    pub use_rel_bias: bool,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.model_dim % self.num_heads == 0,
            "model_dim {} not divisible by {} heads",
            self.model_dim,
            self.num_heads
        );
        self.model_dim / self.num_heads
    }
}

// ── masks ───────────────────────────────────────────────────────────────

/// Lower-triangular causal mask: entry (tq, tk) allows tk <= tq.
pub fn causal_mask(t: usize) -> Mask {
    let mut data = vec![false; t * t];
    for tq in 0..t {
        for tk in 0..=tq {
            data[tq * t + tk] = true;
        }
    }
    Mask::new(vec![t, t], data)
}

/// Block-broadcasts a per-time-step mask so each time-step contributes
/// `rows_per_t` query rows and `cols_per_t` key columns:
/// entry ((t, i), (t', j)) = alpha[t][t'].
pub fn expand_time_mask(alpha: &Mask, rows_per_t: usize, cols_per_t: usize) -> Mask {
    assert_eq!(alpha.shape().len(), 2);
    let (tq, tk) = (alpha.shape()[0], alpha.shape()[1]);
    let (rows, cols) = (tq * rows_per_t, tk * cols_per_t);
    let mut data = vec![false; rows * cols];
    for r in 0..rows {
        let t = r / rows_per_t;
        for c in 0..cols {
            data[r * cols + c] = alpha.at(&[t, c / cols_per_t]);
        }
    }
    Mask::new(vec![rows, cols], data)
}

// ── relative positional bias ────────────────────────────────────────────

/// Learned per-head additive logit indexed by the clamped offset
/// `t_q - t_k`; absolute positions never enter the computation. The bias
/// table itself is a parameter named `<param>` of shape
/// `[heads, 2 * t_max - 1]`.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub param: String,
    pub heads: usize,
    pub t_max: usize,
}

impl RelPosBias {
    pub fn init<R: Real>(store: &mut ParamStore<R>, param: &str, heads: usize, t_max: usize) -> Self {
        assert!(t_max >= 1);
        store.insert(param, Tensor::zeros(&[heads, 2 * t_max - 1]));
        Self { param: param.to_string(), heads, t_max }
    }

    fn bucket(&self, tq: i64, tk: i64) -> usize {
        let horizon = self.t_max as i64 - 1;
        let offset = (tq - tk).clamp(-horizon, horizon);
        (offset + horizon) as usize
    }

    /// Bias matrix `[heads, q_times.len(), k_times.len()]` for explicit
    /// query/key time stamps.
    pub fn lookup_positions<R: Real>(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundParams,
        q_times: &[usize],
        k_times: &[usize],
    ) -> Result<Var> {
        let mut idx = Vec::with_capacity(q_times.len() * k_times.len());
        for &tq in q_times {
            for &tk in k_times {
                idx.push(self.bucket(tq as i64, tk as i64));
            }
        }
        tape.rel_bias_gather(bound.var(&self.param), &idx, q_times.len(), k_times.len())
    }

    /// Bias over square time ranges 0..tq x 0..tk.
    pub fn lookup<R: Real>(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundParams,
        tq: usize,
        tk: usize,
    ) -> Result<Var> {
        let q: Vec<usize> = (0..tq).collect();
        let k: Vec<usize> = (0..tk).collect();
        self.lookup_positions(tape, bound, &q, &k)
    }

    /// Bias with each time-step expanded to `rows_per_t` query rows and
    /// `cols_per_t` key columns, matching `expand_time_mask`.
    pub fn lookup_expanded<R: Real>(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundParams,
        t: usize,
        rows_per_t: usize,
        cols_per_t: usize,
    ) -> Result<Var> {
        let q: Vec<usize> = (0..t).flat_map(|tt| std::iter::repeat(tt).take(rows_per_t)).collect();
        let k: Vec<usize> = (0..t).flat_map(|tt| std::iter::repeat(tt).take(cols_per_t)).collect();
        self.lookup_positions(tape, bound, &q, &k)
    }
}

// ── attention cores ─────────────────────────────────────────────────────

fn transpose_last2_var<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<Var> {
    let rank = tape.value(x).rank();
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 1, rank - 2);
    tape.permute(x, &axes)
}

/// Expands a mask to the full logits shape. Accepted inputs: the exact
/// logits shape, a `[nq, nk]` suffix (shared by all leading slices), or a
/// per-group `[b, nq, nk]` mask for `[b, h, nq, nk]` logits (shared by
/// heads within each group).
fn conform_mask(mask: &Mask, logits_shape: &[usize]) -> Mask {
    if mask.shape() == logits_shape {
        return mask.clone();
    }
    let r = logits_shape.len();
    let (nq, nk) = (logits_shape[r - 2], logits_shape[r - 1]);
    if mask.shape() == [nq, nk] {
        return mask.broadcast_to(logits_shape);
    }
    if r == 4 && mask.shape() == [logits_shape[0], nq, nk] {
        let (b, h) = (logits_shape[0], logits_shape[1]);
        let group = nq * nk;
        let mut data = Vec::with_capacity(b * h * group);
        for bb in 0..b {
            for _ in 0..h {
                data.extend_from_slice(&mask.data()[bb * group..(bb + 1) * group]);
            }
        }
        return Mask::new(logits_shape.to_vec(), data);
    }
    panic!(
        "mask shape {:?} incompatible with logits {:?}",
        mask.shape(),
        logits_shape
    );
}

fn scaled_logits<R: Real>(tape: &mut Tape<R>, q: Var, k: Var, bias: Option<Var>) -> Result<Var> {
    let d = *tape.value(q).shape().last().expect("q rank");
    let kt = transpose_last2_var(tape, k)?;
    let raw = tape.matmul(q, kt)?;
    let mut logits = tape.scale(raw, R::from_f64(1.0 / (d as f64).sqrt()));
    if let Some(b) = bias {
        logits = tape.add(logits, b)?;
    }
    Ok(logits)
}

/// Standard multi-head dot-product attention on pre-projected heads.
///
/// `q: [.., nq, d]`, `k`/`v`: `[.., nk, d]` with any broadcast-compatible
/// leading dims (heads and batches behave identically here). `mask` is
/// `[nq, nk]` and applies to every leading slice; a fully masked query row is
/// an error. `bias` must broadcast onto the logits.
pub fn dot_attention<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
    bias: Option<Var>,
) -> Result<Var> {
    let logits = scaled_logits(tape, q, k, bias)?;
    let weights = {
        let shape = tape.value(logits).shape().to_vec();
        let expanded = mask.map(|m| conform_mask(m, &shape));
        tape.softmax_last(logits, expanded.as_ref(), OnEmpty::Error)?
    };
    tape.matmul(weights, v)
}

/// Inverted attention weights: softmax over the joint (queries x heads) axis
/// for each key, then renormalization across keys per query row.
///
/// Operands are `[h, nq, d]`, or `[b, h, nq, d]` for independent competition
/// groups sharing keys (keys may broadcast over `b`). Returns
/// `(pre_renorm, renormalized)` weights shaped like the logits. Masked cells
/// contribute zero mass; a key column no query can see simply receives no
/// mass. A query row whose renormalization mass underflows 1e-30 signals a
/// starved slot and is an error.
pub fn inverted_attention_weights<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    mask: Option<&Mask>,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let q_rank = tape.value(q).rank();
    if !(3..=4).contains(&q_rank) || !(3..=4).contains(&tape.value(k).rank()) {
        return Err(PsbError::ShapeMismatch {
            op: "inverted_attention",
            detail: format!(
                "expected [h, n, d] or [b, h, n, d] operands, got {:?} and {:?}",
                tape.value(q).shape(),
                tape.value(k).shape()
            ),
        });
    }
    let logits = scaled_logits(tape, q, k, bias)?;
    let lshape = tape.value(logits).shape().to_vec();
    let batched = lshape.len() == 4;
    let logits4 = if batched {
        logits
    } else {
        let mut with_b = vec![1];
        with_b.extend_from_slice(&lshape);
        tape.reshape(logits, with_b)?
    };
    let &[b, h, nq, nk] = tape.value(logits4).shape() else { unreachable!() };

    // Joint softmax per (group, key): bring keys forward, flatten (h, nq).
    let lp = tape.permute(logits4, &[0, 3, 1, 2])?;
    let flat = tape.reshape(lp, vec![b * nk, h * nq])?;
    let flat_mask = mask.map(|m| {
        let full = conform_mask(m, &[b, h, nq, nk]);
        crate::tape::permute_mask(&full, &[0, 3, 1, 2]).reshaped(vec![b * nk, h * nq])
    });
    let sm = tape.softmax_last(flat, flat_mask.as_ref(), OnEmpty::Zeros)?;
    let sm = tape.reshape(sm, vec![b, nk, h, nq])?;
    let pre4 = tape.permute(sm, &[0, 2, 3, 1])?;

    // Renormalize each query row across keys.
    let mass = tape.sum_axis(pre4, 3, true)?;
    if let Some(&m) = tape.value(mass).data().iter().find(|&&m| m.to_f64() < 1e-30) {
        return Err(PsbError::StarvedSlot { mass: m.to_f64() });
    }
    let renorm4 = tape.div(pre4, mass)?;
    if batched {
        Ok((pre4, renorm4))
    } else {
        let pre = tape.reshape(pre4, lshape.clone())?;
        let renorm = tape.reshape(renorm4, lshape)?;
        Ok((pre, renorm))
    }
}

/// Inverted attention readout: renormalized weights applied to values.
pub fn inverted_attention<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
    bias: Option<Var>,
) -> Result<Var> {
    let (_, weights) = inverted_attention_weights(tape, q, k, mask, bias)?;
    tape.matmul(weights, v)
}

// ── multi-head layer ────────────────────────────────────────────────────

/// Multi-head attention with per-site projections. Query/key/value
/// projections are bias-free; the output projection carries a bias and is
/// zero-initialized so a residual block starts as the identity map.
#[derive(Clone, Debug)]
pub struct MultiHeadAttn {
    prefix: String,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttn {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.model_dim;
        let _ = cfg.head_dim();
        store.insert(&format!("{prefix}.w_q"), crate::params::uniform_fan_in(&[d, d], d, rng));
        store.insert(&format!("{prefix}.w_k"), crate::params::uniform_fan_in(&[d, d], d, rng));
        store.insert(&format!("{prefix}.w_v"), crate::params::uniform_fan_in(&[d, d], d, rng));
        store.insert(&format!("{prefix}.w_o"), Tensor::zeros(&[d, d]));
        store.insert(&format!("{prefix}.b_o"), Tensor::zeros(&[d]));
        Self { prefix: prefix.to_string(), cfg }
    }

    fn split_heads<R: Real>(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let r = shape.len();
        let (n, d) = (shape[r - 2], shape[r - 1]);
        let (h, dh) = (self.cfg.num_heads, self.cfg.head_dim());
        debug_assert_eq!(d, h * dh);
        let mut split = shape[..r - 2].to_vec();
        split.extend([n, h, dh]);
        let xs = tape.reshape(x, split)?;
        let mut axes: Vec<usize> = (0..r - 2).collect();
        axes.extend([r - 1, r - 2, r]);
        tape.permute(xs, &axes)
    }

    fn merge_heads<R: Real>(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let r = shape.len();
        let (h, n, dh) = (shape[r - 3], shape[r - 2], shape[r - 1]);
        let mut axes: Vec<usize> = (0..r - 3).collect();
        axes.extend([r - 2, r - 3, r - 1]);
        let xp = tape.permute(x, &axes)?;
        let mut merged = shape[..r - 3].to_vec();
        merged.extend([n, h * dh]);
        tape.reshape(xp, merged)
    }

    /// Full attention pass: project, attend, merge heads, output-project.
    ///
    /// `q_in: [.., nq, D]`, `kv_in: [.., nk, D]`. Inverted attention requires
    /// rank-2 inputs (one competition group); dot attention accepts any
    /// matching leading dims.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Mask>,
        bias: Option<Var>,
    ) -> Result<Var> {
        let w_q = p.var(&format!("{}.w_q", self.prefix));
        let w_k = p.var(&format!("{}.w_k", self.prefix));
        let w_v = p.var(&format!("{}.w_v", self.prefix));
        let w_o = p.var(&format!("{}.w_o", self.prefix));
        let b_o = p.var(&format!("{}.b_o", self.prefix));

        let q = tape.matmul(q_in, w_q)?;
        let k = tape.matmul(kv_in, w_k)?;
        let v = tape.matmul(kv_in, w_v)?;
        let qh = self.split_heads(tape, q)?;
        let kh = self.split_heads(tape, k)?;
        let vh = self.split_heads(tape, v)?;

        let out = if self.cfg.inverted {
            inverted_attention(tape, qh, kh, vh, mask, bias)?
        } else {
            dot_attention(tape, qh, kh, vh, mask, bias)?
        };
        let merged = self.merge_heads(tape, out)?;
        let projected = tape.matmul(merged, w_o)?;
        tape.add(projected, b_o)
    }
}
