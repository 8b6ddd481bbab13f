//! The parallel spatiotemporal binder: slot initialization, the binder
//! block, the layer stack, ablation variants, and sliding-window application
//! to sequences longer than the training length.
//!
//! One block applies four residual sub-steps to slots `s: [T, N, D]` given
//! features `e: [T, L, D]`:
//!
//! 1. bottom-up cross-attention: for every time-step in parallel, its N
//!    slots compete (inverted attention) over the features of all
//!    non-future time-steps, with relative positional bias on the time
//!    offset;
//! 2. time-axis self-attention: slots with the same index attend across
//!    time, causally masked, with relative bias;
//! 3. object-axis self-attention: the N slots of each time-step attend to
//!    each other (no mask, no bias);
//! 4. a two-layer GELU MLP per slot.
//!
//! Every sub-step is pre-LayerNormed and added back residually, and all
//! output projections start at zero, so a freshly initialized block is the
//! identity map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{causal_mask, expand_time_mask, AttentionConfig, MultiHeadAttn, RelPosBias};
use crate::error::{PsbError, Result};
use crate::layers::{LayerNorm, Mlp};
use crate::params::{seeded_rng, standard_normal, BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Real};

/// How the initial slots are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// N learned vectors, shared across time-steps.
    Learned,
    /// N draws from a learned Gaussian, drawn once per episode and
    /// broadcast across time-steps.
    Random,
}

/// How slots interact within a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    /// Separate time-axis and object-axis self-attention steps.
    Decoupled,
    /// All T*N slot tokens interact in a single self-attention step with a
    /// block-causal mask (full visibility within a time-step).
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsbConfig {
    pub model_dim: usize,
    pub num_slots: usize,
    pub layers: usize,
    pub bottom_up_heads: usize,
    pub time_heads: usize,
    pub object_heads: usize,
    pub mlp_hidden: usize,
    pub init: InitMode,
    pub causal: bool,
    pub inverted: bool,
    pub interaction: Interaction,
    /// Clamp horizon for relative-offset bias buckets, and the longest
    /// sequence `encode` accepts.
    pub t_max: usize,
    /// Window length for sliding application to longer sequences.
    pub window: usize,
}

impl Default for PsbConfig {
    fn default() -> Self {
        Self {
            model_dim: 192,
            num_slots: 4,
            layers: 3,
            bottom_up_heads: 1,
            time_heads: 4,
            object_heads: 4,
            mlp_hidden: 768,
            init: InitMode::Learned,
            causal: true,
            inverted: true,
            interaction: Interaction::Decoupled,
            t_max: 6,
            window: 6,
        }
    }
}

/// Analytic slot-interaction attention-matrix footprint per block.
pub fn slot_interaction_attn_elements(interaction: Interaction, n: usize, t: usize) -> usize {
    match interaction {
        Interaction::Joint => (n * t) * (n * t),
        Interaction::Decoupled => n * t * t + t * n * n,
    }
}

struct CrossSite {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttn,
    bias: RelPosBias,
}

struct SelfSite {
    ln: LayerNorm,
    attn: MultiHeadAttn,
    bias: Option<RelPosBias>,
}

struct MlpSite {
    ln: LayerNorm,
    mlp: Mlp,
}

enum InteractionSites {
    Decoupled { time: SelfSite, object: SelfSite },
    Joint(SelfSite),
}

struct Block {
    cross: CrossSite,
    interaction: InteractionSites,
    mlp: MlpSite,
}

/// The M-layer binder stack. Holds parameter names and configuration; the
/// parameter values live in a `ParamStore`.
pub struct PsbEncoder {
    pub cfg: PsbConfig,
    blocks: Vec<Block>,
}

impl PsbEncoder {
    /// Registers all encoder parameters under `psb.*` and returns the model.
    pub fn init<R: Real>(store: &mut ParamStore<R>, cfg: PsbConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        match cfg.init {
            InitMode::Learned => {
                store.insert("psb.init.slots", standard_normal(&[cfg.num_slots, d], rng));
            }
            InitMode::Random => {
                store.insert("psb.init.mean", standard_normal(&[d], rng));
                store.insert("psb.init.log_sigma", crate::tensor::Tensor::zeros(&[d]));
            }
        }
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("psb.block{i}");
                let cross = CrossSite {
                    ln_q: LayerNorm::init(store, &format!("{p}.ca.ln_q"), d),
                    ln_kv: LayerNorm::init(store, &format!("{p}.ca.ln_kv"), d),
                    attn: MultiHeadAttn::init(
                        store,
                        &format!("{p}.ca"),
                        AttentionConfig {
                            model_dim: d,
                            num_heads: cfg.bottom_up_heads,
                            inverted: cfg.inverted,
                            causal: cfg.causal,
                            use_rel_bias: true,
                        },
                        rng,
                    ),
                    bias: RelPosBias::init(
                        store,
                        &format!("{p}.ca.rel_bias"),
                        cfg.bottom_up_heads,
                        cfg.t_max,
                    ),
                };
                let interaction = match cfg.interaction {
                    Interaction::Decoupled => InteractionSites::Decoupled {
                        time: SelfSite {
                            ln: LayerNorm::init(store, &format!("{p}.ta.ln"), d),
                            attn: MultiHeadAttn::init(
                                store,
                                &format!("{p}.ta"),
                                AttentionConfig {
                                    model_dim: d,
                                    num_heads: cfg.time_heads,
                                    inverted: false,
                                    causal: cfg.causal,
                                    use_rel_bias: true,
                                },
                                rng,
                            ),
                            bias: Some(RelPosBias::init(
                                store,
                                &format!("{p}.ta.rel_bias"),
                                cfg.time_heads,
                                cfg.t_max,
                            )),
                        },
                        object: SelfSite {
                            ln: LayerNorm::init(store, &format!("{p}.oa.ln"), d),
                            attn: MultiHeadAttn::init(
                                store,
                                &format!("{p}.oa"),
                                AttentionConfig {
                                    model_dim: d,
                                    num_heads: cfg.object_heads,
                                    inverted: false,
                                    causal: false,
                                    use_rel_bias: false,
                                },
                                rng,
                            ),
                            bias: None,
                        },
                    },
                    Interaction::Joint => InteractionSites::Joint(SelfSite {
                        ln: LayerNorm::init(store, &format!("{p}.ja.ln"), d),
                        attn: MultiHeadAttn::init(
                            store,
                            &format!("{p}.ja"),
                            AttentionConfig {
                                model_dim: d,
                                num_heads: cfg.time_heads,
                                inverted: false,
                                causal: cfg.causal,
                                use_rel_bias: true,
                            },
                            rng,
                        ),
                        bias: Some(RelPosBias::init(
                            store,
                            &format!("{p}.ja.rel_bias"),
                            cfg.time_heads,
                            cfg.t_max,
                        )),
                    }),
                };
                let mlp = MlpSite {
                    ln: LayerNorm::init(store, &format!("{p}.mlp.ln"), d),
                    mlp: Mlp::init(store, &format!("{p}.mlp"), d, cfg.mlp_hidden, d, true, rng),
                };
                Block { cross, interaction, mlp }
            })
            .collect();
        Self { cfg, blocks }
    }

    /// Initial slots `[t, n, d]`. Learned init broadcasts the N learned
    /// vectors across time; random init draws N vectors once from the
    /// learned Gaussian (deterministic in `seed`) and broadcasts them.
    pub fn init_slots<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        t: usize,
        seed: u64,
    ) -> Result<Var> {
        let (n, d) = (self.cfg.num_slots, self.cfg.model_dim);
        let base = match self.cfg.init {
            InitMode::Learned => p.var("psb.init.slots"),
            InitMode::Random => {
                let mean = p.var("psb.init.mean");
                let log_sigma = p.var("psb.init.log_sigma");
                let sigma = tape.exp(log_sigma)?;
                let noise = tape.input(standard_normal(&[n, d], &mut seeded_rng(seed, 0x510f)));
                let scaled = tape.mul(noise, sigma)?;
                tape.add(scaled, mean)?
            }
        };
        let row = tape.reshape(base, vec![1, n, d])?;
        tape.broadcast_to(row, vec![t, n, d])
    }

    fn cross_attention_step<R: Real>(
        &self,
        block: &Block,
        tape: &mut Tape<R>,
        p: &BoundParams,
        s: Var,
        e: Var,
        t: usize,
        l: usize,
    ) -> Result<Var> {
        let (n, d) = (self.cfg.num_slots, self.cfg.model_dim);
        let q = block.cross.ln_q.forward(tape, p, s)?; // [T,N,D]
        let kv3 = block.cross.ln_kv.forward(tape, p, e)?;
        let kv = tape.reshape(kv3, vec![t * l, d])?; // [T*L,D]

        // Per-time-step competition groups: the batch axis is the time-step,
        // so each group's N slots (times heads) compete over its visible
        // feature set.
        let mask = self.cfg.causal.then(|| {
            let alpha = causal_mask(t);
            let flat = expand_time_mask(&alpha, n, l); // [T*N, T*L]
            Mask::new(vec![t, n, t * l], flat.data().to_vec())
        });
        let bias_flat = block.cross.bias.lookup_expanded(tape, p, t, n, l)?; // [h, T*N, T*L]
        let h = self.cfg.bottom_up_heads;
        let bias_grouped = tape.reshape(bias_flat, vec![h, t, n, t * l])?;
        let bias = tape.permute(bias_grouped, &[1, 0, 2, 3])?; // [T, h, N, T*L]

        let out = block.cross.attn.forward(tape, p, q, kv, mask.as_ref(), Some(bias))?;
        tape.add(s, out)
    }

    fn time_axis_step<R: Real>(
        &self,
        site: &SelfSite,
        tape: &mut Tape<R>,
        p: &BoundParams,
        s: Var,
        t: usize,
    ) -> Result<Var> {
        // [T,N,D] -> [N,T,D]: slots sharing an index self-attend across time.
        let sp = tape.permute(s, &[1, 0, 2])?;
        let x = site.ln.forward(tape, p, sp)?;
        let mask = self.cfg.causal.then(|| causal_mask(t));
        let bias = site.bias.as_ref().map(|b| b.lookup(tape, p, t, t)).transpose()?;
        let out = site.attn.forward(tape, p, x, x, mask.as_ref(), bias)?;
        let sp = tape.add(sp, out)?;
        tape.permute(sp, &[1, 0, 2])
    }

    fn object_axis_step<R: Real>(
        &self,
        site: &SelfSite,
        tape: &mut Tape<R>,
        p: &BoundParams,
        s: Var,
    ) -> Result<Var> {
        // Slots of the same time-step interact; no mask, no bias.
        let x = site.ln.forward(tape, p, s)?;
        let out = site.attn.forward(tape, p, x, x, None, None)?;
        tape.add(s, out)
    }

    fn joint_interaction_step<R: Real>(
        &self,
        site: &SelfSite,
        tape: &mut Tape<R>,
        p: &BoundParams,
        s: Var,
        t: usize,
    ) -> Result<Var> {
        let (n, d) = (self.cfg.num_slots, self.cfg.model_dim);
        let tokens = tape.reshape(s, vec![t * n, d])?;
        let x = site.ln.forward(tape, p, tokens)?;
        // Block-causal: token (t, n) attends (t', n') iff t' <= t, with full
        // visibility inside a time-step.
        let alpha = if self.cfg.causal { causal_mask(t) } else { Mask::all_true(&[t, t]) };
        let mask = expand_time_mask(&alpha, n, n);
        let bias = site
            .bias
            .as_ref()
            .map(|b| b.lookup_expanded(tape, p, t, n, n))
            .transpose()?;
        let out = site.attn.forward(tape, p, x, x, Some(&mask), bias)?;
        let out = tape.reshape(out, vec![t, n, d])?;
        tape.add(s, out)
    }

    fn mlp_step<R: Real>(
        &self,
        site: &MlpSite,
        tape: &mut Tape<R>,
        p: &BoundParams,
        s: Var,
    ) -> Result<Var> {
        let x = site.ln.forward(tape, p, s)?;
        let out = site.mlp.forward(tape, p, x)?;
        tape.add(s, out)
    }

    /// One binder block: the four residual sub-steps in order.
    pub fn block_forward<R: Real>(
        &self,
        index: usize,
        tape: &mut Tape<R>,
        p: &BoundParams,
        s: Var,
        e: Var,
    ) -> Result<Var> {
        let (t, l) = {
            let es = tape.value(e).shape();
            (es[0], es[1])
        };
        let block = &self.blocks[index];
        let s = self.cross_attention_step(block, tape, p, s, e, t, l)?;
        let s = match &block.interaction {
            InteractionSites::Decoupled { time, object } => {
                let s = self.time_axis_step(time, tape, p, s, t)?;
                self.object_axis_step(object, tape, p, s)?
            }
            InteractionSites::Joint(site) => self.joint_interaction_step(site, tape, p, s, t)?,
        };
        self.mlp_step(&block.mlp, tape, p, s)
    }

    /// Initializes slots and applies the M-layer stack. `e: [T, L, D]`.
    pub fn encode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        e: Var,
        seed: u64,
    ) -> Result<Var> {
        let es = tape.value(e).shape().to_vec();
        if es.len() != 3 || es[2] != self.cfg.model_dim {
            return Err(PsbError::ShapeMismatch {
                op: "encode",
                detail: format!("features {:?} vs model_dim {}", es, self.cfg.model_dim),
            });
        }
        let t = es[0];
        if t > self.cfg.t_max {
            return Err(PsbError::InvalidArgument(format!(
                "sequence length {} exceeds t_max {} (use encode_sliding)",
                t, self.cfg.t_max
            )));
        }
        let mut s = self.init_slots(tape, p, t, seed)?;
        for i in 0..self.blocks.len() {
            s = self.block_forward(i, tape, p, s, e)?;
        }
        Ok(s)
    }

    /// Applies the encoder to a sequence longer than the window: slots at
    /// time t are the last-time-step slots of a standalone encode over the
    /// most recent `window` frames. Requires causal masking.
    pub fn encode_sliding<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        e: Var,
        seed: u64,
    ) -> Result<Var> {
        if !self.cfg.causal {
            return Err(PsbError::InvalidArgument(
                "encode_sliding requires causal masking".into(),
            ));
        }
        let es = tape.value(e).shape().to_vec();
        let t_total = es[0];
        let w = self.cfg.window.min(self.cfg.t_max);
        if t_total <= w {
            return self.encode(tape, p, e, seed);
        }
        let (n, d) = (self.cfg.num_slots, self.cfg.model_dim);
        let mut per_t = Vec::with_capacity(t_total);
        for t in 0..t_total {
            let lo = (t + 1).saturating_sub(w);
            let len = t + 1 - lo;
            let window = tape.narrow(e, 0, lo, len)?;
            let s = self.encode(tape, p, window, seed)?;
            let last = tape.narrow(s, 0, len - 1, 1)?;
            per_t.push(tape.reshape(last, vec![n, d])?);
        }
        let stacked = tape.stack0(&per_t)?;
        tape.reshape(stacked, vec![t_total, n, d])
    }
}
