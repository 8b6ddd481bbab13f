//! Recurrent slot encoder baseline.
//!
//! A controlled stand-in for recurrence-based slot encoders: per frame, a
//! few rounds of inverted attention read the frame's features, a shared GRU
//! cell updates each slot, and a residual MLP refines it. Frames are
//! processed strictly sequentially, so causality holds bitwise by
//! construction. This module is the comparison point for the speed and
//! stability trends, not a faithful reproduction of any published recurrent
//! encoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MultiHeadAttn};
use crate::error::{PsbError, Result};
use crate::layers::{LayerNorm, Mlp};
use crate::params::{standard_normal, uniform_fan_in, BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecurrentConfig {
    pub num_slots: usize,
    pub model_dim: usize,
    /// Slot-attention refinement rounds per frame.
    pub iterations: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        Self { num_slots: 4, model_dim: 192, iterations: 2, mlp_hidden: 768, heads: 1 }
    }
}

pub struct RecurrentEncoder {
    pub cfg: RecurrentConfig,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttn,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

impl RecurrentEncoder {
    pub fn init<R: Real>(store: &mut ParamStore<R>, cfg: RecurrentConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        store.insert("rec.init.slots", standard_normal(&[cfg.num_slots, d], rng));
        for gate in ["z", "r", "h"] {
            store.insert(&format!("rec.gru.w_{gate}"), uniform_fan_in(&[d, d], d, rng));
            store.insert(&format!("rec.gru.u_{gate}"), uniform_fan_in(&[d, d], d, rng));
            store.insert(&format!("rec.gru.b_{gate}"), Tensor::zeros(&[d]));
        }
        let ln_q = LayerNorm::init(store, "rec.ln_q", d);
        let ln_kv = LayerNorm::init(store, "rec.ln_kv", d);
        let attn = MultiHeadAttn::init(
            store,
            "rec.attn",
            AttentionConfig {
                model_dim: d,
                num_heads: cfg.heads,
                inverted: true,
                causal: false,
                use_rel_bias: false,
            },
            rng,
        );
        let ln_mlp = LayerNorm::init(store, "rec.ln_mlp", d);
        let mlp = Mlp::init(store, "rec.mlp", d, cfg.mlp_hidden, d, true, rng);
        Self { cfg, ln_q, ln_kv, attn, ln_mlp, mlp }
    }

    /// Gated recurrent unit, applied row-wise: `h` and `x` are `[n, d]`.
    pub fn gru_cell<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        h: Var,
        x: Var,
    ) -> Result<Var> {
        let gate = |tape: &mut Tape<R>, name: &str| -> Result<Var> {
            let w = p.var(&format!("rec.gru.w_{name}"));
            let u = p.var(&format!("rec.gru.u_{name}"));
            let b = p.var(&format!("rec.gru.b_{name}"));
            let xw = tape.matmul(x, w)?;
            let hu = tape.matmul(h, u)?;
            let s = tape.add(xw, hu)?;
            tape.add(s, b)
        };
        let z = gate(tape, "z")?;
        let z = tape.sigmoid(z)?;
        let r = gate(tape, "r")?;
        let r = tape.sigmoid(r)?;

        let w_h = p.var("rec.gru.w_h");
        let u_h = p.var("rec.gru.u_h");
        let b_h = p.var("rec.gru.b_h");
        let xw = tape.matmul(x, w_h)?;
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, u_h)?;
        let pre = tape.add(xw, rhu)?;
        let pre = tape.add(pre, b_h)?;
        let cand = tape.tanh(pre)?;

        // h' = (1 - z) * h + z * cand
        let one_minus_z = {
            let neg = tape.neg(z);
            tape.add_scalar(neg, R::ONE)
        };
        let keep = tape.mul(one_minus_z, h)?;
        let write = tape.mul(z, cand)?;
        tape.add(keep, write)
    }

    /// One frame of slot refinement: `slots: [n, d]`, `e_t: [l, d]`.
    pub fn slot_attention_frame<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        slots: Var,
        e_t: Var,
    ) -> Result<Var> {
        if self.cfg.iterations == 0 {
            return Err(PsbError::InvalidArgument(
                "recurrent encoder needs at least one refinement iteration".into(),
            ));
        }
        let mut slots = slots;
        let kv = self.ln_kv.forward(tape, p, e_t)?;
        for _ in 0..self.cfg.iterations {
            let q = self.ln_q.forward(tape, p, slots)?;
            let update = self.attn.forward(tape, p, q, kv, None, None)?;
            slots = self.gru_cell(tape, p, slots, update)?;
            let normed = self.ln_mlp.forward(tape, p, slots)?;
            let refined = self.mlp.forward(tape, p, normed)?;
            slots = tape.add(slots, refined)?;
        }
        Ok(slots)
    }

    /// Sequentially encodes `e: [t, l, d]` into `[t, n, d]`.
    pub fn encode<R: Real>(&self, tape: &mut Tape<R>, p: &BoundParams, e: Var) -> Result<Var> {
        let es = tape.value(e).shape().to_vec();
        if es.len() != 3 || es[2] != self.cfg.model_dim {
            return Err(PsbError::ShapeMismatch {
                op: "encode_recurrent",
                detail: format!("features {:?} vs model_dim {}", es, self.cfg.model_dim),
            });
        }
        let (t_len, l, d) = (es[0], es[1], es[2]);
        let n = self.cfg.num_slots;
        let mut slots = p.var("rec.init.slots");
        let mut per_t = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let frame3 = tape.narrow(e, 0, t, 1)?;
            let frame = tape.reshape(frame3, vec![l, d])?;
            slots = self.slot_attention_frame(tape, p, slots, frame)?;
            per_t.push(slots);
        }
        let stacked = tape.stack0(&per_t)?;
        tape.reshape(stacked, vec![t_len, n, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{randomize, seeded_rng};
    use rand::Rng;

    fn small_cfg() -> RecurrentConfig {
        RecurrentConfig { num_slots: 2, model_dim: 8, iterations: 2, mlp_hidden: 16, heads: 1 }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn encode_once(enc: &RecurrentEncoder, store: &ParamStore, e: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let ev = tape.input(e.clone());
        let s = enc.encode(&mut tape, &bound, ev).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn gru_copy_and_overwrite_gates() {
        let mut store: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, small_cfg(), &mut seeded_rng(1, 0));
        randomize(&mut store, &mut seeded_rng(2, 0), 0.4);
        let mut rng = seeded_rng(3, 0);
        let h = rand_tensor(&[2, 8], &mut rng);
        let x = rand_tensor(&[2, 8], &mut rng);

        // z -> 0: state copied through.
        store.set("rec.gru.b_z", Tensor::full(&[8], -50.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (hv, xv) = (tape.input(h.clone()), tape.input(x.clone()));
        let out = enc.gru_cell(&mut tape, &bound, hv, xv).unwrap();
        assert!(tape.value(out).max_abs_diff(&h) < 1e-15);

        // z -> 1: state replaced by the candidate.
        store.set("rec.gru.b_z", Tensor::full(&[8], 50.0));
        store.set("rec.gru.b_r", Tensor::full(&[8], 50.0)); // r -> 1
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (hv, xv) = (tape.input(h.clone()), tape.input(x.clone()));
        let out = enc.gru_cell(&mut tape, &bound, hv, xv).unwrap();
        // Candidate recomputed by hand: tanh(x W_h + h U_h + b_h).
        let w_h = store.get("rec.gru.w_h").unwrap();
        let u_h = store.get("rec.gru.u_h").unwrap();
        let b_h = store.get("rec.gru.b_h").unwrap();
        for i in 0..2 {
            for j in 0..8 {
                let mut acc = b_h.data()[j];
                for c in 0..8 {
                    acc += x.at(&[i, c]) * w_h.at(&[c, j]) + h.at(&[i, c]) * u_h.at(&[c, j]);
                }
                let want = acc.tanh();
                assert!((tape.value(out).at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_scalar_closed_form() {
        let cfg = RecurrentConfig { num_slots: 1, model_dim: 2, iterations: 1, mlp_hidden: 2, heads: 1 };
        let mut store: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, cfg, &mut seeded_rng(4, 0));
        // Diagonal weights make each lane a scalar GRU with known constants.
        for gate in ["z", "r", "h"] {
            store.set(
                &format!("rec.gru.w_{gate}"),
                Tensor::from_vec(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
            );
            store.set(
                &format!("rec.gru.u_{gate}"),
                Tensor::from_vec(vec![2, 2], vec![-0.25, 0.0, 0.0, -0.25]).unwrap(),
            );
            store.set(
                &format!("rec.gru.b_{gate}"),
                Tensor::from_vec(vec![2], vec![0.1, 0.1]).unwrap(),
            );
        }
        let (hv, xv) = (0.8f64, -0.3f64);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h = tape.input(Tensor::from_vec(vec![1, 2], vec![hv, 0.0]).unwrap());
        let x = tape.input(Tensor::from_vec(vec![1, 2], vec![xv, 0.0]).unwrap());
        let out = enc.gru_cell(&mut tape, &bound, h, x).unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = sigmoid(0.5 * xv - 0.25 * hv + 0.1);
        let r = sigmoid(0.5 * xv - 0.25 * hv + 0.1);
        let cand = (0.5 * xv - 0.25 * (r * hv) + 0.1).tanh();
        let want = (1.0 - z) * hv + z * cand;
        assert!((tape.value(out).at(&[0, 0]) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_is_an_error() {
        let mut cfg = small_cfg();
        cfg.iterations = 0;
        let mut store: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, cfg, &mut seeded_rng(5, 0));
        let mut rng = seeded_rng(6, 0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let slots = tape.input(rand_tensor(&[2, 8], &mut rng));
        let e_t = tape.input(rand_tensor(&[3, 8], &mut rng));
        assert!(enc.slot_attention_frame(&mut tape, &bound, slots, e_t).is_err());
    }

    #[test]
    fn single_frame_equals_one_refinement_call() {
        let mut store: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, small_cfg(), &mut seeded_rng(7, 0));
        randomize(&mut store, &mut seeded_rng(8, 0), 0.3);
        let mut rng = seeded_rng(9, 0);
        let e = rand_tensor(&[1, 3, 8], &mut rng);
        let full = encode_once(&enc, &store, &e);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let slots = bound.var("rec.init.slots");
        let frame = tape.input(Tensor::from_fn(&[3, 8], |i| e.data()[i]));
        let one = enc.slot_attention_frame(&mut tape, &bound, slots, frame).unwrap();
        assert_eq!(full.data(), tape.value(one).data());
    }

    #[test]
    fn future_frames_never_touch_past_slots_bitwise() {
        let mut store: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, small_cfg(), &mut seeded_rng(10, 0));
        randomize(&mut store, &mut seeded_rng(11, 0), 0.3);
        let mut rng = seeded_rng(12, 0);
        let e = rand_tensor(&[4, 3, 8], &mut rng);
        // A non-uniform bump (uniform shifts vanish under layer norm).
        let mut bumped = e.data().to_vec();
        bumped[3 * 3 * 8 + 5] += 1.0;
        let e2 = Tensor::from_parts(vec![4, 3, 8], bumped);
        let a = encode_once(&enc, &store, &e);
        let b = encode_once(&enc, &store, &e2);
        assert_eq!(a.data()[..3 * 2 * 8], b.data()[..3 * 2 * 8]);
        assert_ne!(a.data()[3 * 2 * 8..], b.data()[3 * 2 * 8..]);
    }

    #[test]
    fn constant_features_approach_a_fixed_point() {
        let mut store: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, small_cfg(), &mut seeded_rng(13, 0));
        randomize(&mut store, &mut seeded_rng(14, 0), 0.1);
        let mut rng = seeded_rng(15, 0);
        let frame = rand_tensor(&[1, 3, 8], &mut rng);
        let e = Tensor::from_fn(&[12, 3, 8], |i| frame.data()[i % (3 * 8)]);
        let s = encode_once(&enc, &store, &e);
        let stride = 2 * 8;
        let drift: f64 = (0..stride)
            .map(|i| (s.data()[11 * stride + i] - s.data()[10 * stride + i]).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-3, "drift {drift}");
    }

    #[test]
    fn slot_permutation_equivariance() {
        let mut store: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, small_cfg(), &mut seeded_rng(16, 0));
        randomize(&mut store, &mut seeded_rng(17, 0), 0.3);
        let mut rng = seeded_rng(18, 0);
        let e = rand_tensor(&[3, 4, 8], &mut rng);
        let base = encode_once(&enc, &store, &e);

        let init = store.get("rec.init.slots").unwrap().clone();
        let mut swapped = init.data().to_vec();
        swapped.rotate_left(8);
        let mut store2 = store.clone();
        store2.set("rec.init.slots", Tensor::from_parts(vec![2, 8], swapped));
        let perm = encode_once(&enc, &store2, &e);
        for t in 0..3 {
            for n in 0..2 {
                for c in 0..8 {
                    assert!((base.at(&[t, n, c]) - perm.at(&[t, 1 - n, c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_flow_through_recurrence() {
        use crate::grad_check::grad_check;
        let cfg =
            RecurrentConfig { num_slots: 2, model_dim: 4, iterations: 1, mlp_hidden: 6, heads: 1 };
        let mut params: ParamStore = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut params, cfg, &mut seeded_rng(19, 0));
        randomize(&mut params, &mut seeded_rng(20, 0), 0.4);
        let mut rng = seeded_rng(21, 0);
        let e = rand_tensor(&[2, 3, 4], &mut rng);
        let report = grad_check(
            &params,
            |tape, p| {
                let ev = tape.input(e.clone());
                let s = enc.encode(tape, p, ev)?;
                let sq = tape.mul(s, s)?;
                Ok(tape.mean_all(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }
}
