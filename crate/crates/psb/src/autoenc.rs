//! Frame auto-encoding: patch-embedding frontend, spatial broadcast mixture
//! decoder, and the MSE reconstruction loss.
//!
//! The frontend splits a frame into non-overlapping patches, linearly embeds
//! them, adds a linear projection of each patch's normalized center
//! coordinate, then applies LayerNorm and a two-layer MLP. The decoder
//! normalizes each slot, broadcasts it over the pixel grid, adds positional
//! encodings, and emits per-slot RGB plus an alpha logit per position; a
//! softmax across slots turns alpha logits into mixing weights.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PsbError, Result};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::params::{BoundParams, ParamStore};
use crate::tape::{OnEmpty, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub patch: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { patch: 4, model_dim: 192, mlp_hidden: 192 }
    }
}

/// Patch embedder: frame `[3, H, W]` to tokens `[L, D]`.
pub struct PatchEmbed {
    pub cfg: FrontendConfig,
    proj: Linear,
    pos: Linear,
    ln: LayerNorm,
    mlp: Mlp,
}

impl PatchEmbed {
    pub fn init(store: &mut ParamStore, cfg: FrontendConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let in_dim = 3 * cfg.patch * cfg.patch;
        Self {
            cfg,
            proj: Linear::init(store, "frontend.proj", in_dim, d, true, false, rng),
            pos: Linear::init(store, "frontend.pos", 2, d, true, false, rng),
            ln: LayerNorm::init(store, "frontend.ln", d),
            mlp: Mlp::init(store, "frontend.mlp", d, cfg.mlp_hidden, d, false, rng),
        }
    }

    pub fn tokens_per_frame(&self, h: usize, w: usize) -> usize {
        (h / self.cfg.patch) * (w / self.cfg.patch)
    }

    /// Non-overlapping patches flattened channel-major: `[L, 3 * P * P]`.
    fn extract_patches(&self, frame: &Tensor, h: usize, w: usize) -> Tensor {
        let p = self.cfg.patch;
        let (gh, gw) = (h / p, w / p);
        let mut data = Vec::with_capacity(gh * gw * 3 * p * p);
        for row in 0..gh {
            for col in 0..gw {
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            data.push(frame.at(&[c, row * p + py, col * p + px]));
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![gh * gw, 3 * p * p], data)
    }

    fn patch_centers(&self, h: usize, w: usize) -> Tensor {
        let p = self.cfg.patch;
        let (gh, gw) = (h / p, w / p);
        let mut data = Vec::with_capacity(gh * gw * 2);
        for row in 0..gh {
            for col in 0..gw {
                data.push((col as f64 + 0.5) / gw as f64);
                data.push((row as f64 + 0.5) / gh as f64);
            }
        }
        Tensor::from_parts(vec![gh * gw, 2], data)
    }

    /// Embeds one frame `[3, H, W]` (pixel values in [0, 1]) into `[L, D]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, frame: &Tensor) -> Result<Var> {
        let shape = frame.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(PsbError::ShapeMismatch {
                op: "patch_embed",
                detail: format!("expected [3, H, W], got {:?}", shape),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        if h % self.cfg.patch != 0 || w % self.cfg.patch != 0 {
            return Err(PsbError::ShapeMismatch {
                op: "patch_embed",
                detail: format!("{}x{} not divisible by patch {}", h, w, self.cfg.patch),
            });
        }
        let patches = tape.input(self.extract_patches(frame, h, w));
        let centers = tape.input(self.patch_centers(h, w));
        let tok = self.proj.forward(tape, p, patches)?;
        let pos = self.pos.forward(tape, p, centers)?;
        let x = tape.add(tok, pos)?;
        let x = self.ln.forward(tape, p, x)?;
        self.mlp.forward(tape, p, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub model_dim: usize,
    pub hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { model_dim: 192, hidden: 64 }
    }
}

/// Per-time-step decoder output. Layout is position-major: `rgb_per_slot`
/// is `[N, H*W, 3]`, `alpha_logits` `[N, H*W]`, `masks` `[N, H*W]`
/// (softmax over slots), `mixture` `[H*W, 3]`.
pub struct DecoderOutput {
    pub rgb_per_slot: Var,
    pub alpha_logits: Var,
    pub masks: Var,
    pub mixture: Var,
}

/// Spatial broadcast mixture decoder over a fixed pixel grid.
pub struct BroadcastDecoder {
    pub cfg: DecoderConfig,
    slot_ln: LayerNorm,
    pos: Linear,
    head: Mlp,
}

impl BroadcastDecoder {
    pub fn init(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            cfg,
            slot_ln: LayerNorm::init(store, "decoder.slot_ln", d),
            pos: Linear::init(store, "decoder.pos", 2, d, true, false, rng),
            head: Mlp::init(store, "decoder.head", d, cfg.hidden, 4, false, rng),
        }
    }

    fn pixel_coords(h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                data.push((x as f64 + 0.5) / w as f64);
                data.push((y as f64 + 0.5) / h as f64);
            }
        }
        Tensor::from_parts(vec![h * w, 2], data)
    }

    /// Decodes the slots of one time-step (`[N, D]`) over an `h x w` grid.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        slots_t: Var,
        h: usize,
        w: usize,
    ) -> Result<DecoderOutput> {
        let shape = tape.value(slots_t).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.model_dim {
            return Err(PsbError::ShapeMismatch {
                op: "broadcast_decode",
                detail: format!("slots {:?} vs model_dim {}", shape, self.cfg.model_dim),
            });
        }
        let n = shape[0];
        let hw = h * w;
        let d = self.cfg.model_dim;

        let x = self.slot_ln.forward(tape, p, slots_t)?;
        let x1 = tape.reshape(x, vec![n, 1, d])?;
        let grid = tape.broadcast_to(x1, vec![n, hw, d])?;
        let coords = tape.input(Self::pixel_coords(h, w));
        let pos = self.pos.forward(tape, p, coords)?; // [HW, D]
        let grid = tape.add(grid, pos)?;
        let out = self.head.forward(tape, p, grid)?; // [N, HW, 4]

        let rgb = tape.narrow(out, 2, 0, 3)?;
        let alpha3 = tape.narrow(out, 2, 3, 1)?;
        let alpha = tape.reshape(alpha3, vec![n, hw])?;
        let masks = tape.softmax(alpha, 0, None, OnEmpty::Error)?;
        let masks3 = tape.reshape(masks, vec![n, hw, 1])?;
        let weighted = tape.mul(rgb, masks3)?;
        let mixture = tape.sum_axis(weighted, 0, false)?; // [HW, 3]
        Ok(DecoderOutput { rgb_per_slot: rgb, alpha_logits: alpha, masks, mixture })
    }
}

/// Mean squared error between a decoded mixture `[H*W, 3]` and a frame.
pub fn recon_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let rows = frame_as_rows(target)?;
    if tape.value(pred).shape() != rows.shape() {
        return Err(PsbError::ShapeMismatch {
            op: "recon_loss",
            detail: format!("pred {:?} vs target {:?}", tape.value(pred).shape(), rows.shape()),
        });
    }
    let tv = tape.input(rows);
    let diff = tape.sub(pred, tv)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// `[3, H, W]` frame to position-major `[H*W, 3]` rows.
pub fn frame_as_rows(frame: &Tensor) -> Result<Tensor> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(PsbError::ShapeMismatch { op: "frame_as_rows", detail: format!("{:?}", shape) });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(frame.at(&[c, y, x]));
            }
        }
    }
    Ok(Tensor::from_parts(vec![h * w, 3], data))
}

/// Position-major `[H*W, 3]` rows back to a `[3, H, W]` frame.
pub fn rows_as_frame(rows: &Tensor, h: usize, w: usize) -> Tensor {
    assert_eq!(rows.shape(), &[h * w, 3]);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = rows.at(&[y * w + x, c]);
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Per-pixel winning slot (argmax over mask weights). `masks: [N, H*W]`.
pub fn masks_argmax(masks: &Tensor) -> Vec<u32> {
    let (n, hw) = (masks.shape()[0], masks.shape()[1]);
    (0..hw)
        .map(|pix| {
            let mut best = 0usize;
            for slot in 1..n {
                if masks.at(&[slot, pix]) > masks.at(&[best, pix]) {
                    best = slot;
                }
            }
            best as u32
        })
        .collect()
}

/// Sine-cosine vectorization of a scalar: interleaved
/// `[sin(g_i s), cos(g_i s)]` with `g_i = pi * 2^(i-1) / max_value`.
pub fn vectorize_scalar(s: f64, d: usize, max_value: f64) -> Tensor {
    assert!(d % 2 == 0, "vectorize_scalar needs an even dimension");
    let mut data = Vec::with_capacity(d);
    for i in 1..=d / 2 {
        let gamma = std::f64::consts::PI * 2f64.powi(i as i32 - 1) / max_value;
        data.push((gamma * s).sin());
        data.push((gamma * s).cos());
    }
    Tensor::from_parts(vec![d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{randomize, seeded_rng};
    use rand::Rng;

    fn rand_frame(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn token_counts() {
        let mut store = ParamStore::new();
        let fe = PatchEmbed::init(
            &mut store,
            FrontendConfig { patch: 4, model_dim: 16, mlp_hidden: 16 },
            &mut seeded_rng(1, 0),
        );
        assert_eq!(fe.tokens_per_frame(4, 4), 1);
        assert_eq!(fe.tokens_per_frame(32, 32), 64);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let frame = rand_frame(8, 8, &mut seeded_rng(2, 0));
        let tok = fe.forward(&mut tape, &bound, &frame).unwrap();
        assert_eq!(tape.value(tok).shape(), &[4, 16]);
    }

    #[test]
    fn indivisible_frame_is_rejected() {
        let mut store = ParamStore::new();
        let fe = PatchEmbed::init(
            &mut store,
            FrontendConfig { patch: 4, model_dim: 8, mlp_hidden: 8 },
            &mut seeded_rng(3, 0),
        );
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let frame = rand_frame(6, 8, &mut seeded_rng(4, 0));
        assert!(fe.forward(&mut tape, &bound, &frame).is_err());
    }

    #[test]
    fn zero_image_with_zero_pos_projection_hits_bias_path_only() {
        let mut store = ParamStore::new();
        let fe = PatchEmbed::init(
            &mut store,
            FrontendConfig { patch: 2, model_dim: 8, mlp_hidden: 8 },
            &mut seeded_rng(5, 0),
        );
        randomize(&mut store, &mut seeded_rng(6, 0), 0.4);
        store.set("frontend.pos.w", Tensor::zeros(&[2, 8]));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let frame = Tensor::zeros(&[3, 4, 4]);
        let tok = fe.forward(&mut tape, &bound, &frame).unwrap();
        let tv = tape.value(tok);
        // Every token sees the same biases, so all rows are identical.
        for l in 1..4 {
            for c in 0..8 {
                assert_eq!(tv.at(&[l, c]), tv.at(&[0, c]));
            }
        }
    }

    #[test]
    fn single_slot_owns_the_whole_mixture() {
        let mut store = ParamStore::new();
        let dec = BroadcastDecoder::init(
            &mut store,
            DecoderConfig { model_dim: 8, hidden: 8 },
            &mut seeded_rng(7, 0),
        );
        randomize(&mut store, &mut seeded_rng(8, 0), 0.4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let slots = tape.input(Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1));
        let out = dec.forward(&mut tape, &bound, slots, 4, 4).unwrap();
        assert!(tape.value(out.masks).data().iter().all(|&m| (m - 1.0).abs() < 1e-15));
        let rgb = tape.value(out.rgb_per_slot).clone();
        let mix = tape.value(out.mixture);
        assert!(mix.max_abs_diff(&rgb.reshaped(vec![16, 3]).unwrap()) < 1e-15);
    }

    #[test]
    fn identical_slots_split_masks_evenly() {
        let mut store = ParamStore::new();
        let dec = BroadcastDecoder::init(
            &mut store,
            DecoderConfig { model_dim: 8, hidden: 8 },
            &mut seeded_rng(9, 0),
        );
        randomize(&mut store, &mut seeded_rng(10, 0), 0.4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let row = Tensor::from_fn(&[8], |i| (i as f64 - 3.0) * 0.2);
        let slots = tape.input(Tensor::from_fn(&[2, 8], |i| row.data()[i % 8]));
        let out = dec.forward(&mut tape, &bound, slots, 4, 4).unwrap();
        assert!(tape.value(out.masks).data().iter().all(|&m| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn masks_form_a_simplex_and_mixture_stays_in_hull() {
        for seed in 0..5u64 {
            let mut store = ParamStore::new();
            let dec = BroadcastDecoder::init(
                &mut store,
                DecoderConfig { model_dim: 8, hidden: 8 },
                &mut seeded_rng(11, seed),
            );
            randomize(&mut store, &mut seeded_rng(12, seed), 0.5);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let slots = tape.input(Tensor::from_fn(&[3, 8], |i| {
                ((i * 37 + seed as usize) % 11) as f64 * 0.1 - 0.5
            }));
            let out = dec.forward(&mut tape, &bound, slots, 3, 5).unwrap();
            let masks = tape.value(out.masks).clone();
            let rgb = tape.value(out.rgb_per_slot).clone();
            let mix = tape.value(out.mixture).clone();
            for pix in 0..15 {
                let total: f64 = (0..3).map(|s| masks.at(&[s, pix])).sum();
                assert!((total - 1.0).abs() < 1e-12);
                for c in 0..3 {
                    let lo = (0..3).map(|s| rgb.at(&[s, pix, c])).fold(f64::INFINITY, f64::min);
                    let hi =
                        (0..3).map(|s| rgb.at(&[s, pix, c])).fold(f64::NEG_INFINITY, f64::max);
                    let v = mix.at(&[pix, c]);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn recon_loss_examples() {
        let mut rng = seeded_rng(13, 0);
        let frame = rand_frame(4, 4, &mut rng);
        let rows = frame_as_rows(&frame).unwrap();
        let mut tape = Tape::new();
        let pred = tape.input(rows.clone());
        let zero = recon_loss(&mut tape, pred, &frame).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);

        let shifted = tape.input(rows.map(|v| v + 0.1));
        let l = recon_loss(&mut tape, shifted, &frame).unwrap();
        assert!((tape.value(l).item() - 0.01).abs() < 1e-12);

        // Symmetry: swap prediction and target.
        let frame2 = rand_frame(4, 4, &mut rng);
        let p1 = tape.input(frame_as_rows(&frame2).unwrap());
        let a = recon_loss(&mut tape, p1, &frame).unwrap();
        let p2 = tape.input(rows);
        let b = recon_loss(&mut tape, p2, &frame2).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-15);
    }

    #[test]
    fn frame_row_roundtrip() {
        let mut rng = seeded_rng(14, 0);
        let frame = rand_frame(3, 5, &mut rng);
        let rows = frame_as_rows(&frame).unwrap();
        assert_eq!(rows_as_frame(&rows, 3, 5), frame);
    }

    #[test]
    fn vectorize_scalar_values() {
        let v = vectorize_scalar(0.0, 6, 10.0);
        assert_eq!(v.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let v = vectorize_scalar(10.0, 16, 10.0);
        assert!(v.data()[0].abs() < 1e-12); // sin(pi)
        assert!((v.data()[1] + 1.0).abs() < 1e-12); // cos(pi)
        assert_eq!(v.len(), 16);
    }
}
