//! Deterministic bouncing-sprite videos with exact instance masks.
//!
//! Episodes are a pure function of (seed, config): M sprites with random
//! shape, palette color, size, position, and velocity move with elastic wall
//! reflection and are rendered back to front with hard edges (no
//! anti-aliasing), so the per-pixel instance ids are unambiguous ground
//! truth. Higher ids occlude lower ones.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! magic   b"PSBD"
//! u32     format version (1)
//! u32     episode count
//! per episode:
//!   u32   factor block length, then that many bytes of JSON factors
//!   u32   rank, then u32 dims              (frames; f64 LE payload)
//!   u32   rank, then u32 dims              (masks; u16 LE payload)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PsbError, Result};
use crate::params::seeded_rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"PSBD";
pub const DATASET_VERSION: u32 = 1;

/// 8-color palette for sprites; distinct per episode so that color is a
/// probe-able factor.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.9, 0.15, 0.9],
    [0.1, 0.9, 0.9],
    [0.95, 0.55, 0.1],
    [0.85, 0.85, 0.85],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Square,
    Circle,
    Triangle,
}

impl SpriteShape {
    pub fn class_index(self) -> usize {
        match self {
            SpriteShape::Square => 0,
            SpriteShape::Circle => 1,
            SpriteShape::Triangle => 2,
        }
    }
}

/// Static identity of one sprite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape: SpriteShape,
    pub color: [f64; 3],
    pub palette_index: usize,
    /// Radius in pixels (3, 4, or 5).
    pub size: f64,
}

/// Pose of one sprite at one time-step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

/// Identity plus per-time-step motion states of one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub spec: SpriteSpec,
    pub states: Vec<MotionState>,
}

/// Per-pixel instance ids: 0 = background, 1..=M = objects, stable over t.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVideo {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u16>,
}

impl MaskVideo {
    pub fn at(&self, t: usize, y: usize, x: usize) -> u16 {
        self.ids[(t * self.h + y) * self.w + x]
    }

    pub fn frame(&self, t: usize) -> &[u16] {
        &self.ids[t * self.h * self.w..(t + 1) * self.h * self.w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[T, 3, H, W]`, values in [0, 1].
    pub frames: Tensor,
    pub masks: MaskVideo,
    pub objects: Vec<ObjectTrack>,
}

impl Episode {
    pub fn frame(&self, t: usize) -> Tensor {
        let (_, c, h, w) = self.dims();
        let stride = c * h * w;
        Tensor::from_parts(
            vec![c, h, w],
            self.frames.data()[t * stride..(t + 1) * stride].to_vec(),
        )
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { t: 6, h: 32, w: 32, min_objects: 2, max_objects: 3 }
    }
}

fn inside_shape(shape: SpriteShape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        SpriteShape::Square => dx.abs() <= r && dy.abs() <= r,
        SpriteShape::Circle => dx * dx + dy * dy <= r * r,
        SpriteShape::Triangle => {
            // Apex up: vertices (0, -r), (-r, r), (r, r).
            if dy < -r || dy > r {
                return false;
            }
            let half_width = (dy + r) / 2.0;
            dx.abs() <= half_width
        }
    }
}

/// Advances one coordinate with elastic reflection inside [lo, hi].
fn reflect(mut pos: f64, mut vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    pos += vel;
    while pos < lo || pos > hi {
        if pos < lo {
            pos = 2.0 * lo - pos;
            vel = -vel;
        } else {
            pos = 2.0 * hi - pos;
            vel = -vel;
        }
    }
    (pos, vel)
}

/// Generates one episode deterministically from a seed.
pub fn generate_episode(seed: u64, cfg: &GenConfig) -> Result<Episode> {
    if cfg.h < 16 || cfg.w < 16 {
        return Err(PsbError::InvalidArgument("canvas must be at least 16x16".into()));
    }
    if cfg.t < 1 {
        return Err(PsbError::InvalidArgument("episodes need at least one frame".into()));
    }
    if cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects || cfg.max_objects > PALETTE.len() {
        return Err(PsbError::InvalidArgument(format!(
            "object range {}..={} invalid",
            cfg.min_objects, cfg.max_objects
        )));
    }
    let mut rng: ChaCha8Rng = seeded_rng(seed, 0xDA7A);
    let m = rng.random_range(cfg.min_objects..=cfg.max_objects);

    // Distinct palette colors per episode.
    let mut palette_order: Vec<usize> = (0..PALETTE.len()).collect();
    for i in (1..palette_order.len()).rev() {
        let j = rng.random_range(0..=i);
        palette_order.swap(i, j);
    }

    let shapes = [SpriteShape::Square, SpriteShape::Circle, SpriteShape::Triangle];
    let mut objects: Vec<ObjectTrack> = (0..m)
        .map(|i| {
            let size = rng.random_range(3..=5) as f64;
            let shape = shapes[rng.random_range(0..3)];
            let palette_index = palette_order[i];
            // Fully inside the canvas at spawn.
            let x = rng.random_range(size..(cfg.w as f64 - 1.0 - size));
            let y = rng.random_range(size..(cfg.h as f64 - 1.0 - size));
            let speed = rng.random_range(0.5..2.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            ObjectTrack {
                spec: SpriteSpec { shape, color: PALETTE[palette_index], palette_index, size },
                states: vec![MotionState {
                    position: [x, y],
                    velocity: [speed * angle.cos(), speed * angle.sin()],
                }],
            }
        })
        .collect();

    // Integrate positions with elastic wall reflection.
    for _ in 1..cfg.t {
        for obj in &mut objects {
            let r = obj.spec.size;
            let prev = *obj.states.last().unwrap();
            let (x, vx) = reflect(prev.position[0], prev.velocity[0], r, cfg.w as f64 - 1.0 - r);
            let (y, vy) = reflect(prev.position[1], prev.velocity[1], r, cfg.h as f64 - 1.0 - r);
            obj.states.push(MotionState { position: [x, y], velocity: [vx, vy] });
        }
    }

    // Render back to front: higher id occludes lower.
    let (t_len, h, w) = (cfg.t, cfg.h, cfg.w);
    let mut frames = vec![0.0f64; t_len * 3 * h * w];
    let mut ids = vec![0u16; t_len * h * w];
    for t in 0..t_len {
        for (index, obj) in objects.iter().enumerate() {
            let id = (index + 1) as u16;
            let state = obj.states[t];
            let r = obj.spec.size;
            let (cx, cy) = (state.position[0], state.position[1]);
            let x_lo = (cx - r).floor().max(0.0) as usize;
            let x_hi = (cx + r).ceil().min(w as f64 - 1.0) as usize;
            let y_lo = (cy - r).floor().max(0.0) as usize;
            let y_hi = (cy + r).ceil().min(h as f64 - 1.0) as usize;
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    if inside_shape(obj.spec.shape, x as f64 - cx, y as f64 - cy, r) {
                        ids[(t * h + y) * w + x] = id;
                        for c in 0..3 {
                            frames[((t * 3 + c) * h + y) * w + x] = obj.spec.color[c];
                        }
                    }
                }
            }
        }
    }
    Ok(Episode {
        frames: Tensor::from_parts(vec![t_len, 3, h, w], frames),
        masks: MaskVideo { t: t_len, h, w, ids },
        objects,
    })
}

/// Generates a batch of episodes with per-episode seeds derived from a root
/// seed; episodes are independent.
pub fn generate_dataset(root_seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| generate_episode(root_seed.wrapping_add(i as u64), cfg))
        .collect()
}

// ── dataset file io ─────────────────────────────────────────────────────

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
}

pub fn write_dataset(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, episodes.len() as u32);
    for ep in episodes {
        let factors = serde_json::to_vec(&ep.objects)?;
        put_u32(&mut out, factors.len() as u32);
        out.extend_from_slice(&factors);

        put_dims(&mut out, ep.frames.shape());
        for v in ep.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_dims(&mut out, &[ep.masks.t, ep.masks.h, ep.masks.w]);
        for v in &ep.masks.ids {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PsbError::Dataset(format!(
                "truncated payload: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(PsbError::Dataset(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(PsbError::Dataset(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, DATASET_MAGIC
        )));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(PsbError::Dataset(format!(
            "version mismatch: file {version}, supported {DATASET_VERSION}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let flen = cur.u32()? as usize;
        let objects: Vec<ObjectTrack> = serde_json::from_slice(cur.take(flen)?)?;

        let fdims = cur.dims()?;
        let fcount: usize = fdims.iter().product();
        let fbytes = cur.take(fcount * 8)?;
        let frames: Vec<f64> = fbytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if fdims.len() != 4 || fdims[1] != 3 {
            return Err(PsbError::Dataset(format!("bad frame dims {:?}", fdims)));
        }

        let mdims = cur.dims()?;
        if mdims.len() != 3 {
            return Err(PsbError::Dataset(format!("bad mask dims {:?}", mdims)));
        }
        let mcount: usize = mdims.iter().product();
        let mbytes = cur.take(mcount * 2)?;
        let ids: Vec<u16> = mbytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();

        episodes.push(Episode {
            frames: Tensor::from_vec(fdims.clone(), frames)
                .map_err(|e| PsbError::Dataset(e.to_string()))?,
            masks: MaskVideo { t: mdims[0], h: mdims[1], w: mdims[2], ids },
            objects,
        });
    }
    if cur.pos != buf.len() {
        return Err(PsbError::Dataset(format!(
            "{} trailing bytes after last episode",
            buf.len() - cur.pos
        )));
    }
    Ok(episodes)
}
