//! Volumetric ray compositing as verified pure functions.
//!
//! Per sample along a ray, per-source densities and colors are combined into
//! one density `sigma = sum sigma_n` and a density-weighted color
//! `c = sum c_n sigma_n / sigma`. Opacity is
//! `alpha_i = 1 - exp(-sigma_i * segment_i)`, transmittance
//! `T_i = prod_{j<i} (1 - alpha_j)`, and the ray color is
//! `sum T_i alpha_i c_i`, plus `T_{last+1} * c_sky` when a sky color is
//! present. Optional shadow coefficients scale each sample's shadeless color
//! by `rho_static * prod_n rho_n` before integration.

use crate::error::{PsbError, Result};

/// One emitting source at a sample point: a density, a color, and an
/// optional shadow coefficient in [0, 1] (1 = unshadowed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceSample {
    pub density: f64,
    pub color: [f64; 3],
    pub shadow: Option<f64>,
}

impl SourceSample {
    pub fn new(density: f64, color: [f64; 3]) -> Self {
        Self { density, color, shadow: None }
    }

    pub fn with_shadow(density: f64, color: [f64; 3], shadow: f64) -> Self {
        Self { density, color, shadow: Some(shadow) }
    }

    fn validate(&self) -> Result<()> {
        if self.density < 0.0 {
            return Err(PsbError::InvalidArgument(format!(
                "negative density {}",
                self.density
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(PsbError::InvalidArgument(format!(
                "color {:?} outside [0, 1]",
                self.color
            )));
        }
        if let Some(rho) = self.shadow {
            if !(0.0..=1.0).contains(&rho) {
                return Err(PsbError::InvalidArgument(format!(
                    "shadow coefficient {rho} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// One sample point along a ray: per-slot sources, an optional static-field
/// source, and the length of the segment to the next sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub slot_sources: Vec<SourceSample>,
    pub static_source: Option<SourceSample>,
    pub seg_len: f64,
}

/// A full ray: its samples plus an optional far-field sky color that
/// receives the residual transmittance.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySegmentBatch {
    pub samples: Vec<RaySample>,
    pub sky_color: Option<[f64; 3]>,
}

impl RaySegmentBatch {
    fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.seg_len <= 0.0 {
                return Err(PsbError::InvalidArgument(format!(
                    "segment length {} must be positive",
                    s.seg_len
                )));
            }
            for src in &s.slot_sources {
                src.validate()?;
            }
            if let Some(st) = &s.static_source {
                st.validate()?;
            }
        }
        if let Some(sky) = &self.sky_color {
            if sky.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(PsbError::InvalidArgument(format!("sky color {:?}", sky)));
            }
        }
        Ok(())
    }
}

/// Density-weighted mixture of per-source emissions at one point:
/// `sigma = sum sigma_n`, `c = sum c_n sigma_n / sigma`; zero total density
/// yields black (never rendered: zero opacity). Permutation invariant in
/// the source index.
pub fn composite_slots(
    densities: &[f64],
    colors: &[[f64; 3]],
    static_source: Option<(f64, [f64; 3])>,
) -> Result<(f64, [f64; 3])> {
    assert_eq!(densities.len(), colors.len());
    let mut sigma = 0.0;
    let mut weighted = [0.0; 3];
    let mut fold = |d: f64, c: [f64; 3]| -> Result<()> {
        if d < 0.0 {
            return Err(PsbError::InvalidArgument(format!("negative density {d}")));
        }
        sigma += d;
        for ch in 0..3 {
            weighted[ch] += c[ch] * d;
        }
        Ok(())
    };
    if let Some((d, c)) = static_source {
        fold(d, c)?;
    }
    for (&d, &c) in densities.iter().zip(colors.iter()) {
        fold(d, c)?;
    }
    if sigma == 0.0 {
        return Ok((0.0, [0.0; 3]));
    }
    Ok((sigma, [weighted[0] / sigma, weighted[1] / sigma, weighted[2] / sigma]))
}

/// Integrates a ray front to back. See the module docs for the formulas.
pub fn render_ray(batch: &RaySegmentBatch) -> Result<[f64; 3]> {
    batch.validate()?;
    let mut out = [0.0; 3];
    let mut transmittance = 1.0;
    for sample in &batch.samples {
        let densities: Vec<f64> = sample.slot_sources.iter().map(|s| s.density).collect();
        let colors: Vec<[f64; 3]> = sample.slot_sources.iter().map(|s| s.color).collect();
        let static_src = sample.static_source.as_ref().map(|s| (s.density, s.color));
        let (sigma, mut color) = composite_slots(&densities, &colors, static_src)?;

        // Shadow gate: rho_static * prod_n rho_n scales the shadeless color.
        let mut rho = 1.0;
        let mut any_shadow = false;
        if let Some(st) = &sample.static_source {
            if let Some(r) = st.shadow {
                rho *= r;
                any_shadow = true;
            }
        }
        for src in &sample.slot_sources {
            if let Some(r) = src.shadow {
                rho *= r;
                any_shadow = true;
            }
        }
        if any_shadow {
            for ch in 0..3 {
                color[ch] *= rho;
            }
        }

        let alpha = 1.0 - (-sigma * sample.seg_len).exp();
        for ch in 0..3 {
            out[ch] += transmittance * alpha * color[ch];
        }
        transmittance *= 1.0 - alpha;
    }
    if let Some(sky) = batch.sky_color {
        for ch in 0..3 {
            out[ch] += transmittance * sky[ch];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use rand::Rng;

    /// Independent reference: recompute transmittance from scratch per
    /// sample with the product formula instead of a running state.
    fn render_oracle(batch: &RaySegmentBatch) -> [f64; 3] {
        let k = batch.samples.len();
        let mut alphas = vec![0.0; k];
        let mut colors = vec![[0.0; 3]; k];
        for (i, s) in batch.samples.iter().enumerate() {
            let mut sigma = 0.0;
            let mut weighted = [0.0; 3];
            let mut rho = 1.0;
            let mut any = false;
            let mut add = |d: f64, c: [f64; 3]| {
                sigma += d;
                for ch in 0..3 {
                    weighted[ch] += d * c[ch];
                }
            };
            if let Some(st) = &s.static_source {
                add(st.density, st.color);
                if let Some(r) = st.shadow {
                    rho *= r;
                    any = true;
                }
            }
            for src in &s.slot_sources {
                add(src.density, src.color);
                if let Some(r) = src.shadow {
                    rho *= r;
                    any = true;
                }
            }
            let c = if sigma == 0.0 {
                [0.0; 3]
            } else {
                [weighted[0] / sigma, weighted[1] / sigma, weighted[2] / sigma]
            };
            alphas[i] = 1.0 - (-sigma * s.seg_len).exp();
            colors[i] = if any { [c[0] * rho, c[1] * rho, c[2] * rho] } else { c };
        }
        let mut out = [0.0; 3];
        for i in 0..k {
            let t_i: f64 = (0..i).map(|j| 1.0 - alphas[j]).product();
            for ch in 0..3 {
                out[ch] += t_i * alphas[i] * colors[i][ch];
            }
        }
        if let Some(sky) = batch.sky_color {
            let t_end: f64 = (0..k).map(|j| 1.0 - alphas[j]).product();
            for ch in 0..3 {
                out[ch] += t_end * sky[ch];
            }
        }
        out
    }

    fn rand_batch(rng: &mut rand_chacha::ChaCha8Rng, with_shadow: bool, sky: bool) -> RaySegmentBatch {
        let k = rng.random_range(1..=6);
        let samples = (0..k)
            .map(|_| {
                let n = rng.random_range(1..=4);
                let slot_sources = (0..n)
                    .map(|_| SourceSample {
                        density: rng.random_range(0.0..3.0),
                        color: [
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                        ],
                        shadow: with_shadow.then(|| rng.random_range(0.0..1.0)),
                    })
                    .collect();
                RaySample {
                    slot_sources,
                    static_source: (rng.random_range(0.0..1.0) < 0.5).then(|| SourceSample {
                        density: rng.random_range(0.0..2.0),
                        color: [0.3, 0.4, 0.5],
                        shadow: with_shadow.then(|| rng.random_range(0.5..1.0)),
                    }),
                    seg_len: rng.random_range(0.05..1.0),
                }
            })
            .collect();
        RaySegmentBatch {
            samples,
            sky_color: sky.then(|| [0.2, 0.5, 0.9]),
        }
    }

    #[test]
    fn composite_slot_examples() {
        // One nonzero source: its color exactly.
        let (s, c) = composite_slots(&[0.0, 2.0, 0.0], &[[1.0, 0.0, 0.0]; 3], None).unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(c, [1.0, 0.0, 0.0]);

        // Equal densities: average color.
        let (_, c) =
            composite_slots(&[1.5, 1.5], &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], None).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[2] - 0.5).abs() < 1e-15);

        // Densities (1, 3): quarter red, three-quarters blue.
        let (s, c) =
            composite_slots(&[1.0, 3.0], &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], None).unwrap();
        assert_eq!(s, 4.0);
        assert!((c[0] - 0.25).abs() < 1e-15 && (c[2] - 0.75).abs() < 1e-15);

        // Zero density renders black.
        let (s, c) = composite_slots(&[0.0], &[[0.9, 0.9, 0.9]], None).unwrap();
        assert_eq!((s, c), (0.0, [0.0; 3]));

        assert!(composite_slots(&[-0.1], &[[0.0; 3]], None).is_err());
    }

    #[test]
    fn composite_is_permutation_invariant() {
        let d = [0.5, 1.25, 2.0];
        let c = [[0.1, 0.2, 0.3], [0.9, 0.8, 0.7], [0.4, 0.4, 0.4]];
        let a = composite_slots(&d, &c, None).unwrap();
        let b = composite_slots(&[d[2], d[0], d[1]], &[c[2], c[0], c[1]], None).unwrap();
        assert!((a.0 - b.0).abs() < 1e-15);
        for ch in 0..3 {
            assert!((a.1[ch] - b.1[ch]).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_scene_with_sky_returns_sky_exactly() {
        let batch = RaySegmentBatch {
            samples: (0..4)
                .map(|_| RaySample {
                    slot_sources: vec![SourceSample::new(0.0, [0.5, 0.5, 0.5])],
                    static_source: None,
                    seg_len: 0.25,
                })
                .collect(),
            sky_color: Some([0.1, 0.6, 0.8]),
        };
        assert_eq!(render_ray(&batch).unwrap(), [0.1, 0.6, 0.8]);
    }

    #[test]
    fn opaque_front_sample_dominates() {
        let batch = RaySegmentBatch {
            samples: vec![
                RaySample {
                    slot_sources: vec![SourceSample::new(50.0, [0.9, 0.1, 0.2])],
                    static_source: None,
                    seg_len: 1.0,
                },
                RaySample {
                    slot_sources: vec![SourceSample::new(50.0, [0.0, 1.0, 0.0])],
                    static_source: None,
                    seg_len: 1.0,
                },
            ],
            sky_color: Some([1.0, 1.0, 1.0]),
        };
        let c = render_ray(&batch).unwrap();
        assert!((c[0] - 0.9).abs() < 1e-9 && (c[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn matches_reference_on_random_rays() {
        for seed in 0..200u64 {
            let mut rng = seeded_rng(77, seed);
            let batch = rand_batch(&mut rng, seed % 3 == 0, seed % 2 == 0);
            let got = render_ray(&batch).unwrap();
            let want = render_oracle(&batch);
            for ch in 0..3 {
                assert!((got[ch] - want[ch]).abs() < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn unit_shadows_reduce_to_shadeless_bitwise() {
        for seed in 0..50u64 {
            let mut rng = seeded_rng(78, seed);
            let mut batch = rand_batch(&mut rng, true, true);
            for s in &mut batch.samples {
                for src in &mut s.slot_sources {
                    src.shadow = Some(1.0);
                }
                if let Some(st) = &mut s.static_source {
                    st.shadow = Some(1.0);
                }
            }
            let mut shadeless = batch.clone();
            for s in &mut shadeless.samples {
                for src in &mut s.slot_sources {
                    src.shadow = None;
                }
                if let Some(st) = &mut s.static_source {
                    st.shadow = None;
                }
            }
            assert_eq!(render_ray(&batch).unwrap(), render_ray(&shadeless).unwrap());
        }
    }

    #[test]
    fn weights_partition_unity_and_colors_stay_in_range() {
        for seed in 0..50u64 {
            let mut rng = seeded_rng(79, seed);
            let batch = rand_batch(&mut rng, false, true);
            // Weight check: sum of T_i alpha_i plus residual transmittance.
            let mut t = 1.0;
            let mut weight_sum = 0.0;
            for s in &batch.samples {
                let sigma: f64 = s.slot_sources.iter().map(|x| x.density).sum::<f64>()
                    + s.static_source.as_ref().map_or(0.0, |x| x.density);
                let alpha = 1.0 - (-sigma * s.seg_len).exp();
                weight_sum += t * alpha;
                t *= 1.0 - alpha;
            }
            assert!((weight_sum + t - 1.0).abs() < 1e-12);
            let c = render_ray(&batch).unwrap();
            assert!(c.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let bad_len = RaySegmentBatch {
            samples: vec![RaySample {
                slot_sources: vec![SourceSample::new(1.0, [0.5; 3])],
                static_source: None,
                seg_len: 0.0,
            }],
            sky_color: None,
        };
        assert!(render_ray(&bad_len).is_err());

        let bad_density = RaySegmentBatch {
            samples: vec![RaySample {
                slot_sources: vec![SourceSample::new(-1.0, [0.5; 3])],
                static_source: None,
                seg_len: 0.5,
            }],
            sky_color: None,
        };
        assert!(render_ray(&bad_density).is_err());
    }
}
