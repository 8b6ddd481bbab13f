//! Central finite-difference oracle for tape gradients.
//!
//! The checker is deliberately independent of the backward pass: it
//! re-evaluates the loss at perturbed parameters and compares
//! `(f(p+eps) - f(p-eps)) / (2 eps)` against the tape gradient, element by
//! element, in 64-bit mode.

use crate::error::Result;
use crate::params::{BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-parameter worst relative error, plus the overall maximum.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }
}

/// Relative error with a floor that keeps true-zero gradients from amplifying
/// finite-difference noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares tape gradients of a deterministic scalar-valued `f` against
/// central finite differences at every parameter element.
///
/// Errors exceeding a tolerance are reported through the returned maxima,
/// never thrown; only evaluation failures propagate.
pub fn grad_check<F>(params: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients from one taped run.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let adj = tape.backward(loss)?;

    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    for (name, value) in params.iter() {
        let grad = adj
            .get(bound.var(name))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let base = value.clone();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[i] += eps;
            let mut minus = base.data().to_vec();
            minus[i] -= eps;

            let mut p = params.clone();
            p.set(name, Tensor::from_parts(base.shape().to_vec(), plus));
            let f_plus = eval(&p)?;
            p.set(name, Tensor::from_parts(base.shape().to_vec(), minus));
            let f_minus = eval(&p)?;

            let fd = (f_plus - f_minus) / (2.0 * eps);
            worst = worst.max(rel_err(grad.data()[i], fd));
        }
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param, max_rel_err: max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_closed_form() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::scalar(3.0));
        let report = grad_check(
            &params,
            |tape, bound| {
                let x = bound.var("theta");
                tape.mul(x, x)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut params = ParamStore::new();
        params.insert("theta", Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let report = grad_check(
            &params,
            |tape, _bound| Ok(tape.input(Tensor::scalar(4.25))),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9);
    }

    /// Every differentiable op, checked against finite differences on random
    /// small shapes over many seeds.
    #[test]
    fn every_op_matches_finite_differences() {
        use crate::params::{randomize, seeded_rng};
        use crate::tape::OnEmpty;
        use crate::tensor::Mask;
        use rand::Rng;

        for seed in 0..20u64 {
            let mut rng = seeded_rng(0xF00D, seed);
            let m = rng.random_range(1..=3usize);
            let k = rng.random_range(1..=3usize);
            let n = rng.random_range(2..=4usize);

            let mut params = ParamStore::new();
            params.insert("a", Tensor::zeros(&[m, k]));
            params.insert("b", Tensor::zeros(&[k, n]));
            params.insert("c", Tensor::zeros(&[2, m, k]));
            params.insert("v", Tensor::zeros(&[n]));
            params.insert("gain", Tensor::zeros(&[n]));
            params.insert("bias", Tensor::zeros(&[n]));
            params.insert("table", Tensor::zeros(&[2, 5]));
            randomize(&mut params, &mut rng, 0.8);

            let weights: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mask_bits: Vec<bool> = {
                let mut bits = vec![true; m * n];
                for row in 0..m {
                    for col in 1..n {
                        bits[row * n + col] = rng.random_range(0.0..1.0) < 0.7;
                    }
                }
                bits
            };
            let idx: Vec<usize> = (0..m * n).map(|_| rng.random_range(0..5)).collect();

            let report = grad_check(
                &params,
                |tape, p| {
                    let (a, b, c) = (p.var("a"), p.var("b"), p.var("c"));
                    let (v, gain, bias) = (p.var("v"), p.var("gain"), p.var("bias"));
                    let table = p.var("table");

                    let mm = tape.matmul(a, b)?; // [m,n]
                    let bmm = tape.matmul(c, b)?; // [2,m,n] broadcast batch
                    let sum_b = tape.sum_axis(bmm, 0, false)?; // [m,n]
                    let x = tape.add(mm, sum_b)?;
                    let x = tape.add(x, v)?; // broadcast add
                    let sub = tape.sub(x, v)?;
                    let prod = tape.mul(sub, x)?;
                    let denom = tape.add_scalar(v, 4.0);
                    let quot = tape.div(prod, denom)?;
                    let ln = tape.layer_norm(quot, gain, bias)?;
                    let g = tape.gelu(ln)?;
                    let sg = tape.sigmoid(g)?;
                    let th = tape.tanh(sg)?;
                    let ex = tape.exp(th)?;
                    let mask = Mask::new(vec![m, n], mask_bits.clone());
                    let sm = tape.softmax_last(ex, Some(&mask), OnEmpty::Error)?;
                    let sm2 = tape.softmax(sm, 0, None, OnEmpty::Error)?;
                    let bt = tape.rel_bias_gather(table, &idx, m, n)?; // [2,m,n]
                    let btr = tape.sum_axis(bt, 0, false)?;
                    let mixed = tape.mul(sm2, btr)?;
                    let neg = tape.neg(mixed);
                    let sc = tape.scale(neg, -1.25);
                    let sc1 = tape.reshape(sc, vec![1, m, n])?;
                    let wide = tape.broadcast_to(sc1, vec![2, m, n])?;
                    let perm = tape.permute(wide, &[1, 0, 2])?;
                    let nr = tape.narrow(perm, 0, 0, m.min(2))?;
                    let st = tape.stack0(&[nr, nr])?;
                    // Weighted sum into a scalar.
                    let flatlen = tape.value(st).len();
                    let w = tape.input(Tensor::from_fn(&[flatlen], |i| weights[i % 64]));
                    let flat = tape.reshape(st, vec![flatlen])?;
                    let weighted = tape.mul(flat, w)?;
                    Ok(tape.sum_all(weighted))
                },
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst()
            );
        }
    }

    /// Finite differences through a full binder block (cross-attention,
    /// both self-attention axes, MLP, LayerNorms, relative bias).
    #[test]
    fn full_binder_block_loss_passes_fd_check() {
        use crate::encoder::{PsbConfig, PsbEncoder};
        use crate::params::{randomize, seeded_rng};
        use rand::Rng;

        let cfg = PsbConfig {
            model_dim: 8,
            num_slots: 2,
            layers: 1,
            bottom_up_heads: 2,
            time_heads: 2,
            object_heads: 2,
            mlp_hidden: 12,
            t_max: 4,
            window: 4,
            ..PsbConfig::default()
        };
        let mut params = ParamStore::new();
        let enc = PsbEncoder::init(&mut params, cfg, &mut seeded_rng(1, 0));
        randomize(&mut params, &mut seeded_rng(2, 0), 0.5);
        let mut rng = seeded_rng(3, 0);
        let e = Tensor::from_fn(&[3, 4, 8], |_| rng.random_range(-1.0..1.0));
        let target = Tensor::from_fn(&[3, 2, 8], |_| rng.random_range(-1.0..1.0));

        let report = grad_check(
            &params,
            |tape, p| {
                let ev = tape.input(e.clone());
                let s = enc.encode(tape, p, ev, 7)?;
                let tv = tape.input(target.clone());
                let diff = tape.sub(s, tv)?;
                let sq = tape.mul(diff, diff)?;
                Ok(tape.mean_all(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst()
        );
    }
}
