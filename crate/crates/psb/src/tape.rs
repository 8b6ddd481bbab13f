//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Operations record their forward value and a backward closure; `backward`
//! replays closures in exact reverse execution order. Values are immutable
//! once produced and the tape is single-writer. Parallelism lives inside
//! kernels (see `parallel`), never across tape recording.

use crate::error::{PsbError, Result};
use crate::parallel::par_rows;
use crate::tensor::{next_index, Mask, Real, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<R> = Box<dyn Fn(&Tensor<R>, &mut Adjoints<R>)>;

struct Node<R: Real> {
    value: Tensor<R>,
    back: Option<BackFn<R>>,
}

/// Adjoint store produced by `Tape::backward`.
pub struct Adjoints<R: Real = f64> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Adjoints<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<R>) {
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                let data: Vec<R> = acc
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&a, &b)| a + b)
                    .collect();
                *acc = Tensor::from_parts(acc.shape().to_vec(), data);
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// What a masked softmax does with a slice whose entries are all masked out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnEmpty {
    /// Surface an error (a query that can see no keys is a bug).
    Error,
    /// Emit zeros for the slice (a key visible to no query receives no mass).
    Zeros,
}

pub struct Tape<R: Real = f64> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<R>, back: Option<BackFn<R>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: &'static str, value: Tensor<R>, back: BackFn<R>) -> Result<Var> {
        value.check_finite(op)?;
        Ok(self.push(value, Some(back)))
    }

    /// Records an input value. Leaves and constants share mechanics; an
    /// adjoint is simply never requested for pure constants.
    pub fn input(&mut self, value: Tensor<R>) -> Var {
        self.push(value, None)
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, |x, y| x + y, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("div", a, b, |x, y| x / y, BinKind::Div)
    }

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(R, R) -> R,
        kind: BinKind,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = broadcast_zip(op, &av, &bv, f)?;
        let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push_checked(
            op,
            out,
            Box::new(move |g, adj| {
                match kind {
                    BinKind::Add => {
                        adj.accumulate(a, reduce_to_shape(g, &a_shape));
                        adj.accumulate(b, reduce_to_shape(g, &b_shape));
                    }
                    BinKind::Sub => {
                        adj.accumulate(a, reduce_to_shape(g, &a_shape));
                        let neg = g.map(|v| -v);
                        adj.accumulate(b, reduce_to_shape(&neg, &b_shape));
                    }
                    BinKind::Mul => {
                        let ga = broadcast_zip("mul_back", g, &bv, |x, y| x * y).expect("shape");
                        let gb = broadcast_zip("mul_back", g, &av, |x, y| x * y).expect("shape");
                        adj.accumulate(a, reduce_to_shape(&ga, &a_shape));
                        adj.accumulate(b, reduce_to_shape(&gb, &b_shape));
                    }
                    BinKind::Div => {
                        // d(a/b) = g/b , -g*a/b^2
                        let ga = broadcast_zip("div_back", g, &bv, |x, y| x / y).expect("shape");
                        let gb_full = broadcast_zip("div_back", g, &av, |x, y| x * y).expect("shape");
                        let gb = broadcast_zip("div_back", &gb_full, &bv, |x, y| -x / (y * y))
                            .expect("shape");
                        adj.accumulate(a, reduce_to_shape(&ga, &a_shape));
                        adj.accumulate(b, reduce_to_shape(&gb, &b_shape));
                    }
                }
            }),
        )
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v);
        self.push(
            out,
            Some(Box::new(move |g, adj| adj.accumulate(a, g.map(|v| -v)))),
        )
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(
            out,
            Some(Box::new(move |g, adj| adj.accumulate(a, g.map(|v| v * c)))),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: R) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Some(Box::new(move |g, adj| adj.accumulate(a, g.clone()))))
    }

    /// Exact Gaussian-CDF GELU: x * Phi(x).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let half = R::from_f64(0.5);
        let inv_sqrt2 = R::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out = av.map(|x| x * half * (R::ONE + (x * inv_sqrt2).erf()));
        self.push_checked(
            "gelu",
            out,
            Box::new(move |g, adj| {
                let inv_sqrt_2pi = R::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let data: Vec<R> = av
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&x, &gv)| {
                        let cdf = half * (R::ONE + (x * inv_sqrt2).erf());
                        let pdf = (-x * x * half).exp() * inv_sqrt_2pi;
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                adj.accumulate(a, Tensor::from_parts(av.shape().to_vec(), data));
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| R::ONE / (R::ONE + (-x).exp()));
        let saved = out.clone();
        self.push_checked(
            "sigmoid",
            out,
            Box::new(move |g, adj| {
                let data: Vec<R> = saved
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&y, &gv)| gv * y * (R::ONE - y))
                    .collect();
                adj.accumulate(a, Tensor::from_parts(saved.shape().to_vec(), data));
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        let saved = out.clone();
        self.push_checked(
            "tanh",
            out,
            Box::new(move |g, adj| {
                let data: Vec<R> = saved
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&y, &gv)| gv * (R::ONE - y * y))
                    .collect();
                adj.accumulate(a, Tensor::from_parts(saved.shape().to_vec(), data));
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        let saved = out.clone();
        self.push_checked(
            "exp",
            out,
            Box::new(move |g, adj| {
                let data: Vec<R> = saved
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&y, &gv)| gv * y)
                    .collect();
                adj.accumulate(a, Tensor::from_parts(saved.shape().to_vec(), data));
            }),
        )
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let orig = self.value(a).shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, adj| {
                adj.accumulate(a, g.reshaped(orig.clone()).expect("reshape back"));
            })),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if axes.len() != av.rank() {
            return Err(PsbError::ShapeMismatch {
                op: "permute",
                detail: format!("axes {:?} vs rank {}", axes, av.rank()),
            });
        }
        let out = permute_data(av, axes);
        let inverse = invert_axes(axes);
        Ok(self.push(
            out,
            Some(Box::new(move |g, adj| {
                adj.accumulate(a, permute_data(g, &inverse));
            })),
        ))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a).clone();
        let out = broadcast_data(&av, &shape)?;
        let orig = av.shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, adj| {
                adj.accumulate(a, reduce_to_shape(g, &orig));
            })),
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(PsbError::ShapeMismatch {
                op: "narrow",
                detail: format!("axis {} [{}, {}) of {:?}", axis, start, start + len, shape),
            });
        }
        let out = narrow_data(av, axis, start, len);
        Ok(self.push(
            out,
            Some(Box::new(move |g, adj| {
                let mut full = vec![R::ZERO; shape.iter().product()];
                scatter_narrow(&mut full, &shape, axis, start, g);
                adj.accumulate(a, Tensor::from_parts(shape.clone(), full));
            })),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PsbError::InvalidArgument("stack0 of zero tensors".into()));
        }
        let part_shape = self.value(parts[0]).shape().to_vec();
        let part_len: usize = part_shape.iter().product();
        let mut data = Vec::with_capacity(parts.len() * part_len);
        for &p in parts {
            let pv = self.value(p);
            if pv.shape() != part_shape.as_slice() {
                return Err(PsbError::ShapeMismatch {
                    op: "stack0",
                    detail: format!("{:?} vs {:?}", pv.shape(), part_shape),
                });
            }
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&part_shape);
        let owned: Vec<Var> = parts.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Some(Box::new(move |g, adj| {
                for (i, &p) in owned.iter().enumerate() {
                    let piece = &g.data()[i * part_len..(i + 1) * part_len];
                    adj.accumulate(p, Tensor::from_parts(part_shape.clone(), piece.to_vec()));
                }
            })),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(PsbError::ShapeMismatch {
                op: "sum_axis",
                detail: format!("axis {} of {:?}", axis, shape),
            });
        }
        let out = sum_axis_data(av, axis, keepdim);
        Ok(self.push(
            out,
            Some(Box::new(move |g, adj| {
                // Broadcast the reduced gradient back along `axis`.
                let mut g_shape = shape.clone();
                g_shape[axis] = 1;
                let g1 = g.reshaped(g_shape).expect("keepdim reshape");
                let back = broadcast_data(&g1, &shape).expect("broadcast back");
                adj.accumulate(a, back);
            })),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let total = av.data().iter().fold(R::ZERO, |acc, &v| acc + v);
        let shape = av.shape().to_vec();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, adj| {
                let gv = g.item();
                adj.accumulate(a, Tensor::full(&shape, gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, R::from_f64(1.0 / n as f64))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// numpy-style broadcasting of the leading batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = matmul_data(&av, &bv)?;
        let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push_checked(
            "matmul",
            out,
            Box::new(move |g, adj| {
                let bt = transpose_last2(&bv);
                let at = transpose_last2(&av);
                let ga = matmul_data(g, &bt).expect("matmul back a");
                let gb = matmul_data(&at, g).expect("matmul back b");
                adj.accumulate(a, reduce_to_shape(&ga, &a_shape));
                adj.accumulate(b, reduce_to_shape(&gb, &b_shape));
            }),
        )
    }

    // ── normalization & attention primitives ────────────────────────────

    /// Per-last-axis standardization (epsilon 1e-5) followed by affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let d = *xv.shape().last().ok_or_else(|| PsbError::ShapeMismatch {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if d < 2 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(PsbError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            });
        }
        let eps = R::from_f64(1e-5);
        let rows = xv.len() / d;
        let mut out = vec![R::ZERO; xv.len()];
        let mut normed = vec![R::ZERO; xv.len()];
        let mut inv_std = vec![R::ZERO; rows];
        let inv_d = R::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = R::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let is = R::ONE / (var + eps).sqrt();
            inv_std[r] = is;
            for (i, &v) in row.iter().enumerate() {
                let nv = (v - mean) * is;
                normed[r * d + i] = nv;
                out[r * d + i] = gv.data()[i] * nv + bv.data()[i];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let normed = Tensor::from_parts(xv.shape().to_vec(), normed);
        let x_shape = xv.shape().to_vec();
        self.push_checked(
            "layer_norm",
            out,
            Box::new(move |g, adj| {
                let mut dx = vec![R::ZERO; normed.len()];
                let mut dgain = vec![R::ZERO; d];
                let mut dbias = vec![R::ZERO; d];
                for r in 0..rows {
                    let go = &g.data()[r * d..(r + 1) * d];
                    let nr = &normed.data()[r * d..(r + 1) * d];
                    let mut mean_h = R::ZERO;
                    let mut mean_hn = R::ZERO;
                    for i in 0..d {
                        let h = gv.data()[i] * go[i];
                        mean_h += h;
                        mean_hn += h * nr[i];
                        dgain[i] += go[i] * nr[i];
                        dbias[i] += go[i];
                    }
                    mean_h = mean_h * inv_d;
                    mean_hn = mean_hn * inv_d;
                    for i in 0..d {
                        let h = gv.data()[i] * go[i];
                        dx[r * d + i] = (h - mean_h - nr[i] * mean_hn) * inv_std[r];
                    }
                }
                adj.accumulate(x, Tensor::from_parts(x_shape.clone(), dx));
                adj.accumulate(gain, Tensor::from_parts(vec![d], dgain));
                adj.accumulate(bias, Tensor::from_parts(vec![d], dbias));
            }),
        )
    }

    /// Exponentiate-and-normalize along the last axis with max subtraction.
    /// Masked-out entries receive zero weight; an all-masked slice follows
    /// `empty`. An unmasked all-finite slice can never be empty.
    pub fn softmax_last(&mut self, x: Var, mask: Option<&Mask>, empty: OnEmpty) -> Result<Var> {
        let xv = self.value(x).clone();
        let d = *xv.shape().last().ok_or_else(|| PsbError::ShapeMismatch {
            op: "softmax",
            detail: "scalar input".into(),
        })?;
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(PsbError::ShapeMismatch {
                    op: "softmax",
                    detail: format!("mask {:?} vs x {:?}", m.shape(), xv.shape()),
                });
            }
        }
        let rows = xv.len() / d;
        let mut out = vec![R::ZERO; xv.len()];
        let mask_bits = mask.map(|m| m.data().to_vec());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let live = |i: usize| mask_bits.as_ref().map_or(true, |m| m[r * d + i]);
            let mut maxv = None;
            for i in 0..d {
                if live(i) {
                    maxv = Some(match maxv {
                        None => row[i],
                        Some(m) => row[i].maximum(m),
                    });
                }
            }
            let Some(maxv) = maxv else {
                match empty {
                    OnEmpty::Error => {
                        return Err(PsbError::FullyMasked { axis: xv.rank() - 1 });
                    }
                    OnEmpty::Zeros => continue,
                }
            };
            let mut denom = R::ZERO;
            for i in 0..d {
                if live(i) {
                    let e = (row[i] - maxv).exp();
                    out[r * d + i] = e;
                    denom += e;
                }
            }
            for i in 0..d {
                out[r * d + i] = out[r * d + i] / denom;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let saved = out.clone();
        let x_shape = xv.shape().to_vec();
        self.push_checked(
            "softmax",
            out,
            Box::new(move |g, adj| {
                // dx_i = s_i * (g_i - sum_j g_j s_j); masked entries have s = 0.
                let mut dx = vec![R::ZERO; saved.len()];
                for r in 0..rows {
                    let s = &saved.data()[r * d..(r + 1) * d];
                    let go = &g.data()[r * d..(r + 1) * d];
                    let mut dot = R::ZERO;
                    for i in 0..d {
                        dot += go[i] * s[i];
                    }
                    for i in 0..d {
                        dx[r * d + i] = s[i] * (go[i] - dot);
                    }
                }
                adj.accumulate(x, Tensor::from_parts(x_shape.clone(), dx));
            }),
        )
    }

    /// Softmax along an arbitrary axis, via permutation to the last axis.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Mask>, empty: OnEmpty) -> Result<Var> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(PsbError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {} of rank {}", axis, rank),
            });
        }
        if axis == rank - 1 {
            return self.softmax_last(x, mask, empty);
        }
        let mut axes: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        axes.push(axis);
        let xp = self.permute(x, &axes)?;
        let mp = mask.map(|m| permute_mask(m, &axes));
        let sp = self.softmax_last(xp, mp.as_ref(), empty)?;
        self.permute(sp, &invert_axes(&axes))
    }

    /// Looks up `table[h, idx]` producing a `[h, nq, nk]` bias; gradient
    /// scatter-adds back into the table.
    pub fn rel_bias_gather(&mut self, table: Var, idx: &[usize], nq: usize, nk: usize) -> Result<Var> {
        let tv = self.value(table).clone();
        if tv.rank() != 2 {
            return Err(PsbError::ShapeMismatch {
                op: "rel_bias_gather",
                detail: format!("table {:?}", tv.shape()),
            });
        }
        let (h, buckets) = (tv.shape()[0], tv.shape()[1]);
        if idx.len() != nq * nk {
            return Err(PsbError::ShapeMismatch {
                op: "rel_bias_gather",
                detail: format!("{} indices for {}x{}", idx.len(), nq, nk),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= buckets) {
            return Err(PsbError::InvalidArgument(format!(
                "bias bucket {} out of {}",
                bad, buckets
            )));
        }
        let mut out = vec![R::ZERO; h * nq * nk];
        for hh in 0..h {
            let trow = &tv.data()[hh * buckets..(hh + 1) * buckets];
            let orow = &mut out[hh * nq * nk..(hh + 1) * nq * nk];
            for (p, &i) in idx.iter().enumerate() {
                orow[p] = trow[i];
            }
        }
        let idx_owned: Vec<usize> = idx.to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![h, nq, nk], out),
            Some(Box::new(move |g, adj| {
                let mut dt = vec![R::ZERO; h * buckets];
                for hh in 0..h {
                    let grow = &g.data()[hh * nq * nk..(hh + 1) * nq * nk];
                    let drow = &mut dt[hh * buckets..(hh + 1) * buckets];
                    for (p, &i) in idx_owned.iter().enumerate() {
                        drow[i] += grow[p];
                    }
                }
                adj.accumulate(table, Tensor::from_parts(vec![h, buckets], dt));
            })),
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar loss, returning adjoints for
    /// every reachable value.
    pub fn backward(&self, loss: Var) -> Result<Adjoints<R>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(PsbError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj = Adjoints { grads: vec![None; self.nodes.len()] };
        adj.grads[loss.0] = Some(Tensor::full(lv.shape(), R::ONE));
        for id in (0..=loss.0).rev() {
            let Some(g) = adj.grads[id].clone() else { continue };
            g.check_finite("backward")?;
            if let Some(back) = &self.nodes[id].back {
                back(&g, &mut adj);
            }
        }
        Ok(adj)
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// Numpy-style broadcast shape of two operand shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(PsbError::ShapeMismatch {
                op: "broadcast",
                detail: format!("{:?} vs {:?}", a, b),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Elementwise combine with broadcasting. Fast paths: equal shapes and
/// suffix-shaped right or left operand.
pub(crate) fn broadcast_zip<R: Real>(
    op: &'static str,
    a: &Tensor<R>,
    b: &Tensor<R>,
    f: fn(R, R) -> R,
) -> Result<Tensor<R>> {
    if a.shape() == b.shape() {
        let data: Vec<R> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    if is_suffix(b.shape(), a.shape()) && !b.is_empty() {
        let bl = b.len();
        let mut data = Vec::with_capacity(a.len());
        for chunk in a.data().chunks(bl) {
            data.extend(chunk.iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    if is_suffix(a.shape(), b.shape()) && !a.is_empty() {
        let al = a.len();
        let mut data = Vec::with_capacity(b.len());
        for chunk in b.data().chunks(al) {
            data.extend(a.data().iter().zip(chunk.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(b.shape().to_vec(), data));
    }
    // General strided path.
    let out_shape = broadcast_shape(a.shape(), b.shape()).map_err(|_| PsbError::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    })?;
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let a_strides = broadcast_strides(a.shape(), &out_shape);
    let b_strides = broadcast_strides(b.shape(), &out_shape);
    loop {
        let ai: usize = idx.iter().zip(&a_strides).map(|(&i, &s)| i * s).sum();
        let bi: usize = idx.iter().zip(&b_strides).map(|(&i, &s)| i * s).sum();
        data.push(f(a.data()[ai], b.data()[bi]));
        if !next_index(&mut idx, &out_shape) {
            break;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Strides of `shape` viewed inside `out_shape` (0 where broadcast).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out_shape.len()];
    let offset = out_shape.len() - shape.len();
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        if shape[d] != 1 {
            strides[offset + d] = acc;
        }
        acc *= shape[d];
    }
    strides
}

/// Sums `g` down to `target` (inverse of a broadcast). Shapes equal is a no-op.
pub(crate) fn reduce_to_shape<R: Real>(g: &Tensor<R>, target: &[usize]) -> Tensor<R> {
    if g.shape() == target {
        return g.clone();
    }
    let tlen: usize = target.iter().product();
    if is_suffix(target, g.shape()) && tlen > 0 {
        let mut out = vec![R::ZERO; tlen];
        for chunk in g.data().chunks(tlen) {
            for (o, &v) in out.iter_mut().zip(chunk.iter()) {
                *o += v;
            }
        }
        return Tensor::from_parts(target.to_vec(), out);
    }
    let mut out = vec![R::ZERO; tlen];
    let strides = broadcast_strides(target, g.shape());
    let mut idx = vec![0usize; g.rank()];
    for &v in g.data() {
        let ti: usize = idx.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
        out[ti] += v;
        next_index(&mut idx, g.shape());
    }
    Tensor::from_parts(target.to_vec(), out)
}

pub(crate) fn broadcast_data<R: Real>(t: &Tensor<R>, shape: &[usize]) -> Result<Tensor<R>> {
    let bshape = broadcast_shape(t.shape(), shape)?;
    if bshape != shape {
        return Err(PsbError::ShapeMismatch {
            op: "broadcast_to",
            detail: format!("{:?} -> {:?}", t.shape(), shape),
        });
    }
    broadcast_zip("broadcast_to", &Tensor::zeros(shape), t, |_, y| y)
}

pub(crate) fn permute_data<R: Real>(t: &Tensor<R>, axes: &[usize]) -> Tensor<R> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; in_shape.len()];
    for d in (0..in_shape.len().saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let moved: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    if n > 0 {
        let mut idx = vec![0usize; out_shape.len()];
        loop {
            let off: usize = idx.iter().zip(&moved).map(|(&i, &s)| i * s).sum();
            data.push(t.data()[off]);
            if !next_index(&mut idx, &out_shape) {
                break;
            }
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn permute_mask(m: &Mask, axes: &[usize]) -> Mask {
    let in_shape = m.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; in_shape.len()];
    for d in (0..in_shape.len().saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let moved: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(m.data().len());
    let mut idx = vec![0usize; out_shape.len()];
    loop {
        let off: usize = idx.iter().zip(&moved).map(|(&i, &s)| i * s).sum();
        data.push(m.data()[off]);
        if !next_index(&mut idx, &out_shape) {
            break;
        }
    }
    Mask::new(out_shape, data)
}

pub(crate) fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn narrow_data<R: Real>(t: &Tensor<R>, axis: usize, start: usize, len: usize) -> Tensor<R> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Tensor::from_parts(out_shape, data)
}

fn scatter_narrow<R: Real>(full: &mut [R], shape: &[usize], axis: usize, start: usize, g: &Tensor<R>) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full_ax = shape[axis];
    let len = g.shape()[axis];
    for o in 0..outer {
        let dst = o * full_ax * inner + start * inner;
        let src = o * len * inner;
        full[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
}

fn sum_axis_data<R: Real>(t: &Tensor<R>, axis: usize, keepdim: bool) -> Tensor<R> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax = shape[axis];
    let mut data = vec![R::ZERO; outer * inner];
    for o in 0..outer {
        for a in 0..ax {
            let base = (o * ax + a) * inner;
            let orow = &mut data[o * inner..(o + 1) * inner];
            for (ov, &v) in orow.iter_mut().zip(&t.data()[base..base + inner]) {
                *ov += v;
            }
        }
    }
    let mut out_shape: Vec<usize> = shape.to_vec();
    if keepdim {
        out_shape[axis] = 1;
    } else {
        out_shape.remove(axis);
    }
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn transpose_last2<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    let rank = t.rank();
    assert!(rank >= 2);
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 1, rank - 2);
    permute_data(t, &axes)
}

/// Raw batched matmul used by the tape op and its backward pass.
pub(crate) fn matmul_data<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(PsbError::ShapeMismatch {
            op: "matmul",
            detail: format!("ranks {} and {}", a.rank(), b.rank()),
        });
    }
    let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if ka != kb {
        return Err(PsbError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let a_batch = &a.shape()[..a.rank() - 2];
    let b_batch = &b.shape()[..b.rank() - 2];
    let batch_shape = broadcast_shape(a_batch, b_batch)?;
    let batch: usize = batch_shape.iter().product();
    let a_strides = batch_strides(a_batch, &batch_shape, m * ka);
    let b_strides = batch_strides(b_batch, &batch_shape, kb * n);
    let mut out_shape = batch_shape.clone();
    out_shape.push(m);
    out_shape.push(n);

    // Resolve each flat batch index to operand offsets once.
    let mut a_offs = vec![0usize; batch];
    let mut b_offs = vec![0usize; batch];
    if batch > 0 {
        let mut idx = vec![0usize; batch_shape.len()];
        for bi in 0..batch {
            a_offs[bi] = idx.iter().zip(&a_strides).map(|(&i, &s)| i * s).sum();
            b_offs[bi] = idx.iter().zip(&b_strides).map(|(&i, &s)| i * s).sum();
            next_index(&mut idx, &batch_shape);
        }
    }

    let mut out = vec![R::ZERO; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    par_rows(&mut out, n, ka * n, |row, orow| {
        let bi = row / m;
        let mi = row % m;
        let arow = &ad[a_offs[bi] + mi * ka..a_offs[bi] + (mi + 1) * ka];
        let bbase = b_offs[bi];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &bd[bbase + k * n..bbase + (k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

fn batch_strides(shape: &[usize], batch_shape: &[usize], mat_len: usize) -> Vec<usize> {
    let mut strides = vec![0usize; batch_shape.len()];
    let offset = batch_shape.len() - shape.len();
    let mut acc = mat_len;
    for d in (0..shape.len()).rev() {
        if shape[d] != 1 {
            strides[offset + d] = acc;
        }
        acc *= shape[d];
    }
    strides
}
