//! Dense tensor operations: projections, normalization, activations,
//! pointwise convolution, axis permutations, pooling and the classification
//! loss. Each operation exists twice: a plain tensor kernel (the reference
//! surface oracle tests exercise) and a recorded variant on [`Tape`] with a
//! hand-derived backward pass.
//!
//! Projections carry no bias term; offsets come from layer-norm beta.

use crate::tape::{Tape, Var};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Scalar, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

/// out[..., j] = sum_i x[..., i] w[i, j]. No bias.
pub fn linear_map<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    if w.rank() != 2 {
        return Err(Error::Shape(format!(
            "linear_map weight must be rank 2, got {:?}",
            w.shape()
        )));
    }
    let c_in = w.shape()[0];
    let c_out = w.shape()[1];
    if x.rank() == 0 || *x.shape().last().unwrap() != c_in {
        return Err(Error::Shape(format!(
            "linear_map: input shape {:?} does not end in weight rows {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let m = x.len() / c_in;
    let mut out = vec![F::zero(); m * c_out];
    matmul_acc(x.data(), w.data(), &mut out, m, c_in, c_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c_out;
    Tensor::new(shape, out)
}

/// Per trailing-axis vector v: (v - mean) / sqrt(pop_var + eps) * gamma + beta.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    let (y, _, _) = layer_norm_full(x, gamma, beta, eps)?;
    Ok(y)
}

/// Layer norm returning (output, normalized input, inverse std) for reuse in
/// the backward pass.
fn layer_norm_full<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, Tensor<F>, Vec<F>)> {
    if eps <= 0.0 {
        return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "layer_norm: gamma {:?} / beta {:?} must both be [{}] for input {:?}",
            gamma.shape(),
            beta.shape(),
            c,
            x.shape()
        )));
    }
    let eps = F::from_f64(eps);
    let rows = x.len() / c;
    let inv_c = F::one() / F::from_f64(c as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); rows];
    let g = gamma.data();
    let b = beta.data();
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mut mean = F::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_c;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for i in 0..c {
            let h = (row[i] - mean) * istd;
            xhat[r * c + i] = h;
            y[r * c + i] = h * g[i] + b[i];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
    ))
}

/// Elementwise max(0, x).
pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

/// Width-1 convolution over the channel axis of a [V, T, Cin] tensor;
/// identical to `linear_map` applied at every (v, t) position.
pub fn pointwise_conv1d<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "pointwise_conv1d expects [V, T, C] input, got {:?}",
            x.shape()
        )));
    }
    linear_map(x, k)
}

/// Reverse one axis; index i maps to extent-1-i.
pub fn reverse_axis<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "reverse_axis: axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let shape = x.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); x.len()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..extent {
            let s = (o * extent + i) * inner;
            let d = (o * extent + (extent - 1 - i)) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// out[v,t,c] = sum_u a[v,u] x[u,t,c] — mixes joints through a [V, V] matrix.
pub fn joint_matmul<F: Scalar>(a: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Shape(format!(
            "joint matrix must be square, got {:?}",
            a.shape()
        )));
    }
    let v = a.shape()[0];
    if x.rank() != 3 || x.shape()[0] != v {
        return Err(Error::Shape(format!(
            "joint_matmul: input {:?} does not match matrix {:?}",
            x.shape(),
            a.shape()
        )));
    }
    let inner = x.len() / v;
    let mut out = vec![F::zero(); x.len()];
    matmul_acc(a.data(), x.data(), &mut out, v, v, inner);
    Tensor::new(x.shape().to_vec(), out)
}

/// Depthwise temporal convolution: out[v,t,c] = sum_k kern[c,k] x[v,t+k-P,c],
/// zero-padded, P = width/2 (width odd).
pub fn depthwise_conv_time<F: Scalar>(x: &Tensor<F>, kern: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "depthwise_conv_time expects [V, T, C], got {:?}",
            x.shape()
        )));
    }
    let (v, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if kern.rank() != 2 || kern.shape()[0] != c || kern.shape()[1] % 2 == 0 {
        return Err(Error::Shape(format!(
            "depthwise kernel must be [C={c}, odd width], got {:?}",
            kern.shape()
        )));
    }
    let w = kern.shape()[1];
    let pad = w / 2;
    let mut out = vec![F::zero(); x.len()];
    let xd = x.data();
    let kd = kern.data();
    for vi in 0..v {
        for ti in 0..t {
            let dst = (vi * t + ti) * c;
            for k in 0..w {
                let src_t = ti + k;
                if src_t < pad || src_t - pad >= t {
                    continue;
                }
                let src = (vi * t + (src_t - pad)) * c;
                for ci in 0..c {
                    out[dst + ci] = out[dst + ci] + kd[ci * w + k] * xd[src + ci];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Swap the first two axes of a rank-3 tensor.
pub fn transpose_01<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "transpose_01 expects rank 3, got {:?}",
            x.shape()
        )));
    }
    let (a, b, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![F::zero(); x.len()];
    let src = x.data();
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * c;
            let d = (j * a + i) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(vec![b, a, c], out)
}

// ---------------------------------------------------------------------------
// Recorded variants
// ---------------------------------------------------------------------------

impl<F: Scalar> Tape<F> {
    pub fn linear_map(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let y = linear_map(&xv, &wv)?;
        Ok(self.push_op(y, &[x, w], move || {
            Box::new(move |g: &Tensor<F>| {
                let c_in = wv.shape()[0];
                let c_out = wv.shape()[1];
                let m = xv.len() / c_in;
                let mut dx = vec![F::zero(); xv.len()];
                matmul_bt_acc(g.data(), wv.data(), &mut dx, m, c_out, c_in);
                let mut dw = vec![F::zero(); wv.len()];
                matmul_at_acc(xv.data(), g.data(), &mut dw, m, c_in, c_out);
                vec![
                    Tensor::new(xv.shape().to_vec(), dx).expect("dx shape"),
                    Tensor::new(wv.shape().to_vec(), dw).expect("dw shape"),
                ]
            })
        }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (y, xhat, inv_std) = layer_norm_full(&xv, &gv, &bv, eps)?;
        Ok(self.push_op(y, &[x, gamma, beta], move || {
            Box::new(move |g: &Tensor<F>| {
                let c = *xv.shape().last().unwrap();
                let rows = xv.len() / c;
                let inv_c = F::one() / F::from_f64(c as f64);
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let gd = g.data();
                let gam = gv.data();
                let xh = xhat.data();
                for r in 0..rows {
                    let base = r * c;
                    let istd = inv_std[r];
                    // dgamma/dbeta accumulate across rows.
                    let mut mean_gg = F::zero();
                    let mut mean_ggx = F::zero();
                    for i in 0..c {
                        let gi = gd[base + i];
                        let hi = xh[base + i];
                        dgamma[i] = dgamma[i] + gi * hi;
                        dbeta[i] = dbeta[i] + gi;
                        let gg = gi * gam[i];
                        mean_gg = mean_gg + gg;
                        mean_ggx = mean_ggx + gg * hi;
                    }
                    mean_gg = mean_gg * inv_c;
                    mean_ggx = mean_ggx * inv_c;
                    for i in 0..c {
                        let gg = gd[base + i] * gam[i];
                        dx[base + i] = (gg - mean_gg - xh[base + i] * mean_ggx) * istd;
                    }
                }
                vec![
                    Tensor::new(xv.shape().to_vec(), dx).expect("dx shape"),
                    Tensor::new(vec![c], dgamma).expect("dgamma shape"),
                    Tensor::new(vec![c], dbeta).expect("dbeta shape"),
                ]
            })
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let y = relu(&xv);
        self.push_op(y, &[x], move || {
            Box::new(move |g: &Tensor<F>| {
                let dx = g
                    .zip_map(&xv, |gi, xi| if xi > F::zero() { gi } else { F::zero() })
                    .expect("relu grad shape");
                vec![dx]
            })
        })
    }

    pub fn pointwise_conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        if self.value(x).rank() != 3 {
            return Err(Error::Shape(format!(
                "pointwise_conv1d expects [V, T, C] input, got {:?}",
                self.value(x).shape()
            )));
        }
        self.linear_map(x, k)
    }

    pub fn reverse_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = reverse_axis(self.value(x), axis)?;
        Ok(self.push_op(y, &[x], move || {
            Box::new(move |g: &Tensor<F>| vec![reverse_axis(g, axis).expect("reverse grad")])
        }))
    }

    pub fn joint_matmul(&mut self, a: Var, x: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let xv = self.value(x).clone();
        let y = joint_matmul(&av, &xv)?;
        Ok(self.push_op(y, &[a, x], move || {
            Box::new(move |g: &Tensor<F>| {
                let v = av.shape()[0];
                let inner = xv.len() / v;
                let mut da = vec![F::zero(); v * v];
                matmul_bt_acc(g.data(), xv.data(), &mut da, v, inner, v);
                let mut dx = vec![F::zero(); xv.len()];
                matmul_at_acc(av.data(), g.data(), &mut dx, v, v, inner);
                vec![
                    Tensor::new(vec![v, v], da).expect("da shape"),
                    Tensor::new(xv.shape().to_vec(), dx).expect("dx shape"),
                ]
            })
        }))
    }

    pub fn depthwise_conv_time(&mut self, x: Var, kern: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let kv = self.value(kern).clone();
        let y = depthwise_conv_time(&xv, &kv)?;
        Ok(self.push_op(y, &[x, kern], move || {
            Box::new(move |g: &Tensor<F>| {
                let (v, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let w = kv.shape()[1];
                let pad = w / 2;
                let mut dx = vec![F::zero(); xv.len()];
                let mut dk = vec![F::zero(); kv.len()];
                let gd = g.data();
                let xd = xv.data();
                let kd = kv.data();
                for vi in 0..v {
                    for ti in 0..t {
                        let out_base = (vi * t + ti) * c;
                        for k in 0..w {
                            let src_t = ti + k;
                            if src_t < pad || src_t - pad >= t {
                                continue;
                            }
                            let in_base = (vi * t + (src_t - pad)) * c;
                            for ci in 0..c {
                                let gi = gd[out_base + ci];
                                dk[ci * w + k] = dk[ci * w + k] + gi * xd[in_base + ci];
                                dx[in_base + ci] = dx[in_base + ci] + gi * kd[ci * w + k];
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(xv.shape().to_vec(), dx).expect("dx shape"),
                    Tensor::new(kv.shape().to_vec(), dk).expect("dk shape"),
                ]
            })
        }))
    }

    pub fn transpose_01(&mut self, x: Var) -> Result<Var> {
        let y = transpose_01(self.value(x))?;
        Ok(self.push_op(y, &[x], move || {
            Box::new(move |g: &Tensor<F>| vec![transpose_01(g).expect("transpose grad")])
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let orig = self.value(x).shape().to_vec();
        Ok(self.push_op(y, &[x], move || {
            Box::new(move |g: &Tensor<F>| vec![g.reshape(&orig).expect("reshape grad")])
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push_op(y, &[a, b], move || {
            Box::new(move |g: &Tensor<F>| vec![g.clone(), g.clone()])
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let y = av.mul(&bv)?;
        Ok(self.push_op(y, &[a, b], move || {
            Box::new(move |g: &Tensor<F>| {
                vec![
                    g.mul(&bv).expect("mul grad a"),
                    g.mul(&av).expect("mul grad b"),
                ]
            })
        }))
    }

    /// alpha is a single-element tensor; out = alpha * x.
    pub fn scalar_mul(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let av = self.value(alpha).clone();
        if av.len() != 1 {
            return Err(Error::Shape(format!(
                "scalar_mul: alpha must be a scalar, got {:?}",
                av.shape()
            )));
        }
        let xv = self.value(x).clone();
        let y = xv.scale(av.item());
        Ok(self.push_op(y, &[alpha, x], move || {
            Box::new(move |g: &Tensor<F>| {
                let mut da = F::zero();
                for (&gi, &xi) in g.data().iter().zip(xv.data().iter()) {
                    da = da + gi * xi;
                }
                vec![Tensor::scalar(da), g.scale(av.item())]
            })
        }))
    }

    /// Extract joints (in the given order) from [V, T, C] into frame-major
    /// scan layout [T, L, C].
    pub fn gather_joints(&mut self, x: Var, joints: &[usize]) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 3 {
            return Err(Error::Shape(format!(
                "gather_joints expects [V, T, C], got {:?}",
                xv.shape()
            )));
        }
        let (v, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if let Some(&bad) = joints.iter().find(|&&j| j >= v) {
            return Err(Error::Shape(format!(
                "gather_joints: joint {bad} out of range for V={v}"
            )));
        }
        let l = joints.len();
        let mut out = vec![F::zero(); t * l * c];
        let src = xv.data();
        for ti in 0..t {
            for (i, &j) in joints.iter().enumerate() {
                let s = (j * t + ti) * c;
                let d = (ti * l + i) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let y = Tensor::new(vec![t, l, c], out)?;
        let joints = joints.to_vec();
        Ok(self.push_op(y, &[x], move || {
            Box::new(move |g: &Tensor<F>| {
                let mut dx = vec![F::zero(); v * t * c];
                let gd = g.data();
                for ti in 0..t {
                    for (i, &j) in joints.iter().enumerate() {
                        let d = (j * t + ti) * c;
                        let s = (ti * joints.len() + i) * c;
                        for k in 0..c {
                            dx[d + k] = dx[d + k] + gd[s + k];
                        }
                    }
                }
                vec![Tensor::new(vec![v, t, c], dx).expect("gather grad")]
            })
        }))
    }

    /// Write frame-major [T, L, C] values back to their joints' rows of a
    /// zero [V, T, C] tensor.
    pub fn scatter_joints(&mut self, y: Var, joints: &[usize], v: usize) -> Result<Var> {
        let yv = self.value(y).clone();
        if yv.rank() != 3 || yv.shape()[1] != joints.len() {
            return Err(Error::Shape(format!(
                "scatter_joints expects [T, {}, C], got {:?}",
                joints.len(),
                yv.shape()
            )));
        }
        let (t, l, c) = (yv.shape()[0], yv.shape()[1], yv.shape()[2]);
        let mut out = vec![F::zero(); v * t * c];
        let src = yv.data();
        for ti in 0..t {
            for (i, &j) in joints.iter().enumerate() {
                let s = (ti * l + i) * c;
                let d = (j * t + ti) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let out = Tensor::new(vec![v, t, c], out)?;
        let joints = joints.to_vec();
        Ok(self.push_op(out, &[y], move || {
            Box::new(move |g: &Tensor<F>| {
                let gd = g.data();
                let mut dy = vec![F::zero(); t * l * c];
                for ti in 0..t {
                    for (i, &j) in joints.iter().enumerate() {
                        let s = (j * t + ti) * c;
                        let d = (ti * l + i) * c;
                        dy[d..d + c].copy_from_slice(&gd[s..s + c]);
                    }
                }
                vec![Tensor::new(vec![t, l, c], dy).expect("scatter grad")]
            })
        }))
    }

    /// Reorder the middle axis of [T, V, C]: out[t, i, c] = x[t, order[i], c].
    pub fn reorder_axis1(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 3 || xv.shape()[1] != order.len() {
            return Err(Error::Shape(format!(
                "reorder_axis1: order length {} does not match axis 1 of {:?}",
                order.len(),
                xv.shape()
            )));
        }
        let (t, v, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![F::zero(); xv.len()];
        let src = xv.data();
        for ti in 0..t {
            for (i, &j) in order.iter().enumerate() {
                let s = (ti * v + j) * c;
                let d = (ti * v + i) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        let order = order.to_vec();
        Ok(self.push_op(y, &[x], move || {
            Box::new(move |g: &Tensor<F>| {
                let gd = g.data();
                let mut dx = vec![F::zero(); gd.len()];
                for ti in 0..t {
                    for (i, &j) in order.iter().enumerate() {
                        let s = (ti * v + i) * c;
                        let d = (ti * v + j) * c;
                        dx[d..d + c].copy_from_slice(&gd[s..s + c]);
                    }
                }
                vec![Tensor::new(g.shape().to_vec(), dx).expect("reorder grad")]
            })
        }))
    }

    /// Mean over the first two axes of [V, T, C] -> [C].
    pub fn mean_pool_vt(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 3 {
            return Err(Error::Shape(format!(
                "mean_pool_vt expects [V, T, C], got {:?}",
                xv.shape()
            )));
        }
        let (v, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let scale = F::one() / F::from_f64((v * t) as f64);
        let mut out = vec![F::zero(); c];
        for row in xv.data().chunks_exact(c) {
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = *o + x;
            }
        }
        for o in out.iter_mut() {
            *o = *o * scale;
        }
        let y = Tensor::new(vec![c], out)?;
        Ok(self.push_op(y, &[x], move || {
            Box::new(move |g: &Tensor<F>| {
                let gd = g.data();
                let dx = Tensor::from_fn(&[v, t, c], |i| gd[i % c] * scale);
                vec![dx]
            })
        }))
    }
}

/// Sum of all elements -> scalar. Mostly a loss head for tests.
pub fn sum_all<F: Scalar>(tape: &mut Tape<F>, x: Var) -> Var {
    let xv = tape.value(x).clone();
    let y = Tensor::scalar(xv.sum());
    tape.push_op(y, &[x], move || {
        Box::new(move |g: &Tensor<F>| {
            let gs = g.item();
            vec![Tensor::full(xv.shape(), gs)]
        })
    })
}

/// Convenience re-export so `tape.sum_all(x)` also works.
impl<F: Scalar> Tape<F> {
    pub fn sum_all(&mut self, x: Var) -> Var {
        sum_all(self, x)
    }

    /// Cross-entropy of a logits vector against a class index, computed from
    /// logits with max-subtraction for stability.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let zv = self.value(logits).clone();
        if zv.rank() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy expects a logits vector, got {:?}",
                zv.shape()
            )));
        }
        let k = zv.len();
        if label >= k {
            return Err(Error::Config(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let z = zv.data();
        let m = z.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for &v in z {
            sum = sum + (v - m).exp();
        }
        let lse = m + sum.ln();
        let loss = Tensor::scalar(lse - z[label]);
        Ok(self.push_op(loss, &[logits], move || {
            Box::new(move |g: &Tensor<F>| {
                let gs = g.item();
                let z = zv.data();
                let mut dz = vec![F::zero(); z.len()];
                for (i, &v) in z.iter().enumerate() {
                    dz[i] = gs * ((v - m).exp() / sum);
                }
                dz[label] = dz[label] - gs;
                vec![Tensor::new(vec![z.len()], dz).expect("ce grad")]
            })
        }))
    }
}
