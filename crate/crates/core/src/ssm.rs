//! Selective state-space scan kernel.
//!
//! Per channel c and state s the recurrence is
//!
//!   h_t = a_bar_t * h_{t-1} + b_bar_t * x_t,      y_t = sum_s c_t[s] h_t[c,s] + d[c] x_t[c]
//!
//! with input-dependent discretization
//!
//!   delta_t[c] = softplus(w_delta[c] x_t[c] + delta_bias[c])
//!   a_bar_t[c,s] = exp(delta_t[c] a[c,s]),        a = -exp(a_log)   (strictly negative)
//!   b_bar_t[c,s] = delta_t[c] b_t[s],             b_t = x_t . w_b,  c_t = x_t . w_c
//!
//! `selective_scan_seq` is the plain-loop reference; `selective_scan_parallel`
//! computes the same recurrence through the associative combine
//! (a2, b2) ∘ (a1, b1) = (a2 a1, a2 b1 + b2) over fixed-size chunks with a
//! carried prefix state. With chunk = 1 the two paths are bit-identical.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::tape::{Tape, Var};
use crate::tensor::{matmul_acc, softplus, Scalar, Tensor};
use crate::{Error, Result};

/// One scan stream: values laid out [L, C].
pub type ScanSequence<F> = Tensor<F>;

/// Parameters of one scan direction.
///
/// The state decay `a_log` is a fixed buffer (A = -exp(a_log) stays strictly
/// negative); the projections and skip term are trainable.
#[derive(Clone, Debug)]
pub struct SsmParams<F: Scalar> {
    /// [C, S]; A = -exp(a_log).
    pub a_log: Tensor<F>,
    /// [C]; per-channel scalar step projection.
    pub w_delta: Tensor<F>,
    /// [C]; step bias, softplus(delta_bias) is the input-free step size.
    pub delta_bias: Tensor<F>,
    /// [C, S]; input-dependent B projection.
    pub w_b: Tensor<F>,
    /// [C, S]; input-dependent C projection.
    pub w_c: Tensor<F>,
    /// [C]; direct skip term.
    pub d_skip: Tensor<F>,
}

impl<F: Scalar> SsmParams<F> {
    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_log.rank() != 2 {
            return Err(Error::Shape(format!(
                "a_log must be [C, S], got {:?}",
                self.a_log.shape()
            )));
        }
        let c = self.channels();
        let s = self.state_size();
        if s == 0 {
            return Err(Error::Shape("state size must be >= 1".into()));
        }
        for (name, t, shape) in [
            ("w_delta", &self.w_delta, vec![c]),
            ("delta_bias", &self.delta_bias, vec![c]),
            ("w_b", &self.w_b, vec![c, s]),
            ("w_c", &self.w_c, vec![c, s]),
            ("d_skip", &self.d_skip, vec![c]),
        ] {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name} must be {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// State matrix A = -exp(a_log), elementwise.
    pub fn a(&self) -> Tensor<F> {
        self.a_log.map(|v| -v.exp())
    }
}

// Test-only fault hook: flips the sign of the additive term in the parallel
// combine so the oracle-equivalence check has a detectable mutation.
static SCAN_COMBINE_FAULT: AtomicBool = AtomicBool::new(false);

pub fn inject_scan_combine_fault(enable: bool) {
    SCAN_COMBINE_FAULT.store(enable, Ordering::SeqCst);
}

/// Input-dependent discretization:
/// a_bar[t,c,s] = exp(delta[t,c] a[c,s]), b_bar[t,c,s] = delta[t,c] b_t[t,s].
pub fn discretize<F: Scalar>(
    delta: &Tensor<F>,
    a: &Tensor<F>,
    b_t: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if delta.rank() != 2 || a.rank() != 2 || b_t.rank() != 2 {
        return Err(Error::Shape(format!(
            "discretize expects delta [L,C], a [C,S], b_t [L,S]; got {:?} {:?} {:?}",
            delta.shape(),
            a.shape(),
            b_t.shape()
        )));
    }
    let (l, c) = (delta.shape()[0], delta.shape()[1]);
    let s = a.shape()[1];
    if a.shape()[0] != c || b_t.shape() != [l, s] {
        return Err(Error::Shape(format!(
            "discretize shape mismatch: delta {:?}, a {:?}, b_t {:?}",
            delta.shape(),
            a.shape(),
            b_t.shape()
        )));
    }
    if let Some(&bad) = delta.data().iter().find(|&&d| d <= F::zero()) {
        return Err(Error::Domain(format!(
            "discretize requires delta > 0, got {bad}"
        )));
    }
    let mut a_bar = vec![F::zero(); l * c * s];
    let mut b_bar = vec![F::zero(); l * c * s];
    for t in 0..l {
        for ci in 0..c {
            let d = delta.at2(t, ci);
            for si in 0..s {
                let i = (t * c + ci) * s + si;
                a_bar[i] = (d * a.at2(ci, si)).exp();
                b_bar[i] = d * b_t.at2(t, si);
            }
        }
    }
    Ok((
        Tensor::new(vec![l, c, s], a_bar)?,
        Tensor::new(vec![l, c, s], b_bar)?,
    ))
}

/// Precomputed input-dependent coefficients for a batch of sequences.
struct Coeffs<F> {
    /// [B, L, C]
    delta: Vec<F>,
    /// [B, L, S]
    b: Vec<F>,
    /// [B, L, S]
    c: Vec<F>,
}

fn check_scan_input<F: Scalar>(
    x: &Tensor<F>,
    p: &SsmParams<F>,
) -> Result<(usize, usize, usize, usize)> {
    p.validate()?;
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "scan input must be [B, L, C], got {:?}",
            x.shape()
        )));
    }
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c != p.channels() {
        return Err(Error::Shape(format!(
            "scan input channels {} do not match params C={}",
            c,
            p.channels()
        )));
    }
    if l == 0 {
        return Err(Error::Shape("scan sequence length must be >= 1".into()));
    }
    Ok((b, l, c, p.state_size()))
}

fn compute_coeffs<F: Scalar>(x: &Tensor<F>, p: &SsmParams<F>) -> Coeffs<F> {
    let (bn, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = p.state_size();
    let xd = x.data();
    let wd = p.w_delta.data();
    let bias = p.delta_bias.data();
    let mut delta = vec![F::zero(); bn * l * c];
    for (row, drow) in xd.chunks_exact(c).zip(delta.chunks_exact_mut(c)) {
        for ci in 0..c {
            drow[ci] = softplus(wd[ci] * row[ci] + bias[ci]);
        }
    }
    let mut b = vec![F::zero(); bn * l * s];
    matmul_acc(xd, p.w_b.data(), &mut b, bn * l, c, s);
    let mut cc = vec![F::zero(); bn * l * s];
    matmul_acc(xd, p.w_c.data(), &mut cc, bn * l, c, s);
    Coeffs { delta, b, c: cc }
}

/// Core recurrence over a coefficient batch. Shared by the sequential
/// reference path and by tests that hold delta/B/C fixed.
///
/// x [B,L,C], a [C,S], delta [B,L,C], b/c [B,L,S], d [C].
/// Returns y [B,L,C] and, when requested, all states h [B,L,C,S].
pub(crate) fn scan_seq_core<F: Scalar>(
    x: &[F],
    a: &[F],
    delta: &[F],
    b: &[F],
    cc: &[F],
    d: &[F],
    dims: (usize, usize, usize, usize),
    want_states: bool,
) -> (Vec<F>, Option<Vec<F>>) {
    let (bn, l, c, s) = dims;
    let mut y = vec![F::zero(); bn * l * c];
    let mut states = if want_states {
        Some(vec![F::zero(); bn * l * c * s])
    } else {
        None
    };
    let mut h = vec![F::zero(); c * s];
    for bi in 0..bn {
        h.iter_mut().for_each(|v| *v = F::zero());
        for t in 0..l {
            let row = bi * l + t;
            let xt = &x[row * c..(row + 1) * c];
            let dt = &delta[row * c..(row + 1) * c];
            let bt = &b[row * s..(row + 1) * s];
            let ct = &cc[row * s..(row + 1) * s];
            let yt = &mut y[row * c..(row + 1) * c];
            for ci in 0..c {
                let xv = xt[ci];
                let dv = dt[ci];
                let hrow = &mut h[ci * s..(ci + 1) * s];
                let arow = &a[ci * s..(ci + 1) * s];
                let mut acc = F::zero();
                for si in 0..s {
                    let a_bar = (dv * arow[si]).exp();
                    let b_bar = dv * bt[si];
                    hrow[si] = a_bar * hrow[si] + b_bar * xv;
                    acc = acc + ct[si] * hrow[si];
                }
                yt[ci] = acc + d[ci] * xv;
            }
            if let Some(st) = states.as_mut() {
                st[row * c * s..(row + 1) * c * s].copy_from_slice(&h);
            }
        }
    }
    (y, states)
}

/// Chunked associative-combine path. Mathematically identical to
/// `scan_seq_core`; with chunk = 1 it is bit-identical.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_parallel_core<F: Scalar>(
    x: &[F],
    a: &[F],
    delta: &[F],
    b: &[F],
    cc: &[F],
    d: &[F],
    dims: (usize, usize, usize, usize),
    chunk: usize,
    want_states: bool,
    want_abar: bool,
) -> (Vec<F>, Option<Vec<F>>, Option<Vec<F>>) {
    let (bn, l, c, s) = dims;
    let cs = c * s;
    let fault = SCAN_COMBINE_FAULT.load(Ordering::Relaxed);
    let n_chunks = l.div_ceil(chunk);

    let mut y = vec![F::zero(); bn * l * c];
    let mut states = want_states.then(|| vec![F::zero(); bn * l * cs]);
    let mut abar_keep = want_abar.then(|| vec![F::zero(); bn * l * cs]);
    // Per-sequence scratch, reused across the batch.
    let mut abar = vec![F::zero(); l * cs];
    let mut agg_a = vec![F::zero(); n_chunks * cs];
    let mut agg_b = vec![F::zero(); n_chunks * cs];
    let mut carry = vec![F::zero(); (n_chunks + 1) * cs];

    for bi in 0..bn {
        let xb = &x[bi * l * c..(bi + 1) * l * c];
        let db = &delta[bi * l * c..(bi + 1) * l * c];
        let bb = &b[bi * l * s..(bi + 1) * l * s];
        let cb = &cc[bi * l * s..(bi + 1) * l * s];

        // Discretize once per sequence.
        for t in 0..l {
            for ci in 0..c {
                let dv = db[t * c + ci];
                let arow = &a[ci * s..(ci + 1) * s];
                let out = &mut abar[(t * c + ci) * s..(t * c + ci + 1) * s];
                for si in 0..s {
                    out[si] = (dv * arow[si]).exp();
                }
            }
        }

        // Per-chunk aggregates via the associative combine, oldest first:
        // (A, B) <- (a_t A, a_t B + b_bar_t x_t).
        for g in 0..n_chunks {
            let t0 = g * chunk;
            let t1 = (t0 + chunk).min(l);
            let ga = &mut agg_a[g * cs..(g + 1) * cs];
            let gb = &mut agg_b[g * cs..(g + 1) * cs];
            ga.iter_mut().for_each(|v| *v = F::one());
            gb.iter_mut().for_each(|v| *v = F::zero());
            for t in t0..t1 {
                for ci in 0..c {
                    let xv = xb[t * c + ci];
                    let dv = db[t * c + ci];
                    let ab = &abar[(t * c + ci) * s..(t * c + ci + 1) * s];
                    let bt = &bb[t * s..(t + 1) * s];
                    let gar = &mut ga[ci * s..(ci + 1) * s];
                    let gbr = &mut gb[ci * s..(ci + 1) * s];
                    for si in 0..s {
                        let badd = (dv * bt[si]) * xv;
                        gar[si] = ab[si] * gar[si];
                        gbr[si] = if fault {
                            ab[si] * gbr[si] - badd
                        } else {
                            ab[si] * gbr[si] + badd
                        };
                    }
                }
            }
        }

        // Exclusive carry scan across chunks.
        carry[..cs].iter_mut().for_each(|v| *v = F::zero());
        for g in 0..n_chunks {
            for i in 0..cs {
                carry[(g + 1) * cs + i] =
                    agg_a[g * cs + i] * carry[g * cs + i] + agg_b[g * cs + i];
            }
        }

        // Recompute states within each chunk from its carry-in and read out.
        let mut h = vec![F::zero(); cs];
        for g in 0..n_chunks {
            let t0 = g * chunk;
            let t1 = (t0 + chunk).min(l);
            h.copy_from_slice(&carry[g * cs..(g + 1) * cs]);
            for t in t0..t1 {
                let yt = &mut y[(bi * l + t) * c..(bi * l + t + 1) * c];
                let bt = &bb[t * s..(t + 1) * s];
                let ct = &cb[t * s..(t + 1) * s];
                for ci in 0..c {
                    let xv = xb[t * c + ci];
                    let dv = db[t * c + ci];
                    let ab = &abar[(t * c + ci) * s..(t * c + ci + 1) * s];
                    let hrow = &mut h[ci * s..(ci + 1) * s];
                    let mut acc = F::zero();
                    for si in 0..s {
                        let b_bar = dv * bt[si];
                        hrow[si] = ab[si] * hrow[si] + b_bar * xv;
                        acc = acc + ct[si] * hrow[si];
                    }
                    yt[ci] = acc + d[ci] * xv;
                }
                if let Some(st) = states.as_mut() {
                    st[(bi * l + t) * cs..(bi * l + t + 1) * cs].copy_from_slice(&h);
                }
            }
        }
        if let Some(keep) = abar_keep.as_mut() {
            keep[bi * l * cs..(bi + 1) * l * cs].copy_from_slice(&abar);
        }
    }
    (y, states, abar_keep)
}

/// Sequential reference scan over a batch of sequences [B, L, C].
pub fn selective_scan_seq_batch<F: Scalar>(x: &Tensor<F>, p: &SsmParams<F>) -> Result<Tensor<F>> {
    let dims = check_scan_input(x, p)?;
    let coeffs = compute_coeffs(x, p);
    let a = p.a();
    let (y, _) = scan_seq_core(
        x.data(),
        a.data(),
        &coeffs.delta,
        &coeffs.b,
        &coeffs.c,
        p.d_skip.data(),
        dims,
        false,
    );
    Tensor::new(x.shape().to_vec(), y)
}

/// Sequential reference scan over one sequence [L, C].
pub fn selective_scan_seq<F: Scalar>(x: &Tensor<F>, p: &SsmParams<F>) -> Result<Tensor<F>> {
    let batched = as_batch(x)?;
    let y = selective_scan_seq_batch(&batched, p)?;
    y.reshape(x.shape())
}

/// Chunked parallel scan over a batch [B, L, C].
pub fn selective_scan_parallel_batch<F: Scalar>(
    x: &Tensor<F>,
    p: &SsmParams<F>,
    chunk: usize,
) -> Result<Tensor<F>> {
    if chunk == 0 {
        return Err(Error::Domain("chunk size must be >= 1".into()));
    }
    let dims = check_scan_input(x, p)?;
    let coeffs = compute_coeffs(x, p);
    let a = p.a();
    let (y, _, _) = scan_parallel_core(
        x.data(),
        a.data(),
        &coeffs.delta,
        &coeffs.b,
        &coeffs.c,
        p.d_skip.data(),
        dims,
        chunk,
        false,
        false,
    );
    Tensor::new(x.shape().to_vec(), y)
}

/// Chunked parallel scan over one sequence [L, C].
pub fn selective_scan_parallel<F: Scalar>(
    x: &Tensor<F>,
    p: &SsmParams<F>,
    chunk: usize,
) -> Result<Tensor<F>> {
    let batched = as_batch(x)?;
    let y = selective_scan_parallel_batch(&batched, p, chunk)?;
    y.reshape(x.shape())
}

/// Forward scan plus re-reversed backward scan, summed elementwise. The
/// backward stream is reversed again before the sum so positions align.
pub fn bidirectional_scan<F: Scalar>(
    x: &Tensor<F>,
    p_fwd: &SsmParams<F>,
    p_bwd: &SsmParams<F>,
) -> Result<Tensor<F>> {
    if p_fwd.channels() != p_bwd.channels() || p_fwd.state_size() != p_bwd.state_size() {
        return Err(Error::Shape(format!(
            "direction params disagree: fwd C={} S={}, bwd C={} S={}",
            p_fwd.channels(),
            p_fwd.state_size(),
            p_bwd.channels(),
            p_bwd.state_size()
        )));
    }
    let axis = x.rank() - 2;
    let fwd = selective_scan_seq(x, p_fwd)?;
    let rev_in = crate::nn::reverse_axis(x, axis)?;
    let bwd = selective_scan_seq(&rev_in, p_bwd)?;
    let bwd = crate::nn::reverse_axis(&bwd, axis)?;
    fwd.add(&bwd)
}

fn as_batch<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "expected a [L, C] sequence, got {:?}",
            x.shape()
        )));
    }
    x.reshape(&[1, x.shape()[0], x.shape()[1]])
}

pub const DEFAULT_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Recorded scan
// ---------------------------------------------------------------------------

/// Tape bindings for one scan direction's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d_skip: Var,
}

impl<F: Scalar> Tape<F> {
    /// Selective scan over [B, L, C]. Gradients flow to the input and every
    /// parameter; a_log's gradient is produced too and simply ignored for
    /// non-trainable bindings.
    pub fn selective_scan(&mut self, x: Var, ssm: &SsmVars, chunk: usize) -> Result<Var> {
        let p = SsmParams {
            a_log: self.value(ssm.a_log).clone(),
            w_delta: self.value(ssm.w_delta).clone(),
            delta_bias: self.value(ssm.delta_bias).clone(),
            w_b: self.value(ssm.w_b).clone(),
            w_c: self.value(ssm.w_c).clone(),
            d_skip: self.value(ssm.d_skip).clone(),
        };
        let xv = self.value(x).clone();
        let dims = check_scan_input(&xv, &p)?;
        if chunk == 0 {
            return Err(Error::Domain("chunk size must be >= 1".into()));
        }
        let coeffs = compute_coeffs(&xv, &p);
        let a = p.a();
        let recording = self.recording();
        let (y, states, abar) = scan_parallel_core(
            xv.data(),
            a.data(),
            &coeffs.delta,
            &coeffs.b,
            &coeffs.c,
            p.d_skip.data(),
            dims,
            chunk,
            recording,
            recording,
        );
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        let parents = [
            x,
            ssm.a_log,
            ssm.w_delta,
            ssm.delta_bias,
            ssm.w_b,
            ssm.w_c,
            ssm.d_skip,
        ];
        Ok(self.push_op(y, &parents, move || {
            let states = states.expect("states saved while recording");
            let abar = abar.expect("a_bar saved while recording");
            Box::new(move |g: &Tensor<F>| {
                scan_backward(g, &xv, &p, &a, &coeffs, &states, &abar, dims)
            })
        }))
    }

    /// Recorded bidirectional scan: fwd(x) + reverse(bwd(reverse(x))),
    /// composed from recorded primitives.
    pub fn bidirectional_scan(
        &mut self,
        x: Var,
        fwd: &SsmVars,
        bwd: &SsmVars,
        chunk: usize,
    ) -> Result<Var> {
        let y_f = self.selective_scan(x, fwd, chunk)?;
        let axis = self.value(x).rank() - 2;
        let x_r = self.reverse_axis(x, axis)?;
        let y_b = self.selective_scan(x_r, bwd, chunk)?;
        let y_b = self.reverse_axis(y_b, axis)?;
        self.add(y_f, y_b)
    }
}

/// Reverse pass of the selective scan. Returns gradients in parent order:
/// [x, a_log, w_delta, delta_bias, w_b, w_c, d_skip].
#[allow(clippy::too_many_arguments)]
fn scan_backward<F: Scalar>(
    g: &Tensor<F>,
    x: &Tensor<F>,
    p: &SsmParams<F>,
    a: &Tensor<F>,
    coeffs: &Coeffs<F>,
    states: &[F],
    abar: &[F],
    dims: (usize, usize, usize, usize),
) -> Vec<Tensor<F>> {
    let (bn, l, c, s) = dims;
    let cs = c * s;
    let gd = g.data();
    let xd = x.data();
    let ad = a.data();
    let dd = p.d_skip.data();
    let wdel = p.w_delta.data();
    let wb = p.w_b.data();
    let wc = p.w_c.data();

    let mut dx = vec![F::zero(); bn * l * c];
    let mut ddelta = vec![F::zero(); bn * l * c];
    let mut db = vec![F::zero(); bn * l * s];
    let mut dc = vec![F::zero(); bn * l * s];
    let mut da = vec![F::zero(); cs];
    let mut dd_skip = vec![F::zero(); c];
    let mut gh = vec![F::zero(); cs];

    for bi in 0..bn {
        gh.iter_mut().for_each(|v| *v = F::zero());
        for t in (0..l).rev() {
            let row = bi * l + t;
            let gy = &gd[row * c..(row + 1) * c];
            let xt = &xd[row * c..(row + 1) * c];
            let dt = &coeffs.delta[row * c..(row + 1) * c];
            let bt = &coeffs.b[row * s..(row + 1) * s];
            let ct = &coeffs.c[row * s..(row + 1) * s];
            let ht = &states[row * cs..(row + 1) * cs];
            let at = &abar[row * cs..(row + 1) * cs];
            let h_prev_row = (t > 0).then(|| &states[(row - 1) * cs..row * cs]);
            let abar_next = (t + 1 < l).then(|| &abar[(row + 1) * cs..(row + 2) * cs]);
            let dc_t = &mut dc[row * s..(row + 1) * s];
            let db_t = &mut db[row * s..(row + 1) * s];
            for ci in 0..c {
                let gyv = gy[ci];
                let xv = xt[ci];
                let dv = dt[ci];
                let mut dx_acc = gyv * dd[ci];
                dd_skip[ci] = dd_skip[ci] + gyv * xv;
                let mut ddelta_acc = F::zero();
                for si in 0..s {
                    let i = ci * s + si;
                    // State gradient: readout plus carry from t+1.
                    let mut ghv = gyv * ct[si];
                    if let Some(an) = abar_next {
                        ghv = ghv + an[i] * gh[i];
                    }
                    dc_t[si] = dc_t[si] + gyv * ht[i];
                    // h_t = a_bar h_{t-1} + (delta b) x
                    let h_prev = h_prev_row.map_or(F::zero(), |hp| hp[i]);
                    let da_bar = ghv * h_prev;
                    da[i] = da[i] + da_bar * at[i] * dv;
                    ddelta_acc = ddelta_acc + da_bar * at[i] * ad[i] + ghv * bt[si] * xv;
                    db_t[si] = db_t[si] + ghv * dv * xv;
                    dx_acc = dx_acc + ghv * dv * bt[si];
                    gh[i] = ghv;
                }
                dx[row * c + ci] = dx_acc;
                ddelta[row * c + ci] = ddelta_acc;
            }
        }
    }

    // Through the projections.
    let mut dw_delta = vec![F::zero(); c];
    let mut dbias = vec![F::zero(); c];
    for row in 0..bn * l {
        for ci in 0..c {
            let i = row * c + ci;
            // sigmoid of the pre-softplus value, recovered from delta itself.
            let sig = F::one() - (-coeffs.delta[i]).exp();
            let dz = ddelta[i] * sig;
            dw_delta[ci] = dw_delta[ci] + dz * xd[i];
            dbias[ci] = dbias[ci] + dz;
            dx[i] = dx[i] + dz * wdel[ci];
        }
    }
    let mut dw_b = vec![F::zero(); cs];
    let mut dw_c = vec![F::zero(); cs];
    crate::tensor::matmul_at_acc(xd, &db, &mut dw_b, bn * l, c, s);
    crate::tensor::matmul_at_acc(xd, &dc, &mut dw_c, bn * l, c, s);
    crate::tensor::matmul_bt_acc(&db, wb, &mut dx, bn * l, s, c);
    crate::tensor::matmul_bt_acc(&dc, wc, &mut dx, bn * l, s, c);

    // a = -exp(a_log) so da_log = da * a.
    let mut da_log = vec![F::zero(); cs];
    for i in 0..cs {
        da_log[i] = da[i] * ad[i];
    }

    vec![
        Tensor::new(x.shape().to_vec(), dx).expect("dx"),
        Tensor::new(vec![c, s], da_log).expect("da_log"),
        Tensor::new(vec![c], dw_delta).expect("dw_delta"),
        Tensor::new(vec![c], dbias).expect("dbias"),
        Tensor::new(vec![c, s], dw_b).expect("dw_b"),
        Tensor::new(vec![c, s], dw_c).expect("dw_c"),
        Tensor::new(vec![c], dd_skip).expect("dd_skip"),
    ]
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rand_params(rng: &mut ChaCha8Rng, c: usize, s: usize) -> SsmParams<f64> {
        SsmParams {
            a_log: Tensor::from_fn(&[c, s], |_| rng.gen_range(-1.0..0.5)),
            w_delta: Tensor::from_fn(&[c], |_| rng.gen_range(-0.5..0.5)),
            delta_bias: Tensor::from_fn(&[c], |_| rng.gen_range(-1.0..1.0)),
            w_b: Tensor::from_fn(&[c, s], |_| rng.gen_range(-0.7..0.7)),
            w_c: Tensor::from_fn(&[c, s], |_| rng.gen_range(-0.7..0.7)),
            d_skip: Tensor::from_fn(&[c], |_| rng.gen_range(-1.0..1.0)),
        }
    }

    pub fn rand_seq(rng: &mut ChaCha8Rng, l: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[l, c], |_| rng.gen_range(-1.5..1.5))
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::{rand_params, rand_seq};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// delta -> 0+ freezes the state: a_bar -> 1, b_bar -> 0.
    #[test]
    fn discretize_frozen_state_limit() {
        let (l, c, s) = (3, 2, 2);
        let delta = Tensor::full(&[l, c], 1e-12f64);
        let a = Tensor::full(&[c, s], -1.0);
        let b_t = Tensor::full(&[l, s], 0.8);
        let (a_bar, b_bar) = discretize(&delta, &a, &b_t).unwrap();
        for &v in a_bar.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
        for &v in b_bar.data() {
            assert!(v.abs() < 1e-10);
        }
    }

    /// a = -1, delta = ln 2 gives a_bar = exp(-ln 2) = 0.5.
    #[test]
    fn discretize_half_life() {
        let delta = Tensor::full(&[1, 1], std::f64::consts::LN_2);
        let a = Tensor::full(&[1, 1], -1.0);
        let b_t = Tensor::full(&[1, 1], 1.0);
        let (a_bar, b_bar) = discretize(&delta, &a, &b_t).unwrap();
        assert!((a_bar.item() - 0.5).abs() < 1e-15);
        assert!((b_bar.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn discretize_matches_scalar_loop_and_rejects_nonpositive_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, c, s) = (4, 3, 2);
        let delta: Tensor<f64> = Tensor::from_fn(&[l, c], |_| rng.gen_range(0.01..2.0));
        let a: Tensor<f64> = Tensor::from_fn(&[c, s], |_| rng.gen_range(-2.0..-0.1));
        let b_t: Tensor<f64> = Tensor::from_fn(&[l, s], |_| rng.gen_range(-1.0..1.0));
        let (a_bar, b_bar) = discretize(&delta, &a, &b_t).unwrap();
        for t in 0..l {
            for ci in 0..c {
                for si in 0..s {
                    let i = (t * c + ci) * s + si;
                    assert_eq!(a_bar.data()[i], (delta.at2(t, ci) * a.at2(ci, si)).exp());
                    assert_eq!(b_bar.data()[i], delta.at2(t, ci) * b_t.at2(t, si));
                }
            }
        }
        let bad = Tensor::full(&[l, c], 0.0f64);
        assert!(matches!(discretize(&bad, &a, &b_t), Err(Error::Domain(_))));
    }

    /// Unit one-step setup: A=-1, fixed delta=ln 2, B=C=1, D=0.
    fn unit_params() -> SsmParams<f64> {
        SsmParams {
            a_log: Tensor::full(&[1, 1], 0.0),   // A = -1
            w_delta: Tensor::full(&[1], 0.0),    // delta independent of x
            delta_bias: Tensor::full(&[1], 0.0), // softplus(0) = ln 2
            w_b: Tensor::full(&[1, 1], 1.0),     // B_t = x_t = 1
            w_c: Tensor::full(&[1, 1], 1.0),
            d_skip: Tensor::full(&[1], 0.0),
        }
    }

    #[test]
    fn seq_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_params(&mut rng, 3, 4);
        let x = Tensor::zeros(&[6, 3]);
        let y = selective_scan_seq(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seq_one_step_hand_recurrence() {
        let p = unit_params();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let y = selective_scan_seq(&x, &p).unwrap();
        // h1 = b_bar * x1 = ln 2; y1 = C h1 = ln 2 ~ 0.6931.
        assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn seq_two_step_hand_recurrence() {
        let p = unit_params();
        let x = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let y = selective_scan_seq(&x, &p).unwrap();
        let ln2 = std::f64::consts::LN_2;
        // h2 = 0.5 h1 + ln 2; y2 = 1.5 ln 2 ~ 1.0397.
        assert!((y.data()[0] - ln2).abs() < 1e-12);
        assert!((y.data()[1] - 1.5 * ln2).abs() < 1e-12);
        assert!((y.data()[1] - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn parallel_chunk1_is_bit_identical_to_seq() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let l = rng.gen_range(1..40);
            let c = rng.gen_range(1..6);
            let s = rng.gen_range(1..5);
            let p = rand_params(&mut rng, c, s);
            let x = rand_seq(&mut rng, l, c);
            let seq = selective_scan_seq(&x, &p).unwrap();
            let par = selective_scan_parallel(&x, &p, 1).unwrap();
            assert_eq!(seq.data(), par.data(), "L={l} C={c} S={s}");
        }
    }

    #[test]
    fn parallel_single_chunk_matches_seq() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = rand_params(&mut rng, 4, 3);
        let x = rand_seq(&mut rng, 33, 4);
        let seq = selective_scan_seq(&x, &p).unwrap();
        let par = selective_scan_parallel(&x, &p, 33).unwrap();
        for (a, b) in seq.data().iter().zip(par.data().iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn parallel_matches_seq_across_chunk_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let l = rng.gen_range(2..70);
            let c = rng.gen_range(1..6);
            let s = rng.gen_range(1..5);
            let p = rand_params(&mut rng, c, s);
            let x = rand_seq(&mut rng, l, c);
            let seq = selective_scan_seq(&x, &p).unwrap();
            for chunk in [1usize, 2, 7, l] {
                let par = selective_scan_parallel(&x, &p, chunk).unwrap();
                for (a, b) in seq.data().iter().zip(par.data().iter()) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                    assert!(rel < 1e-5, "chunk {chunk}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn injected_combine_fault_breaks_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = rand_params(&mut rng, 3, 2);
        let x = rand_seq(&mut rng, 16, 3);
        let seq = selective_scan_seq(&x, &p).unwrap();
        inject_scan_combine_fault(true);
        let par = selective_scan_parallel(&x, &p, 4).unwrap();
        inject_scan_combine_fault(false);
        let max_diff = seq
            .data()
            .iter()
            .zip(par.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-3, "fault should be visible, diff {max_diff}");
        let par2 = selective_scan_parallel(&x, &p, 4).unwrap();
        let max_diff2 = seq
            .data()
            .iter()
            .zip(par2.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff2 < 1e-9);
    }

    /// Perturbing x_t leaves y_1..y_{t-1} bit-identical.
    #[test]
    fn seq_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let l = rng.gen_range(4..30);
            let c = rng.gen_range(1..5);
            let p = rand_params(&mut rng, c, 3);
            let x = rand_seq(&mut rng, l, c);
            let y = selective_scan_seq(&x, &p).unwrap();
            let t = rng.gen_range(1..l);
            let mut xp = x.to_vec();
            xp[t * c + rng.gen_range(0..c)] += 0.731;
            let xp = Tensor::new(vec![l, c], xp).unwrap();
            let yp = selective_scan_seq(&xp, &p).unwrap();
            assert_eq!(&y.data()[..t * c], &yp.data()[..t * c]);
        }
    }

    #[test]
    fn bidirectional_dead_backward_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p_fwd = rand_params(&mut rng, 3, 2);
        let mut p_bwd = rand_params(&mut rng, 3, 2);
        p_bwd.d_skip = Tensor::zeros(&[3]);
        p_bwd.w_c = Tensor::zeros(&[3, 2]);
        let x = rand_seq(&mut rng, 9, 3);
        let bi = bidirectional_scan(&x, &p_fwd, &p_bwd).unwrap();
        let fwd = selective_scan_seq(&x, &p_fwd).unwrap();
        assert_eq!(bi.data(), fwd.data());
    }

    #[test]
    fn bidirectional_palindrome_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = rand_params(&mut rng, 2, 3);
        let half = rand_seq(&mut rng, 4, 2);
        let x = Tensor::from_fn(&[7, 2], |i| {
            let (t, c) = (i / 2, i % 2);
            let tt = if t < 4 { t } else { 6 - t };
            half.at2(tt, c)
        });
        let y = bidirectional_scan(&x, &p, &p).unwrap();
        for t in 0..7 {
            for c in 0..2 {
                let diff = (y.at2(t, c) - y.at2(6 - t, c)).abs();
                assert!(diff < 1e-12, "t={t} c={c} diff={diff}");
            }
        }
    }

    #[test]
    fn bidirectional_equals_componentwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p_fwd = rand_params(&mut rng, 3, 2);
        let p_bwd = rand_params(&mut rng, 3, 2);
        let x = rand_seq(&mut rng, 11, 3);
        let y = bidirectional_scan(&x, &p_fwd, &p_bwd).unwrap();
        let fwd = selective_scan_seq(&x, &p_fwd).unwrap();
        let xr = crate::nn::reverse_axis(&x, 0).unwrap();
        let bwd = crate::nn::reverse_axis(&selective_scan_seq(&xr, &p_bwd).unwrap(), 0).unwrap();
        let expect = fwd.add(&bwd).unwrap();
        assert_eq!(y.data(), expect.data());
    }

    /// With A < 0 and bounded x, |h_t| <= max|b_bar x| / (1 - max a_bar);
    /// no overflow on a long stress sequence.
    #[test]
    fn decay_stability_bound_on_long_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (l, c, s) = (10_000, 2, 3);
        let p = rand_params(&mut rng, c, s);
        let x = rand_seq(&mut rng, l, c);
        let xb = x.reshape(&[1, l, c]).unwrap();
        check_scan_input(&xb, &p).unwrap();
        let coeffs = compute_coeffs(&xb, &p);
        let a = p.a();
        let (y, states) = scan_seq_core(
            xb.data(),
            a.data(),
            &coeffs.delta,
            &coeffs.b,
            &coeffs.c,
            p.d_skip.data(),
            (1, l, c, s),
            true,
        );
        assert!(y.iter().all(|v| v.is_finite()));
        let states = states.unwrap();
        let mut max_abar = 0.0f64;
        let mut max_bx = 0.0f64;
        for t in 0..l {
            for ci in 0..c {
                let dv = coeffs.delta[t * c + ci];
                let xv = xb.data()[t * c + ci];
                for si in 0..s {
                    max_abar = max_abar.max((dv * a.at2(ci, si)).exp());
                    max_bx = max_bx.max((dv * coeffs.b[t * s + si] * xv).abs());
                }
            }
        }
        assert!(max_abar < 1.0);
        let bound = max_bx / (1.0 - max_abar) + 1e-9;
        for &h in &states {
            assert!(h.abs() <= bound, "|h|={} > bound={}", h.abs(), bound);
        }
    }

    /// y is linear in x when delta, B, C are held fixed.
    #[test]
    fn linearity_with_fixed_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (l, c, s) = (12, 3, 2);
        let a = Tensor::from_fn(&[c, s], |_| rng.gen_range(-2.0..-0.2));
        let delta: Vec<f64> = (0..l * c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let b: Vec<f64> = (0..l * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cc: Vec<f64> = (0..l * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x1 = rand_seq(&mut rng, l, c);
        let x2 = rand_seq(&mut rng, l, c);
        let run = |x: &Tensor<f64>| {
            scan_seq_core(x.data(), a.data(), &delta, &b, &cc, &d, (1, l, c, s), false).0
        };
        let y1 = run(&x1);
        let y2 = run(&x2);
        let ysum = run(&x1.add(&x2).unwrap());
        for i in 0..l * c {
            assert!((ysum[i] - (y1[i] + y2[i])).abs() < 1e-10);
        }
        let ys = run(&x1.scale(-2.5));
        for i in 0..l * c {
            assert!((ys[i] - (-2.5) * y1[i]).abs() < 1e-10);
        }
    }

    /// time(2L)/time(L) stays near 2 for the parallel path.
    #[test]
    fn parallel_throughput_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = 8;
        let s = 4;
        let p = rand_params(&mut rng, c, s);
        let mut time_for = |l: usize, rng: &mut ChaCha8Rng| {
            let x = rand_seq(rng, l, c);
            let mut best = f64::INFINITY;
            for _ in 0..5 {
                let t0 = std::time::Instant::now();
                let y = selective_scan_parallel(&x, &p, DEFAULT_CHUNK).unwrap();
                let dt = t0.elapsed().as_secs_f64();
                assert!(y.data()[0].is_finite());
                best = best.min(dt);
            }
            best
        };
        let t1 = time_for(4096, &mut rng);
        let t2 = time_for(8192, &mut rng);
        let ratio = t2 / t1;
        assert!((1.6..=2.4).contains(&ratio), "time(2L)/time(L) = {ratio:.2}");
    }

    /// Scan gradient vs central differences, through the recorded op.
    #[test]
    fn scan_gradient_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        use crate::tape::ParamSet;

        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (bn, l, c, s) = (2, rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..4));
            let p = rand_params(&mut rng, c, s);
            let x = Tensor::from_fn(&[bn, l, c], |_| rng.gen_range(-1.0..1.0));
            let mut ps = ParamSet::new();
            let xid = ps.insert("x", x, true).unwrap();
            let a_log = ps.insert("a_log", p.a_log.clone(), true).unwrap();
            let w_delta = ps.insert("w_delta", p.w_delta.clone(), true).unwrap();
            let delta_bias = ps.insert("delta_bias", p.delta_bias.clone(), true).unwrap();
            let w_b = ps.insert("w_b", p.w_b.clone(), true).unwrap();
            let w_c = ps.insert("w_c", p.w_c.clone(), true).unwrap();
            let d_skip = ps.insert("d_skip", p.d_skip.clone(), true).unwrap();
            let chunk = [1, 3, l][seed as usize % 3].max(1);
            let report = grad_check(&mut ps, 1e-5, 1e-6, |tape, bound| {
                let ssm = SsmVars {
                    a_log: bound.var(a_log),
                    w_delta: bound.var(w_delta),
                    delta_bias: bound.var(delta_bias),
                    w_b: bound.var(w_b),
                    w_c: bound.var(w_c),
                    d_skip: bound.var(d_skip),
                };
                let y = tape.selective_scan(bound.var(xid), &ssm, chunk)?;
                // Square so the gradient exercises the readout path too.
                let y2 = tape.mul(y, y)?;
                Ok(crate::nn::sum_all(tape, y2))
            })
            .unwrap();
            assert!(report.pass, "seed {seed}: {report}");
        }
    }
}
