//! Dense-layer compute kernels.
//!
//! Everything the network needs reduces to three loops over contiguous
//! rows: dot products (forward matmul), axpy accumulation (backward
//! matmuls), and elementwise fused activation.  The kernels are written as
//! straight-line lane-parallel loops so the compiler can keep them in
//! vector registers; all matrices are dense row-major `Vec<f64>` slices
//! with explicit (rows, cols) bookkeeping at the call sites.

/// Dot product with eight independent accumulator lanes.
///
/// The lanes break the sequential-add dependency chain so the loop can be
/// vectorized and pipelined; the final reduction order is fixed, so results
/// are deterministic for fixed inputs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        let (xa, xb) = (&a[i..i + 8], &b[i..i + 8]);
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])))
        + tail
}

/// y += alpha * x.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[b, o] = Σ_i x[b, i] · w[o, i]  —  the forward pass X·Wᵀ.
///
/// `x` is batch×cols, `w` is rows×cols (each output neuron's weights form a
/// contiguous row), `out` is batch×rows.
pub fn matmul_xwt(out: &mut [f64], x: &[f64], w: &[f64], batch: usize, cols: usize, rows: usize) {
    debug_assert_eq!(x.len(), batch * cols);
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(out.len(), batch * rows);
    for b in 0..batch {
        let xr = &x[b * cols..(b + 1) * cols];
        let or = &mut out[b * rows..(b + 1) * rows];
        for (o, out_val) in or.iter_mut().enumerate() {
            *out_val = dot(xr, &w[o * cols..(o + 1) * cols]);
        }
    }
}

/// gw[o, i] += Σ_b d[b, o] · h[b, i]  —  weight-gradient accumulation DᵀH.
pub fn matmul_dth(gw: &mut [f64], d: &[f64], h: &[f64], batch: usize, rows: usize, cols: usize) {
    debug_assert_eq!(d.len(), batch * rows);
    debug_assert_eq!(h.len(), batch * cols);
    debug_assert_eq!(gw.len(), rows * cols);
    for b in 0..batch {
        let hr = &h[b * cols..(b + 1) * cols];
        let dr = &d[b * rows..(b + 1) * rows];
        for (o, &dv) in dr.iter().enumerate() {
            if dv != 0.0 {
                axpy(dv, hr, &mut gw[o * cols..(o + 1) * cols]);
            }
        }
    }
}

/// out[b, i] = Σ_o d[b, o] · w[o, i]  —  the backward pass D·W.
pub fn matmul_dw(out: &mut [f64], d: &[f64], w: &[f64], batch: usize, rows: usize, cols: usize) {
    debug_assert_eq!(d.len(), batch * rows);
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(out.len(), batch * cols);
    for b in 0..batch {
        let or = &mut out[b * cols..(b + 1) * cols];
        or.fill(0.0);
        let dr = &d[b * rows..(b + 1) * rows];
        for (o, &dv) in dr.iter().enumerate() {
            if dv != 0.0 {
                axpy(dv, &w[o * cols..(o + 1) * cols], or);
            }
        }
    }
}
