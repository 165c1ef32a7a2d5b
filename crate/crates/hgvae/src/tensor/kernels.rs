//! Dense matmul kernels and broadcasting index helpers.
//!
//! Every kernel writes each output element from exactly one task with a
//! fixed-order inner loop, so results are bit-identical regardless of the
//! rayon thread count.

use super::Real;
use rayon::prelude::*;

/// Below this many output elements the rayon dispatch overhead is not
/// worth paying.
const PAR_THRESHOLD: usize = 16 * 1024;

/// out[m,n] = a[m,k] @ b[k,n]
pub fn mm(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [Real]| {
        orow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[k,n] = aᵀ @ b  with a[m,k], b[m,n]
pub fn mm_tn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |p: usize, orow: &mut [Real]| {
        orow.fill(0.0);
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(p, orow)| row(p, orow));
    } else {
        for (p, orow) in out.chunks_mut(n).enumerate() {
            row(p, orow);
        }
    }
}

/// out[m,p] = a @ bᵀ  with a[m,n], b[p,n]
pub fn mm_nt(a: &[Real], b: &[Real], m: usize, n: usize, p: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    let row = |i: usize, orow: &mut [Real]| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o = s;
        }
    };
    if m * p >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(p).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(p).enumerate() {
            row(i, orow);
        }
    }
}

/// [b,k,n] -> [k,b,n]: stacks the batch blocks of each node row side by
/// side so a shared left matrix can multiply the whole batch in one call.
pub fn permute_bkn_to_kbn(x: &[Real], b: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(x.len(), b * k * n);
    debug_assert_eq!(out.len(), b * k * n);
    for bi in 0..b {
        for ki in 0..k {
            let src = &x[(bi * k + ki) * n..(bi * k + ki + 1) * n];
            let dst = &mut out[(ki * b + bi) * n..(ki * b + bi + 1) * n];
            dst.copy_from_slice(src);
        }
    }
}

/// Inverse of [`permute_bkn_to_kbn`].
pub fn permute_kbn_to_bkn(x: &[Real], k: usize, b: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(x.len(), b * k * n);
    debug_assert_eq!(out.len(), b * k * n);
    for ki in 0..k {
        for bi in 0..b {
            let src = &x[(ki * b + bi) * n..(ki * b + bi + 1) * n];
            let dst = &mut out[(bi * k + ki) * n..(bi * k + ki + 1) * n];
            dst.copy_from_slice(src);
        }
    }
}

/// Right-aligned (numpy-style) broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides, with 0 stride on broadcast (size-1) axes once the
/// shape is left-padded to `rank`.
pub fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Apply `f` elementwise over the broadcast of `a` and `b` into `out`
/// (whose length is the product of `out_shape`).
pub fn zip_broadcast(
    a: &[Real],
    a_shape: &[usize],
    b: &[Real],
    b_shape: &[usize],
    out_shape: &[usize],
    out: &mut [Real],
    f: impl Fn(Real, Real) -> Real,
) {
    if a_shape == b_shape {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
        return;
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in out.iter_mut() {
        *o = f(a[ia], b[ib]);
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

/// Sum `scale * grad` (shaped `grad_shape`) down to `target_shape`,
/// adding into `out`. Used to push gradients back through broadcasts.
pub fn reduce_into_shape(
    grad: &[Real],
    grad_shape: &[usize],
    target_shape: &[usize],
    scale: Real,
    out: &mut [Real],
) {
    if grad_shape == target_shape {
        for (o, &g) in out.iter_mut().zip(grad) {
            *o += scale * g;
        }
        return;
    }
    let rank = grad_shape.len();
    let st = broadcast_strides(target_shape, rank);
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad.iter() {
        out[it] += scale * g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            it += st[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            it -= st[d] * grad_shape[d];
        }
    }
}
