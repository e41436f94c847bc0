//! Low-level compute kernels.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! a rayon implementation is compiled alongside and the `*_auto` dispatchers
//! pick between them by workload size. Parallel kernels only ever split work
//! over disjoint output regions and keep each inner reduction in a fixed
//! order, so sequential and parallel paths produce bitwise-identical results.
//! Setting `MIXER360_DETERMINISTIC=1` forces the sequential path at runtime.

use std::sync::OnceLock;

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when the sequential path is forced via environment variable.
pub fn force_sequential() -> bool {
    static FORCE: OnceLock<bool> = OnceLock::new();
    *FORCE.get_or_init(|| {
        std::env::var("MIXER360_DETERMINISTIC").is_ok_and(|v| v == "1")
    })
}

/// Work thresholds below which rayon dispatch overhead outweighs the win.
const PAR_MIN_FLOPS: usize = 1 << 23;
const PAR_MIN_ELEMS: usize = 1 << 21;

#[inline]
fn use_parallel(work: usize) -> bool {
    use_parallel_at(work, PAR_MIN_ELEMS)
}

#[inline]
fn use_parallel_at(work: usize, threshold: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        work >= threshold && !force_sequential()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = (work, threshold);
        false
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n], row-major, saxpy inner loop.
pub fn matmul_nn_seq<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_rows(a, b, &mut out, k, n, 0);
    out
}

/// C[m,n] = A[m,k] * B[k,n] + bias[n] per row, bias folded into the
/// accumulator initialization.
pub fn matmul_nn_bias<T: Scalar>(
    a: &[T],
    b: &[T],
    bias: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    if m > 1 && use_parallel_at(m * k * n, PAR_MIN_FLOPS) {
        #[cfg(feature = "parallel")]
        {
            let rows_per_chunk = (m / (rayon::current_num_threads() * 4)).max(1);
            out.par_chunks_mut(rows_per_chunk * n)
                .enumerate()
                .for_each(|(chunk, rows)| {
                    let i0 = chunk * rows_per_chunk;
                    matmul_rows(&a[i0 * k..], b, rows, k, n, 0);
                });
            return out;
        }
    }
    matmul_rows(a, b, &mut out, k, n, 0);
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nn_par<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let rows_per_chunk = (m / (rayon::current_num_threads() * 4)).max(1);
    out.par_chunks_mut(rows_per_chunk * n)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let i0 = chunk * rows_per_chunk;
            matmul_rows(&a[i0 * k..], b, rows, k, n, 0);
        });
    out
}

/// Multiply a row block: `out` holds `out.len()/n` rows starting at row 0 of `a`.
#[inline]
fn matmul_rows<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, _i0: usize) {
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    if m > 1 && use_parallel_at(m * k * n, PAR_MIN_FLOPS) {
        #[cfg(feature = "parallel")]
        return matmul_nn_par(a, b, m, k, n);
    }
    matmul_nn_seq(a, b, m, k, n)
}

/// Out-of-place transpose of an m x n row-major matrix.
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn map_unary_seq<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_unary_par<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    x.par_iter().map(|&v| f(v)).collect()
}

pub fn map_unary<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if use_parallel(x.len()) {
        #[cfg(feature = "parallel")]
        return map_unary_par(x, f);
    }
    map_unary_seq(x, f)
}

/// Elementwise binary op on same-length slices.
pub fn zip_binary<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    if use_parallel(a.len()) {
        #[cfg(feature = "parallel")]
        return a
            .par_iter()
            .zip(b.par_iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
    }
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Strides of a shape in elements, row-major.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for (d, &ext) in shape.iter().enumerate().rev() {
        s[d] = acc;
        acc *= ext;
    }
    s
}

/// Length of the trailing run over which a strided operand is constant
/// (stride 0 or extent 1 on every suffix axis).
fn constant_suffix_run(strides: &[usize], shape: &[usize]) -> (usize, usize) {
    let mut run = 1usize;
    let mut dims = 0usize;
    for d in (0..shape.len()).rev() {
        if strides[d] == 0 || shape[d] == 1 {
            run *= shape[d];
            dims += 1;
        } else {
            break;
        }
    }
    (run, dims)
}

/// Binary op where both operands are indexed through broadcast strides
/// (stride 0 on stretched axes) in the coordinate system of `out_shape`.
/// When one operand is full-shaped and the other is constant over a trailing
/// run (e.g. per-channel scalars against [B,C,H,W]), the inner loop runs flat.
pub fn zip_broadcast<T: Scalar>(
    a: &[T],
    a_strides: &[usize],
    b: &[T],
    b_strides: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T + Sync,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let full = strides_of(out_shape);
    // periodic operand: contiguous suffix, zero stride everywhere above it
    // (e.g. [rows, C] + [C]); zip each chunk against the flat period
    let periodic_run = |strides: &[usize]| -> Option<usize> {
        let mut split = rank;
        while split > 0 && strides[split - 1] == full[split - 1] {
            split -= 1;
        }
        if split == rank {
            return None;
        }
        if strides[..split].iter().any(|&s| s != 0) {
            return None;
        }
        Some(out_shape[split..].iter().product())
    };
    if a_strides == full.as_slice() {
        if let Some(period) = periodic_run(b_strides) {
            let b_flat = &b[..period];
            if use_parallel(numel) {
                #[cfg(feature = "parallel")]
                {
                    let mut out = vec![T::zero(); numel];
                    out.par_chunks_mut(period)
                        .zip(a.par_chunks(period))
                        .for_each(|(o, ac)| {
                            for ((ov, &av), &bv) in o.iter_mut().zip(ac).zip(b_flat) {
                                *ov = f(av, bv);
                            }
                        });
                    return out;
                }
            }
            let mut out = Vec::with_capacity(numel);
            for chunk in a.chunks_exact(period) {
                for (&av, &bv) in chunk.iter().zip(b_flat) {
                    out.push(f(av, bv));
                }
            }
            return out;
        }
        let (run, dims) = constant_suffix_run(b_strides, out_shape);
        if run > 1 {
            let outer_shape = &out_shape[..rank - dims];
            let outer_strides = &b_strides[..rank - dims];
            let outer_n = numel / run;
            let mut b_vals = Vec::with_capacity(outer_n);
            let mut idx = vec![0usize; outer_shape.len()];
            let mut bo = 0usize;
            for _ in 0..outer_n {
                b_vals.push(b[bo]);
                for d in (0..outer_shape.len()).rev() {
                    idx[d] += 1;
                    bo += outer_strides[d];
                    if idx[d] < outer_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                    bo -= outer_strides[d] * outer_shape[d];
                }
            }
            if use_parallel(numel) {
                #[cfg(feature = "parallel")]
                {
                    let mut out = vec![T::zero(); numel];
                    out.par_chunks_mut(run)
                        .zip(a.par_chunks(run))
                        .zip(b_vals.par_iter())
                        .for_each(|((o, ac), &bv)| {
                            for (ov, &av) in o.iter_mut().zip(ac) {
                                *ov = f(av, bv);
                            }
                        });
                    return out;
                }
            }
            let mut out = Vec::with_capacity(numel);
            for (chunk, &bv) in a.chunks_exact(run).zip(&b_vals) {
                for &av in chunk {
                    out.push(f(av, bv));
                }
            }
            return out;
        }
    } else if b_strides == full.as_slice() {
        if let Some(period) = periodic_run(a_strides) {
            let a_flat = &a[..period];
            let mut out = Vec::with_capacity(numel);
            for chunk in b.chunks_exact(period) {
                for (&bv, &av) in chunk.iter().zip(a_flat) {
                    out.push(f(av, bv));
                }
            }
            return out;
        }
        let (run, dims) = constant_suffix_run(a_strides, out_shape);
        if run > 1 {
            let mut out = Vec::with_capacity(numel);
            let outer_shape = &out_shape[..rank - dims];
            let outer_strides = &a_strides[..rank - dims];
            let mut idx = vec![0usize; outer_shape.len()];
            let mut ao = 0usize;
            for chunk in b.chunks_exact(run) {
                let av = a[ao];
                for &bv in chunk {
                    out.push(f(av, bv));
                }
                for d in (0..outer_shape.len()).rev() {
                    idx[d] += 1;
                    ao += outer_strides[d];
                    if idx[d] < outer_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                    ao -= outer_strides[d] * outer_shape[d];
                }
            }
            return out;
        }
    }
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut ao = 0usize;
    let mut bo = 0usize;
    for _ in 0..numel {
        out.push(f(a[ao], b[bo]));
        // increment multi-index with carry, updating both offsets
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += a_strides[d];
            bo += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= a_strides[d] * out_shape[d];
            bo -= b_strides[d] * out_shape[d];
        }
    }
    out
}

/// Replicate `src` (viewed with broadcast strides) into `out_shape`.
pub fn broadcast_to<T: Scalar>(src: &[T], src_strides: &[usize], out_shape: &[usize]) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let (run, dims) = constant_suffix_run(src_strides, out_shape);
    if run > 1 {
        let mut out = Vec::with_capacity(numel);
        let outer_shape = &out_shape[..rank - dims];
        let outer_strides = &src_strides[..rank - dims];
        let mut idx = vec![0usize; outer_shape.len()];
        let mut so = 0usize;
        for _ in 0..numel / run {
            let v = src[so];
            out.resize(out.len() + run, v);
            for d in (0..outer_shape.len()).rev() {
                idx[d] += 1;
                so += outer_strides[d];
                if idx[d] < outer_shape[d] {
                    break;
                }
                idx[d] = 0;
                so -= outer_strides[d] * outer_shape[d];
            }
        }
        return out;
    }
    zip_broadcast(src, src_strides, src, src_strides, out_shape, |x, _| x)
}

/// Sum `src` of shape `src_shape` down to `dst_shape` (broadcast-compatible,
/// same rank, each dst extent is either equal or 1). A trailing run of
/// reduced axes is accumulated flat.
pub fn sum_to_shape<T: Scalar>(src: &[T], src_shape: &[usize], dst_shape: &[usize]) -> Vec<T> {
    debug_assert_eq!(src_shape.len(), dst_shape.len());
    let dst_numel: usize = dst_shape.iter().product();
    let mut out = vec![T::zero(); dst_numel];
    let full = strides_of(dst_shape);
    let dst_strides: Vec<usize> = dst_shape
        .iter()
        .zip(src_shape.iter())
        .zip(full.iter())
        .map(|((&d, &s), &st)| if d == s { st } else { 0 })
        .collect();
    let rank = src_shape.len();
    // periodic destination: contiguous suffix kept, everything above summed
    {
        let full_src_like: Vec<usize> = full.clone();
        let mut split = rank;
        while split > 0
            && dst_strides[split - 1] == full_src_like[split - 1]
            && dst_shape[split - 1] == src_shape[split - 1]
        {
            split -= 1;
        }
        if split < rank && dst_strides[..split].iter().all(|&s| s == 0) {
            let period: usize = src_shape[split..].iter().product();
            if period == dst_numel && period > 1 {
                for chunk in src.chunks_exact(period) {
                    for (o, &v) in out.iter_mut().zip(chunk) {
                        *o = *o + v;
                    }
                }
                return out;
            }
        }
    }
    let (run, dims) = constant_suffix_run(&dst_strides, src_shape);
    if run > 1 {
        let outer_shape = &src_shape[..rank - dims];
        let outer_strides = &dst_strides[..rank - dims];
        let mut idx = vec![0usize; outer_shape.len()];
        let mut off = 0usize;
        for chunk in src.chunks_exact(run) {
            let mut acc = T::zero();
            for &v in chunk {
                acc = acc + v;
            }
            out[off] = out[off] + acc;
            for d in (0..outer_shape.len()).rev() {
                idx[d] += 1;
                off += outer_strides[d];
                if idx[d] < outer_shape[d] {
                    break;
                }
                idx[d] = 0;
                off -= outer_strides[d] * outer_shape[d];
            }
        }
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in src {
        out[off] = out[off] + v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += dst_strides[d];
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= dst_strides[d] * src_shape[d];
        }
    }
    out
}

pub fn sum_all<T: Scalar>(x: &[T]) -> T {
    // fixed-order reduction: do not parallelize
    let mut acc = T::zero();
    for &v in x {
        acc = acc + v;
    }
    acc
}

// ---------------------------------------------------------------------------
// gather / scatter over table rows
// ---------------------------------------------------------------------------

pub fn gather_rows<T: Scalar>(table: &[T], row_len: usize, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * row_len);
    for &r in indices {
        out.extend_from_slice(&table[r * row_len..(r + 1) * row_len]);
    }
    out
}

pub fn scatter_add_rows<T: Scalar>(
    src: &[T],
    row_len: usize,
    indices: &[usize],
    num_rows: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); num_rows * row_len];
    for (i, &r) in indices.iter().enumerate() {
        let dst = &mut out[r * row_len..(r + 1) * row_len];
        let s = &src[i * row_len..(i + 1) * row_len];
        for (d, &v) in dst.iter_mut().zip(s.iter()) {
            *d = *d + v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// element permutation (bijective index map)
// ---------------------------------------------------------------------------

/// out[i] = in[map[i]]
pub fn apply_index_map<T: Scalar>(x: &[T], map: &[u32]) -> Vec<T> {
    if use_parallel(map.len()) {
        #[cfg(feature = "parallel")]
        return map.par_iter().map(|&s| x[s as usize]).collect();
    }
    map.iter().map(|&s| x[s as usize]).collect()
}

// ---------------------------------------------------------------------------
// sparse linear map (CSR over outputs)
// ---------------------------------------------------------------------------

/// out[i] = sum_j w[j] * x[col[j]] over the CSR row of output i.
pub fn apply_csr<T: Scalar>(
    x: &[T],
    offsets: &[u32],
    cols: &[u32],
    weights: &[T],
    out_len: usize,
) -> Vec<T> {
    let run = |i: usize| {
        let lo = offsets[i] as usize;
        let hi = offsets[i + 1] as usize;
        let mut acc = T::zero();
        for j in lo..hi {
            acc = acc + weights[j] * x[cols[j] as usize];
        }
        acc
    };
    if use_parallel(cols.len() * 4) {
        #[cfg(feature = "parallel")]
        return (0..out_len).into_par_iter().map(run).collect();
    }
    (0..out_len).map(run).collect()
}

// ---------------------------------------------------------------------------
// depthwise convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorizontalPad {
    Circular,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerticalPad {
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddingMode {
    pub horizontal: HorizontalPad,
    pub vertical: VerticalPad,
}

impl PaddingMode {
    /// Circular left/right, replicate top/bottom: the generator's mode.
    pub fn seam_aware() -> Self {
        PaddingMode {
            horizontal: HorizontalPad::Circular,
            vertical: VerticalPad::Replicate,
        }
    }
}

/// Resolve a padded read position. Returns None when the zero rule applies.
#[inline(always)]
fn resolve(y: isize, x: isize, h: isize, w: isize, pad: PaddingMode) -> Option<(usize, usize)> {
    let ry = if y < 0 || y >= h {
        match pad.vertical {
            VerticalPad::Zero => return None,
            VerticalPad::Replicate => y.clamp(0, h - 1),
        }
    } else {
        y
    };
    let rx = if x < 0 || x >= w {
        match pad.horizontal {
            HorizontalPad::Zero => return None,
            HorizontalPad::Circular => x.rem_euclid(w),
        }
    } else {
        x
    };
    Some((ry as usize, rx as usize))
}

/// Per-channel 2D convolution keeping spatial size. x: [planes, h, w] where a
/// plane is one (batch, channel) pair; kernels: [channels, k, k] cycled over
/// planes; out same shape as x.
pub fn dwconv_forward<T: Scalar>(
    x: &[T],
    kernels: &[T],
    bias: Option<&[T]>,
    planes: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: PaddingMode,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    let run = |p: usize, o: &mut [T]| {
        let c = p % channels;
        let xp = &x[p * h * w..(p + 1) * h * w];
        let kc = &kernels[c * k * k..(c + 1) * k * k];
        conv_plane(xp, kc, o, h, w, k, pad);
        if let Some(bias) = bias {
            let bv = bias[c];
            for ov in o.iter_mut() {
                *ov = *ov + bv;
            }
        }
    };
    if use_parallel_at(planes * h * w * k * k, PAR_MIN_FLOPS) {
        #[cfg(feature = "parallel")]
        {
            out.par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(p, o)| run(p, o));
            return out;
        }
    }
    for (p, o) in out.chunks_mut(h * w).enumerate() {
        run(p, o);
    }
    out
}

#[inline]
fn conv_plane<T: Scalar>(x: &[T], kc: &[T], out: &mut [T], h: usize, w: usize, k: usize, pad: PaddingMode) {
    let r = (k / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    debug_assert!(k <= 15);
    let mut row_base = [None; 15];
    for y in 0..hi {
        // resolve the vertical rule once per (row, tap-row); None = zero row
        for dy in 0..k as isize {
            let yy = y + dy - r;
            row_base[dy as usize] = if yy < 0 || yy >= hi {
                match pad.vertical {
                    VerticalPad::Zero => None,
                    VerticalPad::Replicate => Some(yy.clamp(0, hi - 1) as usize * w),
                }
            } else {
                Some(yy as usize * w)
            };
        }
        // interior columns: every horizontal tap is in bounds
        if k == 3 {
            // fully unrolled 3x3 with per-row kernels; missing rows add zero
            let zero_row = [T::zero(); 3];
            let row_k = |dy: usize| -> ([T; 3], usize, bool) {
                match row_base[dy] {
                    Some(base) => ([kc[dy * 3], kc[dy * 3 + 1], kc[dy * 3 + 2]], base, true)
                    ,
                    None => (zero_row, 0, false),
                }
            };
            let (k0, b0, v0) = row_k(0);
            let (k1, b1, v1) = row_k(1);
            let (k2, b2, v2) = row_k(2);
            let out_row = y as usize * w;
            for xx in 1..w - 1 {
                let mut acc = T::zero();
                if v0 {
                    acc = acc + k0[0] * x[b0 + xx - 1] + k0[1] * x[b0 + xx] + k0[2] * x[b0 + xx + 1];
                }
                if v1 {
                    acc = acc + k1[0] * x[b1 + xx - 1] + k1[1] * x[b1 + xx] + k1[2] * x[b1 + xx + 1];
                }
                if v2 {
                    acc = acc + k2[0] * x[b2 + xx - 1] + k2[1] * x[b2 + xx] + k2[2] * x[b2 + xx + 1];
                }
                out[out_row + xx] = acc;
            }
        } else {
            for xx in r..wi - r {
                let mut acc = T::zero();
                for (dy, base) in row_base[..k].iter().enumerate() {
                    let Some(base) = base else { continue };
                    let row = &x[base + (xx - r) as usize..base + (xx + r) as usize + 1];
                    let kk = &kc[dy * k..(dy + 1) * k];
                    for (kv, xv) in kk.iter().zip(row) {
                        acc = acc + *kv * *xv;
                    }
                }
                out[(y * wi + xx) as usize] = acc;
            }
        }
        // edge columns via the full padding rule
        for xx in (0..r).chain(wi - r..wi) {
            let mut acc = T::zero();
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    if let Some((ry, rx)) = resolve(y + dy - r, xx + dx - r, hi, wi, pad) {
                        acc = acc + kc[(dy * k as isize + dx) as usize] * x[ry * w + rx];
                    }
                }
            }
            out[(y * wi + xx) as usize] = acc;
        }
    }
}

/// Adjoint of dwconv_forward w.r.t. the input (exact transpose of the padded
/// read pattern, including replicate clamping).
pub fn dwconv_adj_input<T: Scalar>(
    g: &[T],
    kernels: &[T],
    planes: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: PaddingMode,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    let run = |p: usize, o: &mut [T]| {
        let c = p % channels;
        let gp = &g[p * h * w..(p + 1) * h * w];
        let kc = &kernels[c * k * k..(c + 1) * k * k];
        let r = (k / 2) as isize;
        let (hi, wi) = (h as isize, w as isize);
        debug_assert!(k <= 15);
        let mut row_base = [None; 15];
        for y in 0..hi {
            for dy in 0..k as isize {
                let yy = y + dy - r;
                row_base[dy as usize] = if yy < 0 || yy >= hi {
                    match pad.vertical {
                        VerticalPad::Zero => None,
                        VerticalPad::Replicate => Some(yy.clamp(0, hi - 1) as usize * w),
                    }
                } else {
                    Some(yy as usize * w)
                };
            }
            for xx in r..wi - r {
                let gv = gp[(y * wi + xx) as usize];
                for (dy, base) in row_base[..k].iter().enumerate() {
                    let Some(base) = base else { continue };
                    let orow = &mut o[base + (xx - r) as usize..base + (xx + r) as usize + 1];
                    let kk = &kc[dy * k..(dy + 1) * k];
                    for (ov, kv) in orow.iter_mut().zip(kk) {
                        *ov = *ov + *kv * gv;
                    }
                }
            }
            for xx in (0..r).chain(wi - r..wi) {
                let gv = gp[(y * wi + xx) as usize];
                for dy in 0..k as isize {
                    for dx in 0..k as isize {
                        if let Some((ry, rx)) = resolve(y + dy - r, xx + dx - r, hi, wi, pad) {
                            let o_ref = &mut o[ry * w + rx];
                            *o_ref = *o_ref + kc[(dy * k as isize + dx) as usize] * gv;
                        }
                    }
                }
            }
        }
    };
    if use_parallel_at(planes * h * w * k * k, PAR_MIN_FLOPS) {
        #[cfg(feature = "parallel")]
        {
            out.par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(p, o)| run(p, o));
            return out;
        }
    }
    for (p, o) in out.chunks_mut(h * w).enumerate() {
        run(p, o);
    }
    out
}

/// Adjoint of dwconv_forward w.r.t. the kernels: dk[c,dy,dx] summed over all
/// planes of channel c in fixed plane order.
pub fn dwconv_adj_kernel<T: Scalar>(
    g: &[T],
    x: &[T],
    planes: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: PaddingMode,
) -> Vec<T> {
    let run = |c: usize| {
        let mut dk = vec![T::zero(); k * k];
        let r = (k / 2) as isize;
        let (hi, wi) = (h as isize, w as isize);
        debug_assert!(k <= 15);
        let mut row_base = [None; 15];
        let mut p = c;
        while p < planes {
            let gp = &g[p * h * w..(p + 1) * h * w];
            let xp = &x[p * h * w..(p + 1) * h * w];
            for y in 0..hi {
                for dy in 0..k as isize {
                    let yy = y + dy - r;
                    row_base[dy as usize] = if yy < 0 || yy >= hi {
                        match pad.vertical {
                            VerticalPad::Zero => None,
                            VerticalPad::Replicate => Some(yy.clamp(0, hi - 1) as usize * w),
                        }
                    } else {
                        Some(yy as usize * w)
                    };
                }
                for xx in r..wi - r {
                    let gv = gp[(y * wi + xx) as usize];
                    for (dy, base) in row_base[..k].iter().enumerate() {
                        let Some(base) = base else { continue };
                        let xrow = &xp[base + (xx - r) as usize..base + (xx + r) as usize + 1];
                        let kk = &mut dk[dy * k..(dy + 1) * k];
                        for (slot, xv) in kk.iter_mut().zip(xrow) {
                            *slot = *slot + gv * *xv;
                        }
                    }
                }
                for xx in (0..r).chain(wi - r..wi) {
                    let gv = gp[(y * wi + xx) as usize];
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            if let Some((ry, rx)) = resolve(y + dy - r, xx + dx - r, hi, wi, pad) {
                                let slot = &mut dk[(dy * k as isize + dx) as usize];
                                *slot = *slot + gv * xp[ry * w + rx];
                            }
                        }
                    }
                }
            }
            p += channels;
        }
        dk
    };
    let collect: Vec<Vec<T>> = if use_parallel_at(planes * h * w * k * k, PAR_MIN_FLOPS) {
        #[cfg(feature = "parallel")]
        {
            (0..channels).into_par_iter().map(run).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..channels).map(run).collect()
        }
    } else {
        (0..channels).map(run).collect()
    };
    let mut out = Vec::with_capacity(channels * k * k);
    for dk in collect {
        out.extend_from_slice(&dk);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul_nn_seq(&i2, &b, 2, 2, 2), b);
    }

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = transpose(&a, 3, 4);
        assert_eq!(transpose(&t, 4, 3), a);
    }

    #[test]
    fn sum_to_shape_collapses_axis() {
        // [2,3] -> [1,3]
        let src = vec![1.0f64, 2.0, 3.0, 10.0, 20.0, 30.0];
        let out = sum_to_shape(&src, &[2, 3], &[1, 3]);
        assert_eq!(out, vec![11.0, 22.0, 33.0]);
    }

    #[test]
    fn circular_resolve_wraps() {
        let pad = PaddingMode::seam_aware();
        assert_eq!(resolve(0, -1, 4, 8, pad), Some((0, 7)));
        assert_eq!(resolve(-1, 3, 4, 8, pad), Some((0, 3)));
        let zpad = PaddingMode {
            horizontal: HorizontalPad::Zero,
            vertical: VerticalPad::Zero,
        };
        assert_eq!(resolve(0, -1, 4, 8, zpad), None);
    }
}

// ---------------------------------------------------------------------------
// fused batch normalization core
// ---------------------------------------------------------------------------

/// Per-channel statistics over (batch, spatial): returns (mean, var) of
/// length `channels`. Fixed accumulation order per channel.
pub fn bn_stats<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<T>, Vec<T>) {
    let n = T::from_f64((batch * spatial) as f64);
    let run = |c: usize| {
        let mut s = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for &v in &x[base..base + spatial] {
                s = s + v;
            }
        }
        let mean = s / n;
        let mut q = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for &v in &x[base..base + spatial] {
                let d = v - mean;
                q = q + d * d;
            }
        }
        (mean, q / n)
    };
    let pairs: Vec<(T, T)> = if use_parallel(batch * channels * spatial) {
        #[cfg(feature = "parallel")]
        {
            (0..channels).into_par_iter().map(run).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..channels).map(run).collect()
        }
    } else {
        (0..channels).map(run).collect()
    };
    pairs.into_iter().unzip()
}

/// xhat = (x - mean[c]) * rstd[c]
pub fn bn_normalize<T: Scalar>(
    x: &[T],
    mean: &[T],
    rstd: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let run = |plane: usize, o: &mut [T]| {
        let c = plane % channels;
        let (m, r) = (mean[c], rstd[c]);
        let base = plane * spatial;
        for (ov, &v) in o.iter_mut().zip(&x[base..base + spatial]) {
            *ov = (v - m) * r;
        }
    };
    if use_parallel(x.len()) {
        #[cfg(feature = "parallel")]
        {
            out.par_chunks_mut(spatial)
                .enumerate()
                .for_each(|(p, o)| run(p, o));
            return out;
        }
    }
    for (p, o) in out.chunks_mut(spatial).enumerate() {
        run(p, o);
    }
    let _ = batch;
    out
}

/// First-order input gradient of bn_normalize:
/// dx = rstd * (g - mean(g) - xhat * mean(g * xhat)), means over (batch,
/// spatial) per channel.
pub fn bn_normalize_vjp<T: Scalar>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> Vec<T> {
    let n = T::from_f64((batch * spatial) as f64);
    // per-channel sums of g and g*xhat, fixed order
    let sums = |c: usize| {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                s1 = s1 + g[i];
                s2 = s2 + g[i] * xhat[i];
            }
        }
        (s1 / n, s2 / n)
    };
    let ms: Vec<(T, T)> = (0..channels).map(sums).collect();
    let mut out = vec![T::zero(); g.len()];
    let run = |plane: usize, o: &mut [T]| {
        let c = plane % channels;
        let (m1, m2) = ms[c];
        let r = rstd[c];
        let base = plane * spatial;
        for (i, ov) in o.iter_mut().enumerate() {
            let j = base + i;
            *ov = r * (g[j] - m1 - xhat[j] * m2);
        }
    };
    if use_parallel(g.len() * 2) {
        #[cfg(feature = "parallel")]
        {
            out.par_chunks_mut(spatial)
                .enumerate()
                .for_each(|(p, o)| run(p, o));
            return out;
        }
    }
    for (p, o) in out.chunks_mut(spatial).enumerate() {
        run(p, o);
    }
    out
}
