//! Precomputed index maps: bijective element permutations and weighted
//! sparse linear maps. Both carry their own adjoint so the ops built on them
//! are closed under differentiation to any order.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::kernels::strides_of;

/// A bijective rearrangement of tensor elements.
#[derive(Debug, Clone)]
pub struct PermuteMap {
    /// fwd[out_index] = in_index
    pub fwd: Arc<Vec<u32>>,
    /// inv[in_index] = out_index
    pub inv: Arc<Vec<u32>>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl PermuteMap {
    fn from_fwd(fwd: Vec<u32>, in_shape: Vec<usize>, out_shape: Vec<usize>) -> Self {
        let mut inv = vec![0u32; fwd.len()];
        for (o, &i) in fwd.iter().enumerate() {
            inv[i as usize] = o as u32;
        }
        PermuteMap {
            fwd: Arc::new(fwd),
            inv: Arc::new(inv),
            in_shape,
            out_shape,
        }
    }

    /// The inverse rearrangement (swaps forward and adjoint roles).
    pub fn inverse(&self) -> PermuteMap {
        PermuteMap {
            fwd: Arc::clone(&self.inv),
            inv: Arc::clone(&self.fwd),
            in_shape: self.out_shape.clone(),
            out_shape: self.in_shape.clone(),
        }
    }

    /// Axis permutation: out axis d enumerates in axis perm[d].
    pub fn transpose_axes(in_shape: &[usize], perm: &[usize]) -> PermuteMap {
        assert_eq!(in_shape.len(), perm.len());
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides_of(in_shape);
        let numel: usize = in_shape.iter().product();
        let mut fwd = vec![0u32; numel];
        let rank = perm.len();
        let mut idx = vec![0usize; rank];
        for slot in fwd.iter_mut() {
            let mut src = 0usize;
            for d in 0..rank {
                src += idx[d] * in_strides[perm[d]];
            }
            *slot = src as u32;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        PermuteMap::from_fwd(fwd, in_shape.to_vec(), out_shape)
    }

    /// [B,C,H,W] -> [B,T,C*p*p]: non-overlapping p x p patches, channel-major
    /// feature layout (feature index = c*p*p + dy*p + dx).
    pub fn patchify(b: usize, c: usize, h: usize, w: usize, p: usize) -> PermuteMap {
        assert!(h.is_multiple_of(p) && w.is_multiple_of(p));
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let feat = c * p * p;
        let mut fwd = vec![0u32; b * t * feat];
        let mut o = 0usize;
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    for ci in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                let src = ((bi * c + ci) * h + gy * p + dy) * w + gx * p + dx;
                                fwd[o] = src as u32;
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
        PermuteMap::from_fwd(fwd, vec![b, c, h, w], vec![b, t, feat])
    }

    /// [B,C,Gh,Gw] -> [B,T,C] token-major view (T = Gh*Gw).
    pub fn map_to_tokens(b: usize, c: usize, gh: usize, gw: usize) -> PermuteMap {
        let t = gh * gw;
        let mut fwd = vec![0u32; b * t * c];
        let mut o = 0usize;
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    fwd[o] = ((bi * c + ci) * t + ti) as u32;
                    o += 1;
                }
            }
        }
        PermuteMap::from_fwd(fwd, vec![b, c, gh, gw], vec![b, t, c])
    }

    /// [B,T,4*Cn] -> [B,Cn,2Gh,2Gw]: expand each token into a 2x2 spatial
    /// block (feature index = cn*4 + dy*2 + dx).
    pub fn patch_split_assemble(b: usize, gh: usize, gw: usize, cn: usize) -> PermuteMap {
        let t = gh * gw;
        let (oh, ow) = (2 * gh, 2 * gw);
        let mut fwd = vec![0u32; b * cn * oh * ow];
        let mut o = 0usize;
        for bi in 0..b {
            for ci in 0..cn {
                for y in 0..oh {
                    for x in 0..ow {
                        let (gy, dy) = (y / 2, y % 2);
                        let (gx, dx) = (x / 2, x % 2);
                        let ti = gy * gw + gx;
                        let src = (bi * t + ti) * (4 * cn) + ci * 4 + dy * 2 + dx;
                        fwd[o] = src as u32;
                        o += 1;
                    }
                }
            }
        }
        PermuteMap::from_fwd(fwd, vec![b, t, 4 * cn], vec![b, cn, oh, ow])
    }

    /// Horizontal circular shift of the last axis by `shift` (to the right),
    /// same shift for every leading index.
    pub fn roll_last_axis(shape: &[usize], shift: i64) -> PermuteMap {
        let w = *shape.last().expect("roll needs at least one axis");
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let s = shift.rem_euclid(w as i64) as usize;
        let mut fwd = vec![0u32; lead * w];
        for l in 0..lead {
            for x in 0..w {
                let src = l * w + (x + w - s) % w;
                fwd[l * w + x] = src as u32;
            }
        }
        PermuteMap::from_fwd(fwd, shape.to_vec(), shape.to_vec())
    }

    /// Per-sample horizontal rolls of an [B, C, H, W] tensor.
    pub fn roll_per_sample(b: usize, c: usize, h: usize, w: usize, shifts: &[i64]) -> PermuteMap {
        assert_eq!(shifts.len(), b);
        let mut fwd = vec![0u32; b * c * h * w];
        let mut o = 0usize;
        for bi in 0..b {
            let s = shifts[bi].rem_euclid(w as i64) as usize;
            for ci in 0..c {
                for y in 0..h {
                    let base = ((bi * c + ci) * h + y) * w;
                    for x in 0..w {
                        fwd[o] = (base + (x + w - s) % w) as u32;
                        o += 1;
                    }
                }
            }
        }
        let shape = vec![b, c, h, w];
        PermuteMap::from_fwd(fwd, shape.clone(), shape)
    }
}

/// One direction of a weighted sparse linear map, CSR over outputs.
#[derive(Debug)]
pub struct CsrMap<T: Scalar> {
    pub offsets: Vec<u32>,
    pub cols: Vec<u32>,
    pub weights: Vec<T>,
    pub out_len: usize,
    pub in_len: usize,
}

/// A sparse linear map together with its exact adjoint.
#[derive(Debug)]
pub struct SparseMap<T: Scalar> {
    pub fwd: CsrMap<T>,
    pub adj: CsrMap<T>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl<T: Scalar> SparseMap<T> {
    /// Build from (out_index, in_index, weight) triples.
    pub fn from_entries(
        mut entries: Vec<(u32, u32, T)>,
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
    ) -> Arc<SparseMap<T>> {
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        entries.sort_by_key(|&(o, i, _)| (o, i));
        let mut fwd = Self::build_csr(&entries, out_len, |&(o, i, w)| (o, i, w));
        fwd.in_len = in_len;
        entries.sort_by_key(|&(o, i, _)| (i, o));
        let mut adj = Self::build_csr(&entries, in_len, |&(o, i, w)| (i, o, w));
        adj.in_len = out_len;
        Arc::new(SparseMap {
            fwd,
            adj,
            in_shape,
            out_shape,
        })
    }

    fn build_csr(
        sorted: &[(u32, u32, T)],
        rows: usize,
        key: impl Fn(&(u32, u32, T)) -> (u32, u32, T),
    ) -> CsrMap<T> {
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut cols = Vec::with_capacity(sorted.len());
        let mut weights = Vec::with_capacity(sorted.len());
        let mut cursor = 0usize;
        for r in 0..rows as u32 {
            offsets.push(cursor as u32);
            while cursor < sorted.len() {
                let (row, col, w) = key(&sorted[cursor]);
                if row != r {
                    break;
                }
                cols.push(col);
                weights.push(w);
                cursor += 1;
            }
        }
        offsets.push(cursor as u32);
        CsrMap {
            offsets,
            cols,
            weights,
            out_len: rows,
            in_len: 0,
        }
    }

    /// x2 bilinear upsampling of [B,C,H,W] with half-pixel centers,
    /// circular horizontal wrap and clamped vertical edges.
    pub fn upsample2x_bilinear(b: usize, c: usize, h: usize, w: usize) -> Arc<SparseMap<T>> {
        let (oh, ow) = (2 * h, 2 * w);
        let mut entries: Vec<(u32, u32, T)> = Vec::with_capacity(b * c * oh * ow * 4);
        let plane = h * w;
        for bc in 0..b * c {
            let ibase = (bc * plane) as u32;
            let obase = (bc * oh * ow) as u32;
            for oy in 0..oh {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let y0 = sy.floor();
                let fy = sy - y0;
                for ox in 0..ow {
                    let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                    let x0 = sx.floor();
                    let fx = sx - x0;
                    let out = obase + (oy * ow + ox) as u32;
                    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                        let yy = (y0 as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                            let xx = (x0 as i64 + dx).rem_euclid(w as i64) as usize;
                            let weight = wy * wx;
                            if weight != 0.0 {
                                entries.push((
                                    out,
                                    ibase + (yy * w + xx) as u32,
                                    T::from_f64(weight),
                                ));
                            }
                        }
                    }
                }
            }
        }
        SparseMap::from_entries(entries, vec![b, c, h, w], vec![b, c, oh, ow])
    }

    /// Scatter step of a stride-2 transposed convolution: input laid out as
    /// [B, Hin*Win, Cout*k*k] (already multiplied by the weight matrix),
    /// accumulated into [B, Cout, 2Hin, 2Win]. kernel k, stride 2, pad k/2-1.
    pub fn col2im_stride2(
        b: usize,
        hin: usize,
        win: usize,
        cout: usize,
        k: usize,
    ) -> Arc<SparseMap<T>> {
        let (ho, wo) = (2 * hin, 2 * win);
        let pad = (k / 2 - 1) as i64;
        let one = T::one();
        let mut entries: Vec<(u32, u32, T)> = Vec::new();
        for bi in 0..b {
            for iy in 0..hin {
                for ix in 0..win {
                    let pos = iy * win + ix;
                    for co in 0..cout {
                        for ky in 0..k {
                            let oy = 2 * iy as i64 + ky as i64 - pad;
                            if oy < 0 || oy >= ho as i64 {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = 2 * ix as i64 + kx as i64 - pad;
                                if ox < 0 || ox >= wo as i64 {
                                    continue;
                                }
                                let src = ((bi * hin * win + pos) * cout + co) * k * k
                                    + ky * k
                                    + kx;
                                let dst = ((bi * cout + co) * ho + oy as usize) * wo
                                    + ox as usize;
                                entries.push((dst as u32, src as u32, one));
                            }
                        }
                    }
                }
            }
        }
        SparseMap::from_entries(
            entries,
            vec![b, hin * win, cout * k * k],
            vec![b, cout, ho, wo],
        )
    }
}
