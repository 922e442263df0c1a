//! Numeric kernels behind the recorded ops: a packed matrix product and the
//! im2col / col2im transforms used to express 2-D convolution as a product.
//!
//! Every output element of [`gemm`] is accumulated over `k` in ascending
//! order with no blocking along `k`, so results do not depend on matrix
//! sizes and exact zeros anywhere in the reduction leave the sum unchanged.

use std::ops::Range;

const MR: usize = 8;
const NR: usize = 16;

/// Strided read-only matrix view: element `(i, j)` is `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` (or `+=` when `accumulate`), `c` row-major.
pub(crate) fn gemm(m: usize, n: usize, k: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    gemm_pitched(m, n, k, a, b, c, n, accumulate);
}

/// [`gemm`] with output rows `ldc` elements apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_pitched(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    assert!(ldc >= n && (m == 0 || c.len() >= (m - 1) * ldc + n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(0.0);
            }
        }
        return;
    }

    let m_panels = m.div_ceil(MR);
    let n_panels = n.div_ceil(NR);

    let mut apack = vec![0.0; m_panels * k * MR];
    for p in 0..m_panels {
        let dst = &mut apack[p * k * MR..(p + 1) * k * MR];
        for i in 0..MR.min(m - p * MR) {
            let row = p * MR + i;
            if a.cs == 1 {
                let src = &a.data[row * a.rs..row * a.rs + k];
                for (kk, &v) in src.iter().enumerate() {
                    dst[kk * MR + i] = v;
                }
            } else {
                for kk in 0..k {
                    dst[kk * MR + i] = a.at(row, kk);
                }
            }
        }
    }

    let mut bpanel = vec![0.0; k * NR];
    for q in 0..n_panels {
        let col0 = q * NR;
        let width = NR.min(n - col0);
        // Full-width panels of a row-major B are read in place when few row
        // panels reuse them and rows do not alias in the L1 sets.
        let in_place = b.cs == 1 && width == NR && m_panels <= 4 && b.rs % 512 != 0;
        let (panel, stride): (&[f64], usize) = if in_place {
            (&b.data[col0..], b.rs)
        } else {
            if width < NR {
                bpanel.fill(0.0);
            }
            if b.cs == 1 {
                for kk in 0..k {
                    let src = &b.data[kk * b.rs + col0..kk * b.rs + col0 + width];
                    bpanel[kk * NR..kk * NR + width].copy_from_slice(src);
                }
            } else if b.rs == 1 {
                for k0 in (0..k).step_by(64) {
                    let k1 = (k0 + 64).min(k);
                    for j in 0..width {
                        let src = &b.data[(col0 + j) * b.cs + k0..(col0 + j) * b.cs + k1];
                        for (kk, &v) in (k0..k1).zip(src) {
                            bpanel[kk * NR + j] = v;
                        }
                    }
                }
            } else {
                for kk in 0..k {
                    for j in 0..width {
                        bpanel[kk * NR + j] = b.at(kk, col0 + j);
                    }
                }
            }
            (&bpanel, NR)
        };

        for p in 0..m_panels {
            let row0 = p * MR;
            let tile = Tile {
                rows: MR.min(m - row0),
                width,
                ldc,
                accumulate,
            };
            microkernel(&apack[p * k * MR..(p + 1) * k * MR], panel, stride, &mut c[row0 * ldc + col0..], tile);
        }
    }
}

/// Destination of one `MR x NR` block: the top-left `rows x width` part is
/// written (or added) at row pitch `ldc`.
#[derive(Clone, Copy)]
struct Tile {
    rows: usize,
    width: usize,
    ldc: usize,
    accumulate: bool,
}

impl Tile {
    fn store(self, acc: &[[f64; NR]; MR], c: &mut [f64]) {
        for (i, acc_row) in acc.iter().enumerate().take(self.rows) {
            let dst = &mut c[i * self.ldc..i * self.ldc + self.width];
            if self.accumulate {
                for (d, v) in dst.iter_mut().zip(acc_row) {
                    *d += v;
                }
            } else {
                dst.copy_from_slice(&acc_row[..self.width]);
            }
        }
    }
}

/// `a` is a packed `k x MR` panel; row `kk` of the `k x NR` B panel starts at
/// `b[kk * stride]`.
fn microkernel(a: &[f64], b: &[f64], stride: usize, c: &mut [f64], tile: Tile) {
    let k = a.len() / MR;
    assert!(k == 0 || b.len() >= (k - 1) * stride + NR);
    assert!(tile.rows > 0 && c.len() >= (tile.rows - 1) * tile.ldc + tile.width);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the feature was detected at run time and the bounds checked above.
        unsafe { microkernel_avx512(a, b, stride, c, tile) };
        return;
    }
    tile.store(&microkernel_generic(a, b, stride), c);
}

#[inline(always)]
fn microkernel_generic(a: &[f64], b: &[f64], stride: usize) -> [[f64; NR]; MR] {
    let mut acc = [[0.0; NR]; MR];
    for (kk, av) in a.chunks_exact(MR).enumerate() {
        let bv = &b[kk * stride..kk * stride + NR];
        for i in 0..MR {
            let ai = av[i];
            for j in 0..NR {
                acc[i][j] = ai.mul_add(bv[j], acc[i][j]);
            }
        }
    }
    acc
}

// Same fused multiply-add sequence as the generic kernel, so results match bitwise.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn microkernel_avx512(a: &[f64], b: &[f64], stride: usize, c: &mut [f64], tile: Tile) {
    use std::arch::x86_64::*;
    const _: () = assert!(MR == 8 && NR == 16);
    let k = a.len() / MR;
    let z = _mm512_setzero_pd();
    let (mut l0, mut l1, mut l2, mut l3, mut l4, mut l5, mut l6, mut l7) = (z, z, z, z, z, z, z, z);
    let (mut h0, mut h1, mut h2, mut h3, mut h4, mut h5, mut h6, mut h7) = (z, z, z, z, z, z, z, z);
    let (ap, bp) = (a.as_ptr(), b.as_ptr());
    for kk in 0..k {
        let b0 = _mm512_loadu_pd(bp.add(kk * stride));
        let b1 = _mm512_loadu_pd(bp.add(kk * stride + 8));
        let ar = ap.add(kk * MR);
        macro_rules! row {
            ($i:expr, $l:ident, $h:ident) => {
                let ai = _mm512_set1_pd(*ar.add($i));
                $l = _mm512_fmadd_pd(ai, b0, $l);
                $h = _mm512_fmadd_pd(ai, b1, $h);
            };
        }
        row!(0, l0, h0);
        row!(1, l1, h1);
        row!(2, l2, h2);
        row!(3, l3, h3);
        row!(4, l4, h4);
        row!(5, l5, h5);
        row!(6, l6, h6);
        row!(7, l7, h7);
    }
    let lo = [l0, l1, l2, l3, l4, l5, l6, l7];
    let hi = [h0, h1, h2, h3, h4, h5, h6, h7];
    if tile.rows == MR && tile.width == NR {
        let cp = c.as_mut_ptr();
        for i in 0..MR {
            let (d0, d1) = (cp.add(i * tile.ldc), cp.add(i * tile.ldc + 8));
            if tile.accumulate {
                _mm512_storeu_pd(d0, _mm512_add_pd(_mm512_loadu_pd(d0), lo[i]));
                _mm512_storeu_pd(d1, _mm512_add_pd(_mm512_loadu_pd(d1), hi[i]));
            } else {
                _mm512_storeu_pd(d0, lo[i]);
                _mm512_storeu_pd(d1, hi[i]);
            }
        }
    } else {
        let mut acc = [[0.0; NR]; MR];
        for i in 0..MR {
            _mm512_storeu_pd(acc[i].as_mut_ptr(), lo[i]);
            _mm512_storeu_pd(acc[i].as_mut_ptr().add(8), hi[i]);
        }
        tile.store(&acc, c);
    }
}

/// Geometry of a stride-1 `k x k` convolution with zero padding `pad` over
/// a `[c, h, w]` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_dims(&self) -> (usize, usize) {
        conv_out_dims(self.h, self.w, self.k, self.pad)
    }

    /// Rows of the column matrix.
    pub fn kdim(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Calls `f(row, iy, lo, hi, q0, q1)` for every column-matrix row and every
    /// output-row segment of `cols`: output pixels `q0..q1` lie on output row
    /// `oy`, read input row `iy` (`None` when it falls in the padding) and have
    /// in-bounds columns at offsets `lo..hi` from `q0`.
    fn segments(&self, cols: Range<usize>, mut f: impl FnMut(usize, Option<usize>, usize, usize, usize, usize)) {
        let (ho, wo) = self.out_dims();
        debug_assert!(cols.end <= ho * wo);
        let k = self.k;
        for row in 0..self.kdim() {
            let (ky, kx) = ((row / k) % k, row % k);
            let mut q = cols.start;
            while q < cols.end {
                let oy = q / wo;
                let ox0 = q % wo;
                let q1 = cols.end.min((oy + 1) * wo);
                let ox1 = ox0 + (q1 - q);
                let iy = (oy + ky).checked_sub(self.pad).filter(|&iy| iy < self.h);
                let (lo, hi) = valid_span(kx, self.pad, self.w, wo);
                let (lo, hi) = (lo.clamp(ox0, ox1) - ox0, hi.clamp(ox0, ox1) - ox0);
                f(row, iy, lo, hi.max(lo), q, q1);
                q = q1;
            }
        }
    }
}

/// Unfolds output pixels `cols` of one image into a `[kdim, cols.len()]`
/// column matrix.
pub(crate) fn im2col(input: &[f64], shape: ConvShape, cols: Range<usize>, out: &mut [f64]) {
    let ConvShape { h, w, k, pad, .. } = shape;
    let (_, wo) = shape.out_dims();
    let (p0, len) = (cols.start, cols.len());
    debug_assert_eq!(out.len(), shape.kdim() * len);
    shape.segments(cols, |row, iy, lo, hi, q0, q1| {
        let dst = &mut out[row * len + q0 - p0..row * len + q1 - p0];
        let Some(iy) = iy.filter(|_| lo < hi) else {
            dst.fill(0.0);
            return;
        };
        let ci = row / (k * k);
        let kx = row % k;
        let ix = q0 % wo + lo + kx - pad;
        let src = ci * h * w + iy * w + ix;
        dst[..lo].fill(0.0);
        dst[hi..].fill(0.0);
        dst[lo..hi].copy_from_slice(&input[src..src + hi - lo]);
    });
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix for pixels `cols`
/// back into an image.
pub(crate) fn col2im(src: &[f64], shape: ConvShape, cols: Range<usize>, out: &mut [f64]) {
    let ConvShape { h, w, k, pad, .. } = shape;
    let (_, wo) = shape.out_dims();
    let (p0, len) = (cols.start, cols.len());
    shape.segments(cols, |row, iy, lo, hi, q0, _| {
        let Some(iy) = iy.filter(|_| lo < hi) else { return };
        let ci = row / (k * k);
        let kx = row % k;
        let ix = q0 % wo + lo + kx - pad;
        let dst = ci * h * w + iy * w + ix;
        let s = &src[row * len + q0 - p0 + lo..row * len + q0 - p0 + hi];
        for (d, v) in out[dst..dst + hi - lo].iter_mut().zip(s) {
            *d += v;
        }
    });
}

/// Output columns `lo..hi` whose input column `ox + kx - pad` lies in `0..w`.
#[inline]
fn valid_span(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

pub(crate) fn conv_out_dims(h: usize, w: usize, k: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad + 1).saturating_sub(k), (w + 2 * pad + 1).saturating_sub(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_on_ragged_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 7), (4, 8, 2), (9, 17, 33), (5, 3, 1)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, n, k, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut c, false);
            let expect = naive(m, n, k, &a, &b);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposed_views_and_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, n, k) = (6, 10, 5);
        // a stored as k x m, b stored as n x k
        let at: Vec<f64> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bt: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; m * k];
        let mut b = vec![0.0; k * n];
        for i in 0..m {
            for t in 0..k {
                a[i * k + t] = at[t * m + i];
            }
        }
        for t in 0..k {
            for j in 0..n {
                b[t * n + j] = bt[j * k + t];
            }
        }
        let mut c = vec![1.0; m * n];
        gemm(m, n, k, MatRef::transposed(&at, m), MatRef::transposed(&bt, k), &mut c, true);
        let expect = naive(m, n, k, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_kernel_matches_generic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 37;
        let a: Vec<f64> = (0..k * MR).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * NR).map(|_| rng.random_range(-1.0..1.0)).collect();
        for accumulate in [false, true] {
            let tile = Tile { rows: MR, width: NR, ldc: NR + 3, accumulate };
            let mut c = vec![0.5; MR * (NR + 3)];
            microkernel(&a, &b, NR, &mut c, tile);
            let mut expect = vec![0.5; MR * (NR + 3)];
            tile.store(&microkernel_generic(&a, &b, NR), &mut expect);
            assert_eq!(c, expect);
        }
    }

    fn naive_im2col(x: &[f64], sh: ConvShape) -> Vec<f64> {
        let (ho, wo) = sh.out_dims();
        let mut out = Vec::new();
        for ci in 0..sh.c {
            for ky in 0..sh.k {
                for kx in 0..sh.k {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let (iy, ix) = ((oy + ky) as isize - sh.pad as isize, (ox + kx) as isize - sh.pad as isize);
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < sh.h && (ix as usize) < sh.w;
                            out.push(if inside { x[(ci * sh.h + iy as usize) * sh.w + ix as usize] } else { 0.0 });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_ranges_match_naive_unfold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sh in [
            ConvShape { c: 2, h: 5, w: 6, k: 3, pad: 1 },
            ConvShape { c: 1, h: 7, w: 4, k: 5, pad: 2 },
            ConvShape { c: 3, h: 6, w: 6, k: 3, pad: 0 },
            ConvShape { c: 1, h: 3, w: 3, k: 5, pad: 2 },
        ] {
            let x: Vec<f64> = (0..sh.c * sh.h * sh.w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let full = naive_im2col(&x, sh);
            let (ho, wo) = sh.out_dims();
            let p = ho * wo;
            for (p0, p1) in [(0, p), (1, p - 1), (wo - 1, (2 * wo + 1).min(p)), (p - 1, p)] {
                let len = p1 - p0;
                let mut out = vec![f64::NAN; sh.kdim() * len];
                im2col(&x, sh, p0..p1, &mut out);
                for r in 0..sh.kdim() {
                    assert_eq!(&out[r * len..(r + 1) * len], &full[r * p + p0..r * p + p1], "{sh:?} rows {p0}..{p1}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sh = ConvShape { c: 2, h: 5, w: 6, k: 3, pad: 1 };
        let (p0, p1) = (4, 23);
        let len = p1 - p0;
        let x: Vec<f64> = (0..sh.c * sh.h * sh.w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..sh.kdim() * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, sh, p0..p1, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, sh, p0..p1, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
