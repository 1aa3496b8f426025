//! Column lowering shared by forward and transposed convolutions.
//!
//! A "big" grid position relates to a "small" grid position through
//! `big = small * stride - padding + k`. For a forward convolution the big
//! grid is the input and the small grid the output; for a transposed
//! convolution the roles swap. `im2col` gathers along that relation and
//! `col2im` is its exact adjoint (scatter-add).

/// Kernel geometry of a 3D convolution, per `(D, H, W)` axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn cubic(k: usize, stride: usize, padding: usize) -> Self {
        ConvGeom {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent of a forward convolution, `None` if the kernel does
    /// not fit the padded input along some axis.
    pub fn conv_output(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    /// Valid `[lo, hi)` range of small-grid indices along one axis for
    /// kernel offset `k`.
    fn valid(&self, axis: usize, k: usize, big: usize, small: usize) -> (usize, usize) {
        let s = self.stride[axis];
        let p = self.padding[axis];
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if big + p > k {
            ((big + p - k - 1) / s + 1).min(small)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Gathers `src` (`channels × big`) into `cols` (`channels·K × P`) for the
/// small-grid depth slab `z0..z1`, where `P = (z1 - z0)·small_h·small_w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    src: &[f32],
    channels: usize,
    big: [usize; 3],
    small: [usize; 3],
    g: &ConvGeom,
    z0: usize,
    z1: usize,
    cols: &mut [f32],
) {
    let [bd, bh, bw] = big;
    let [_, sh, sw] = small;
    let plane = sh * sw;
    let p = (z1 - z0) * plane;
    let [kd, kh, kw] = g.kernel;
    debug_assert!(cols.len() >= channels * kd * kh * kw * p);
    let mut row = 0;
    for c in 0..channels {
        let src_c = &src[c * bd * bh * bw..(c + 1) * bd * bh * bw];
        for dz in 0..kd {
            let (zlo, zhi) = g.valid(0, dz, bd, small[0]);
            for dy in 0..kh {
                let (ylo, yhi) = g.valid(1, dy, bh, sh);
                for dx in 0..kw {
                    let (xlo, xhi) = g.valid(2, dx, bw, sw);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oz in z0..z1 {
                        let dz_row = &mut dst[(oz - z0) * plane..(oz - z0 + 1) * plane];
                        if oz < zlo || oz >= zhi {
                            dz_row.fill(0.0);
                            continue;
                        }
                        let iz = oz * g.stride[0] + dz - g.padding[0];
                        let src_z = &src_c[iz * bh * bw..(iz + 1) * bh * bw];
                        for oy in 0..sh {
                            let d = &mut dz_row[oy * sw..(oy + 1) * sw];
                            if oy < ylo || oy >= yhi {
                                d.fill(0.0);
                                continue;
                            }
                            let iy = oy * g.stride[1] + dy - g.padding[1];
                            let s_row = &src_z[iy * bw..(iy + 1) * bw];
                            d[..xlo].fill(0.0);
                            d[xhi..].fill(0.0);
                            if xlo < xhi {
                                let ix0 = xlo * g.stride[2] + dx - g.padding[2];
                                if g.stride[2] == 1 {
                                    d[xlo..xhi].copy_from_slice(&s_row[ix0..ix0 + (xhi - xlo)]);
                                } else {
                                    for (j, o) in d[xlo..xhi].iter_mut().enumerate() {
                                        *o = s_row[ix0 + j * g.stride[2]];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` into `dst`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f32],
    channels: usize,
    big: [usize; 3],
    small: [usize; 3],
    g: &ConvGeom,
    z0: usize,
    z1: usize,
    dst: &mut [f32],
) {
    let [bd, bh, bw] = big;
    let [_, sh, sw] = small;
    let plane = sh * sw;
    let p = (z1 - z0) * plane;
    let [kd, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let dst_c = &mut dst[c * bd * bh * bw..(c + 1) * bd * bh * bw];
        for dz in 0..kd {
            let (zlo, zhi) = g.valid(0, dz, bd, small[0]);
            for dy in 0..kh {
                let (ylo, yhi) = g.valid(1, dy, bh, sh);
                for dx in 0..kw {
                    let (xlo, xhi) = g.valid(2, dx, bw, sw);
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    if xlo >= xhi {
                        continue;
                    }
                    for oz in z0.max(zlo)..z1.min(zhi) {
                        let iz = oz * g.stride[0] + dz - g.padding[0];
                        let src_z = &src[(oz - z0) * plane..(oz - z0 + 1) * plane];
                        let dst_z = &mut dst_c[iz * bh * bw..(iz + 1) * bh * bw];
                        for oy in ylo..yhi {
                            let iy = oy * g.stride[1] + dy - g.padding[1];
                            let s = &src_z[oy * sw + xlo..oy * sw + xhi];
                            let d_row = &mut dst_z[iy * bw..(iy + 1) * bw];
                            let ix0 = xlo * g.stride[2] + dx - g.padding[2];
                            if g.stride[2] == 1 {
                                for (o, v) in d_row[ix0..ix0 + s.len()].iter_mut().zip(s) {
                                    *o += v;
                                }
                            } else {
                                for (j, v) in s.iter().enumerate() {
                                    d_row[ix0 + j * g.stride[2]] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Number of small-grid depth planes per column chunk so a chunk holds at
/// most roughly `budget` floats.
pub(crate) fn chunk_planes(rows: usize, plane: usize, depth: usize) -> usize {
    const BUDGET: usize = 1 << 22;
    (BUDGET / (rows * plane).max(1)).clamp(1, depth.max(1))
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f32], ld: usize) -> Self {
        Mat { data, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major matrix with leading dimension `ld`.
    pub fn t(data: &'a [f32], ld: usize) -> Self {
        Mat { data, rs: 1, cs: ld }
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` with `c` row-major (leading dim `ldc`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(a.rs, a.cs, m, k) < a.data.len(), "gemm: A out of bounds");
        assert!(last(b.rs, b.cs, k, n) < b.data.len(), "gemm: B out of bounds");
    }
    assert!(last(ldc, 1, m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: bounds of all three operands were checked above for the
    // given shapes and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
