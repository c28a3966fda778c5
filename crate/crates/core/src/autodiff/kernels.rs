//! Convolution kernels over contiguous `f64` buffers.
//!
//! Convolutions are lowered to im2col followed by a row-major matrix
//! product; the innermost loops run over output voxels, which are
//! contiguous in memory.

/// Geometry of a grouped 3D convolution. A 2D convolution is the special case
/// `depth == 1`, `kernel[0] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn output(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (self.input[a] + 2 * self.padding[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output().iter().product()
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the unfolded column matrix for one group.
    fn col_rows(&self) -> usize {
        self.in_per_group() * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.col_rows()
    }
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Range of output positions along one axis whose input index
/// `o * stride + k - pad` falls inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out_len && (lo * stride + k) < pad {
        lo += 1;
    }
    let mut hi = out_len;
    while hi > lo && (hi - 1) * stride + k >= pad + len {
        hi -= 1;
    }
    (lo, hi)
}

/// Output rows `(z, y)` per unfolded chunk, sized so one chunk of columns
/// stays in cache.
fn chunk_rows(g: &ConvGeometry) -> usize {
    const TARGET: usize = 8192;
    let [od, oh, ow] = g.output();
    (TARGET / (g.col_rows() * ow).max(1)).clamp(1, od * oh)
}

/// Unfold output rows `r0..r1` (row index `z * oh + y`) of one group of one
/// batch element into `cols`, laid out `[col_rows, (r1 - r0) * ow]`.
fn im2col(g: &ConvGeometry, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output();
    let len = (r1 - r0) * ow;
    cols[..g.col_rows() * len].fill(0.0);
    let mut row = 0;
    for ci in 0..g.in_per_group() {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(od, d, a, sd, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, h, b, sh, ph);
                for c in 0..kw {
                    let (wlo, whi) = valid_range(ow, w, c, sw, pw);
                    let dst = &mut cols[row * len..(row + 1) * len];
                    row += 1;
                    if wlo >= whi {
                        continue;
                    }
                    for r in r0..r1 {
                        let (z, y) = (r / oh, r % oh);
                        if z < dlo || z >= dhi || y < hlo || y >= hhi {
                            continue;
                        }
                        let (iz, iy) = (z * sd + a - pd, y * sh + b - ph);
                        let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        let out = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                        if sw == 1 {
                            let start = wlo + c - pw;
                            out[wlo..whi].copy_from_slice(&src[start..start + (whi - wlo)]);
                        } else {
                            for xo in wlo..whi {
                                out[xo] = src[xo * sw + c - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add a chunk of columns into the input
/// gradient.
fn col2im(g: &ConvGeometry, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output();
    let len = (r1 - r0) * ow;
    let mut row = 0;
    for ci in 0..g.in_per_group() {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(od, d, a, sd, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, h, b, sh, ph);
                for c in 0..kw {
                    let (wlo, whi) = valid_range(ow, w, c, sw, pw);
                    let src_row = &cols[row * len..(row + 1) * len];
                    row += 1;
                    if wlo >= whi {
                        continue;
                    }
                    for r in r0..r1 {
                        let (z, y) = (r / oh, r % oh);
                        if z < dlo || z >= dhi || y < hlo || y >= hhi {
                            continue;
                        }
                        let (iz, iy) = (z * sd + a - pd, y * sh + b - ph);
                        let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        let src = &src_row[(r - r0) * ow..(r - r0 + 1) * ow];
                        if sw == 1 {
                            let start = wlo + c - pw;
                            for (o, s) in dst[start..start + (whi - wlo)].iter_mut().zip(&src[wlo..whi]) {
                                *o += s;
                            }
                        } else {
                            for xo in wlo..whi {
                                dst[xo * sw + c - pw] += src[xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// Strided row-major view: element `(i, j)` lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn rows(data: &'a [f64], ld: usize) -> Self {
        Self { data, rs: ld, cs: 1 }
    }

    fn transposed(data: &'a [f64], ld: usize) -> Self {
        Self { data, rs: 1, cs: ld }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`; `b` and `c` are row-major with leading
/// dimensions `ldb` and `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: &[f64], ldb: usize, c: &mut [f64], ldc: usize) {
    let n_main = n - n % NR;
    let m_main = m - m % MR;
    let mut apack = vec![0.0f64; k * MR];
    for i in (0..m_main).step_by(MR) {
        for (l, ap) in apack.chunks_exact_mut(MR).enumerate() {
            for (r, v) in ap.iter_mut().enumerate() {
                *v = a.at(i + r, l);
            }
        }
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (l, ap) in apack.chunks_exact(MR).enumerate() {
                let brow: &[f64; NR] = b[l * ldb + j..l * ldb + j + NR].try_into().expect("tile");
                for r in 0..MR {
                    let av = ap[r];
                    for t in 0..NR {
                        acc[r][t] += av * brow[t];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * ldc + j..(i + r) * ldc + j + NR];
                for t in 0..NR {
                    crow[t] += acc_r[t];
                }
            }
        }
    }
    for i in 0..m {
        let cols = if i < m_main { n_main..n } else { 0..n };
        if cols.is_empty() {
            continue;
        }
        for l in 0..k {
            let av = a.at(i, l);
            let (lo, hi) = (cols.start, cols.end);
            axpy(av, &b[l * ldb + lo..l * ldb + hi], &mut c[i * ldc + lo..i * ldc + hi]);
        }
    }
}

/// `c[m x p] += a[m x n] * b[p x n]^T`; `c` is contiguous.
fn gemm_nt(m: usize, n: usize, p: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, c: &mut [f64]) {
    const L: usize = 8;
    let n_main = n - n % L;
    for i in (0..m).step_by(MR) {
        let ib = (m - i).min(MR);
        for j in (0..p).step_by(MR) {
            let jb = (p - j).min(MR);
            if ib < MR || jb < MR {
                for r in 0..ib {
                    for q in 0..jb {
                        c[(i + r) * p + j + q] += dot(&a[(i + r) * lda..(i + r) * lda + n], &b[(j + q) * ldb..(j + q) * ldb + n]);
                    }
                }
                continue;
            }
            let mut acc = [[[0.0f64; L]; MR]; MR];
            for v in (0..n_main).step_by(L) {
                let bs: [&[f64; L]; MR] =
                    std::array::from_fn(|q| b[(j + q) * ldb + v..(j + q) * ldb + v + L].try_into().expect("lane"));
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let arow: &[f64; L] = a[(i + r) * lda + v..(i + r) * lda + v + L].try_into().expect("lane");
                    for (q, acc_rq) in acc_r.iter_mut().enumerate() {
                        for t in 0..L {
                            acc_rq[t] += arow[t] * bs[q][t];
                        }
                    }
                }
            }
            for r in 0..MR {
                for q in 0..MR {
                    let mut s: f64 = acc[r][q].iter().sum();
                    for v in n_main..n {
                        s += a[(i + r) * lda + v] * b[(j + q) * ldb + v];
                    }
                    c[(i + r) * p + j + q] += s;
                }
            }
        }
    }
}

pub fn conv_forward(g: &ConvGeometry, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let iv = g.in_voxels();
    let ov = g.out_voxels();
    let rows = g.col_rows();
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let [od, oh, ow] = g.output();
    let step = chunk_rows(g);
    let mut out = vec![0.0; g.batch * g.out_channels * ov];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * step * ow] };
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xg = &x[(b * g.in_channels + grp * cig) * iv..(b * g.in_channels + (grp + 1) * cig) * iv];
            let first = b * g.out_channels + grp * cog;
            let og = &mut out[first * ov..(first + cog) * ov];
            let wg = Mat::rows(&weight[grp * cog * rows..(grp + 1) * cog * rows], rows);
            if g.is_pointwise() {
                gemm(cog, rows, ov, wg, xg, ov, og, ov);
                continue;
            }
            for r0 in (0..od * oh).step_by(step) {
                let r1 = (r0 + step).min(od * oh);
                let len = (r1 - r0) * ow;
                im2col(g, xg, r0, r1, &mut cols);
                gemm(cog, rows, len, wg, &cols, len, &mut og[r0 * ow..], ov);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and/or weight.
pub fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let iv = g.in_voxels();
    let ov = g.out_voxels();
    let rows = g.col_rows();
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let [od, oh, ow] = g.output();
    let step = chunk_rows(g);
    let mut dx = need_input.then(|| vec![0.0; x.len()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.len()]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * step * ow] };
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xoff = (b * g.in_channels + grp * cig) * iv;
            let xg = &x[xoff..xoff + cig * iv];
            let goff = (b * g.out_channels + grp * cog) * ov;
            let gout_g = &grad_out[goff..goff + cog * ov];
            let wslice = &weight[grp * cog * rows..(grp + 1) * cog * rows];
            let wt = Mat::transposed(wslice, rows);
            if pointwise {
                if let Some(dw) = dw.as_mut() {
                    gemm_nt(cog, ov, rows, gout_g, ov, xg, ov, &mut dw[grp * cog * rows..(grp + 1) * cog * rows]);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(rows, cog, ov, wt, gout_g, ov, &mut dx[xoff..xoff + cig * iv], ov);
                }
                continue;
            }
            for r0 in (0..od * oh).step_by(step) {
                let r1 = (r0 + step).min(od * oh);
                let len = (r1 - r0) * ow;
                let gchunk = &gout_g[r0 * ow..];
                if let Some(dw) = dw.as_mut() {
                    im2col(g, xg, r0, r1, &mut cols);
                    gemm_nt(cog, len, rows, gchunk, ov, &cols, len, &mut dw[grp * cog * rows..(grp + 1) * cog * rows]);
                }
                if let Some(dx) = dx.as_mut() {
                    cols[..rows * len].fill(0.0);
                    gemm(rows, cog, len, wt, gchunk, ov, &mut cols, len);
                    col2im(g, &cols, r0, r1, &mut dx[xoff..xoff + cig * iv]);
                }
            }
        }
    }
    (dx, dw)
}
