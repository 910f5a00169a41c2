//! Raw forward/backward loops for the heavier operations. Shapes are
//! validated by the graph layer before these are called.

use crate::autodiff::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad`
/// lies inside the image.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dx[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    let from = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, v) in line[start..start + hi - lo].iter_mut().zip(from) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in line[start..].iter_mut().step_by(g.stride).zip(from) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.out_len());
    let mut out = vec![T::zero(); g.n * g.f * p];
    let mut cols = vec![T::zero(); k * p];
    let in_len = g.c * g.h * g.w;
    for n in 0..g.n {
        let o = &mut out[n * g.f * p..(n + 1) * g.f * p];
        for (f, chunk) in o.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias[f]);
        }
        if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
            T::gemm(g.f, k, p, T::one(), weight, k, 1, &x[n * in_len..(n + 1) * in_len], p, 1, T::one(), o, p, 1);
        } else {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            T::gemm(g.f, k, p, T::one(), weight, k, 1, &cols, p, 1, T::one(), o, p, 1);
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; entries are skipped (empty) when not wanted.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, p) = (g.patch_len(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut dx = if want_dx { vec![T::zero(); g.n * in_len] } else { Vec::new() };
    let mut dw = if want_dw { vec![T::zero(); g.f * k] } else { Vec::new() };
    let mut db = if want_db { vec![T::zero(); g.f] } else { Vec::new() };
    let mut cols = vec![T::zero(); k * p];
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    for n in 0..g.n {
        let go = &dout[n * g.f * p..(n + 1) * g.f * p];
        if want_db {
            for (f, chunk) in go.chunks_exact(p).enumerate() {
                db[f] += chunk.iter().copied().sum::<T>();
            }
        }
        if want_dw {
            let xs = &x[n * in_len..(n + 1) * in_len];
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            T::gemm(g.f, p, k, T::one(), go, p, 1, src, 1, p, T::one(), &mut dw, k, 1);
        }
        if want_dx {
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                T::gemm(k, g.f, p, T::one(), weight, 1, k, go, p, 1, T::one(), dxs, p, 1);
            } else {
                T::gemm(k, g.f, p, T::one(), weight, 1, k, go, p, 1, T::zero(), &mut cols, p, 1);
                col2im(g, &cols, dxs);
            }
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SampleGeom {
    pub batch: usize,
    pub shared_input: bool,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Bilinear taps for one normalized coordinate pair (align-corners, zero
/// padding). Returns the four corner indices (or `None` when outside) and
/// their weights plus the partial derivative scale factors.
#[inline]
fn taps<T: Real>(gx: T, gy: T, h: usize, w: usize) -> (T, T, isize, isize) {
    let half = T::lit(0.5);
    let ix = (gx + T::one()) * half * T::lit((w - 1) as f64);
    let iy = (gy + T::one()) * half * T::lit((h - 1) as f64);
    let x0 = ix.floor();
    let y0 = iy.floor();
    (ix - x0, iy - y0, x0.to_isize().unwrap_or(isize::MIN / 2), y0.to_isize().unwrap_or(isize::MIN / 2))
}

#[inline]
fn read<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

pub(crate) fn grid_sample_forward<T: Real>(g: &SampleGeom, input: &[T], grid: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let opix = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.c * opix];
    for b in 0..g.batch {
        let ib = if g.shared_input { 0 } else { b };
        for p in 0..opix {
            let gx = grid[(b * opix + p) * 2];
            let gy = grid[(b * opix + p) * 2 + 1];
            let (fx, fy, x0, y0) = taps(gx, gy, g.h, g.w);
            let one = T::one();
            for c in 0..g.c {
                let pl = &input[(ib * g.c + c) * plane..(ib * g.c + c + 1) * plane];
                let v00 = read(pl, g.h, g.w, y0, x0);
                let v01 = read(pl, g.h, g.w, y0, x0 + 1);
                let v10 = read(pl, g.h, g.w, y0 + 1, x0);
                let v11 = read(pl, g.h, g.w, y0 + 1, x0 + 1);
                out[(b * g.c + c) * opix + p] = (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11);
            }
        }
    }
    out
}

/// Returns `(dinput, dgrid)`.
pub(crate) fn grid_sample_backward<T: Real>(
    g: &SampleGeom,
    input: &[T],
    grid: &[T],
    dout: &[T],
    want_dinput: bool,
    want_dgrid: bool,
) -> (Vec<T>, Vec<T>) {
    let plane = g.h * g.w;
    let opix = g.oh * g.ow;
    let in_batch = if g.shared_input { 1 } else { g.batch };
    let mut din = if want_dinput { vec![T::zero(); in_batch * g.c * plane] } else { Vec::new() };
    let mut dgrid = if want_dgrid { vec![T::zero(); grid.len()] } else { Vec::new() };
    let sx = T::lit((g.w - 1) as f64 * 0.5);
    let sy = T::lit((g.h - 1) as f64 * 0.5);
    let one = T::one();
    for b in 0..g.batch {
        let ib = if g.shared_input { 0 } else { b };
        for p in 0..opix {
            let gi = (b * opix + p) * 2;
            let (fx, fy, x0, y0) = taps(grid[gi], grid[gi + 1], g.h, g.w);
            let mut dgx = T::zero();
            let mut dgy = T::zero();
            for c in 0..g.c {
                let go = dout[(b * g.c + c) * opix + p];
                if go == T::zero() {
                    continue;
                }
                let off = (ib * g.c + c) * plane;
                if want_dgrid {
                    let pl = &input[off..off + plane];
                    let v00 = read(pl, g.h, g.w, y0, x0);
                    let v01 = read(pl, g.h, g.w, y0, x0 + 1);
                    let v10 = read(pl, g.h, g.w, y0 + 1, x0);
                    let v11 = read(pl, g.h, g.w, y0 + 1, x0 + 1);
                    dgx += go * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                    dgy += go * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                if want_dinput {
                    let corners = [
                        (y0, x0, (one - fy) * (one - fx)),
                        (y0, x0 + 1, (one - fy) * fx),
                        (y0 + 1, x0, fy * (one - fx)),
                        (y0 + 1, x0 + 1, fy * fx),
                    ];
                    for (yy, xx, wgt) in corners {
                        if xx >= 0 && yy >= 0 && (xx as usize) < g.w && (yy as usize) < g.h {
                            din[off + yy as usize * g.w + xx as usize] += go * wgt;
                        }
                    }
                }
            }
            if want_dgrid {
                dgrid[gi] = dgx * sx;
                dgrid[gi + 1] = dgy * sy;
            }
        }
    }
    (din, dgrid)
}

/// Placement of per-cell rasters on a canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CanvasLayout {
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Distance between neighbouring cell centres, in pixels.
    pub spacing: usize,
    pub height: usize,
    pub width: usize,
}

impl CanvasLayout {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Pixel coordinate of the centre of cell `i` along one axis.
    pub fn center(&self, i: usize) -> isize {
        (i * self.spacing + self.spacing / 2) as isize
    }

    /// Top-left canvas coordinate of the raster for cell `(cy, cx)`.
    pub(crate) fn origin(&self, cy: usize, cx: usize, side: usize) -> (isize, isize) {
        let half = ((side - 1) / 2) as isize;
        (self.center(cy) - half, self.center(cx) - half)
    }
}

/// Visits every (raster index, raster offset, canvas offset) pair for one
/// batch element and channel plane.
fn for_each_overlap(layout: &CanvasLayout, side: usize, mut f: impl FnMut(usize, usize, usize)) {
    for cy in 0..layout.grid_h {
        for cx in 0..layout.grid_w {
            let cell = cy * layout.grid_w + cx;
            let (oy, ox) = layout.origin(cy, cx, side);
            for v in 0..side {
                let y = oy + v as isize;
                if y < 0 || y >= layout.height as isize {
                    continue;
                }
                for u in 0..side {
                    let x = ox + u as isize;
                    if x < 0 || x >= layout.width as isize {
                        continue;
                    }
                    f(cell, v * side + u, y as usize * layout.width + x as usize);
                }
            }
        }
    }
}

pub(crate) fn fuse_forward<T: Real>(layout: &CanvasLayout, channels: usize, side: usize, rasters: &[T]) -> Vec<T> {
    let plane = layout.height * layout.width;
    let rplane = side * side;
    let mut out = vec![T::one(); layout.batch * channels * plane];
    for n in 0..layout.batch {
        for c in 0..channels {
            let canvas = &mut out[(n * channels + c) * plane..(n * channels + c + 1) * plane];
            for_each_overlap(layout, side, |cell, ro, co| {
                let r = rasters[((n * layout.cells() + cell) * channels + c) * rplane + ro];
                canvas[co] *= T::one() - r;
            });
        }
    }
    out
}

pub(crate) fn fuse_backward<T: Real>(layout: &CanvasLayout, channels: usize, side: usize, rasters: &[T], dout: &[T]) -> Vec<T> {
    let plane = layout.height * layout.width;
    let rplane = side * side;
    let mut drast = vec![T::zero(); rasters.len()];
    let mut nonzero = vec![T::one(); plane];
    let mut zeros = vec![0u32; plane];
    for n in 0..layout.batch {
        for c in 0..channels {
            nonzero.fill(T::one());
            zeros.fill(0);
            let idx = |cell: usize, ro: usize| ((n * layout.cells() + cell) * channels + c) * rplane + ro;
            for_each_overlap(layout, side, |cell, ro, co| {
                let f = T::one() - rasters[idx(cell, ro)];
                if f == T::zero() {
                    zeros[co] += 1;
                } else {
                    nonzero[co] *= f;
                }
            });
            let g = &dout[(n * channels + c) * plane..(n * channels + c + 1) * plane];
            for_each_overlap(layout, side, |cell, ro, co| {
                let i = idx(cell, ro);
                let f = T::one() - rasters[i];
                let others = match (f == T::zero(), zeros[co]) {
                    (false, 0) => nonzero[co] / f,
                    (true, 1) => nonzero[co],
                    _ => T::zero(),
                };
                drast[i] = -g[co] * others;
            });
        }
    }
    drast
}
