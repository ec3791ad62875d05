//! Raw loops behind the graph primitives. Everything is row-major and
//! accumulates into caller-provided buffers.

use crate::scalar::{Real, Strided};

/// `c += a (m×k) · b (k×n)`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, Strided::row_major(a, k), Strided::row_major(b, n), c);
}

/// `ga += g (m×n) · bᵀ`.
pub fn matmul_grad_a<T: Real>(g: &[T], b: &[T], ga: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, n, k, Strided::row_major(g, n), Strided::transposed(b, n), ga);
}

/// `gb += aᵀ · g (m×n)`.
pub fn matmul_grad_b<T: Real>(a: &[T], g: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(k, m, n, Strided::transposed(a, k), Strided::row_major(g, n), gb);
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a same-padded square convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    /// Valid output range along one axis for kernel tap `d`, and the input shift.
    #[inline]
    fn span(len: usize, d: usize, pad: usize) -> (usize, usize, isize) {
        let shift = d as isize - pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).min(len as isize).max(0) as usize;
        (lo, hi, shift)
    }
}

/// Unfolds `x` into a `(c_in·k·k)×(h·w)` patch matrix; out-of-grid taps are zero.
fn im2col<T: Real>(x: &[T], d: ConvDims) -> Vec<T> {
    let ConvDims { c_in, h, w, k, .. } = d;
    let pad = k / 2;
    let plane = h * w;
    let mut cols = vec![T::zero(); c_in * k * k * plane];
    for i in 0..c_in {
        let in_plane = &x[i * plane..(i + 1) * plane];
        for dy in 0..k {
            let (y_lo, y_hi, sy) = ConvDims::span(h, dy, pad);
            for dx in 0..k {
                let (x_lo, x_hi, sx) = ConvDims::span(w, dx, pad);
                if x_lo >= x_hi {
                    continue;
                }
                let row = &mut cols[((i * k + dy) * k + dx) * plane..][..plane];
                for y in y_lo..y_hi {
                    let src = (y as isize + sy) as usize * w + (x_lo as isize + sx) as usize;
                    row[y * w + x_lo..y * w + x_hi].copy_from_slice(&in_plane[src..src + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: adds each patch entry back onto its source pixel.
fn col2im_acc<T: Real>(cols: &[T], gx: &mut [T], d: ConvDims) {
    let ConvDims { c_in, h, w, k, .. } = d;
    let pad = k / 2;
    let plane = h * w;
    for i in 0..c_in {
        let gx_plane = &mut gx[i * plane..(i + 1) * plane];
        for dy in 0..k {
            let (y_lo, y_hi, sy) = ConvDims::span(h, dy, pad);
            for dx in 0..k {
                let (x_lo, x_hi, sx) = ConvDims::span(w, dx, pad);
                if x_lo >= x_hi {
                    continue;
                }
                let row = &cols[((i * k + dy) * k + dx) * plane..][..plane];
                for y in y_lo..y_hi {
                    let dst = (y as isize + sy) as usize * w + (x_lo as isize + sx) as usize;
                    for (a, &b) in gx_plane[dst..dst + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                    {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution, `out += conv(x, w)`; `x` is `c_in×h×w`, `w` is `c_out×c_in×k×k`.
pub fn conv2d_acc<T: Real>(x: &[T], wt: &[T], out: &mut [T], d: ConvDims) {
    let cols = im2col(x, d);
    matmul_acc(wt, &cols, out, d.c_out, d.c_in * d.k * d.k, d.h * d.w);
}

/// Input gradient of [`conv2d_acc`].
pub fn conv2d_grad_x<T: Real>(g: &[T], wt: &[T], gx: &mut [T], d: ConvDims) {
    let mut gcols = vec![T::zero(); d.c_in * d.k * d.k * d.h * d.w];
    matmul_grad_b(wt, g, &mut gcols, d.c_out, d.c_in * d.k * d.k, d.h * d.w);
    col2im_acc(&gcols, gx, d);
}

/// Weight gradient of [`conv2d_acc`].
pub fn conv2d_grad_w<T: Real>(g: &[T], x: &[T], gw: &mut [T], d: ConvDims) {
    let cols = im2col(x, d);
    matmul_grad_a(g, &cols, gw, d.c_out, d.c_in * d.k * d.k, d.h * d.w);
}

/// The four lattice neighbours of a continuous point with their bilinear weights.
/// Neighbours outside the grid are reported as `None` (zero padding).
#[derive(Clone, Copy, Debug)]
pub struct Corners<T> {
    pub idx: [Option<usize>; 4],
    pub wx: T,
    pub wy: T,
}

#[inline]
pub fn corners<T: Real>(px: T, py: T, h: usize, w: usize) -> Corners<T> {
    let fx = px.floor();
    let fy = py.floor();
    let wx = px - fx;
    let wy = py - fy;
    let mut idx = [None; 4];
    // Coordinates far outside the grid can't be converted to isize; they are padding anyway.
    let limit = T::lit(1.0e9);
    if fx.abs() < limit && fy.abs() < limit {
        let x0 = fx.to_isize().unwrap_or(isize::MIN / 2);
        let y0 = fy.to_isize().unwrap_or(isize::MIN / 2);
        let at = |x: isize, y: isize| {
            (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h)
                .then(|| y as usize * w + x as usize)
        };
        idx = [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)];
    }
    Corners { idx, wx, wy }
}

/// Out-of-grid handling for bilinear sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Neighbours outside the grid read as zero.
    Zero,
    /// Points are clamped into the grid first; the coordinate gradient is zero
    /// along a clamped axis.
    Clamp,
}

/// Applies the border rule; returns the effective point and whether each axis is live.
#[inline]
fn border_point<T: Real>(px: T, py: T, h: usize, w: usize, border: Border) -> (T, T, bool, bool) {
    match border {
        Border::Zero => (px, py, true, true),
        Border::Clamp => {
            let (xmax, ymax) = (T::from_usize(w - 1).unwrap(), T::from_usize(h - 1).unwrap());
            let cx = px.max(T::zero()).min(xmax);
            let cy = py.max(T::zero()).min(ymax);
            (cx, cy, cx == px, cy == py)
        }
    }
}

/// `out[n, c] = bilinear(map[c], points[n])` for a `c×h×w` map and `n×2` points `(x, y)`.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_forward<T: Real>(
    map: &[T],
    points: &[T],
    out: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    border: Border,
) {
    let plane = h * w;
    let n = points.len() / 2;
    for p in 0..n {
        let (px, py, _, _) = border_point(points[2 * p], points[2 * p + 1], h, w, border);
        let cr = corners(px, py, h, w);
        let one = T::one();
        let weights = [
            (one - cr.wx) * (one - cr.wy),
            cr.wx * (one - cr.wy),
            (one - cr.wx) * cr.wy,
            cr.wx * cr.wy,
        ];
        let row = &mut out[p * c..(p + 1) * c];
        for (corner, &wt) in cr.idx.iter().zip(&weights) {
            if let Some(cell) = corner {
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += wt * map[ch * plane + cell];
                }
            }
        }
    }
}

/// Gradients of [`bilinear_forward`] with respect to the map and the point coordinates.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward<T: Real>(
    map: &[T],
    points: &[T],
    g: &[T],
    mut g_map: Option<&mut [T]>,
    mut g_points: Option<&mut [T]>,
    c: usize,
    h: usize,
    w: usize,
    border: Border,
) {
    let plane = h * w;
    let n = points.len() / 2;
    let one = T::one();
    for p in 0..n {
        let (px, py, live_x, live_y) = border_point(points[2 * p], points[2 * p + 1], h, w, border);
        let cr = corners(px, py, h, w);
        let g_row = &g[p * c..(p + 1) * c];
        let weights = [
            (one - cr.wx) * (one - cr.wy),
            cr.wx * (one - cr.wy),
            (one - cr.wx) * cr.wy,
            cr.wx * cr.wy,
        ];
        if let Some(gm) = g_map.as_deref_mut() {
            for (corner, &wt) in cr.idx.iter().zip(&weights) {
                if let Some(cell) = corner {
                    for (ch, &gv) in g_row.iter().enumerate() {
                        gm[ch * plane + cell] += wt * gv;
                    }
                }
            }
        }
        if let Some(gp) = g_points.as_deref_mut() {
            // Projected corner values: v_j = <g_row, map[:, corner_j]>.
            let mut v = [T::zero(); 4];
            for (j, corner) in cr.idx.iter().enumerate() {
                if let Some(cell) = corner {
                    let mut acc = T::zero();
                    for (ch, &gv) in g_row.iter().enumerate() {
                        acc += gv * map[ch * plane + cell];
                    }
                    v[j] = acc;
                }
            }
            if live_x {
                gp[2 * p] += (one - cr.wy) * (v[1] - v[0]) + cr.wy * (v[3] - v[2]);
            }
            if live_y {
                gp[2 * p + 1] += (one - cr.wx) * (v[2] - v[0]) + cr.wx * (v[3] - v[1]);
            }
        }
    }
}
