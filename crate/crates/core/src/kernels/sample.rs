//! Bilinear sampling kernels: displacement-field warping and 2x field
//! upsampling, both window-aware.
//!
//! A `Window` declares that a buffer is a view of a larger canvas. All
//! sample positions are computed in canvas-global coordinates and only the
//! final tap indices are translated into the local buffer. Running the same
//! arithmetic on a window therefore reproduces the full-canvas results bit
//! for bit wherever the window holds the required taps, which is what makes
//! tiled inference exact away from tile borders.

use crate::scalar::Scalar;

/// A view of a `full_h` x `full_w` canvas starting at (`oy`, `ox`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub oy: usize,
    pub ox: usize,
    pub full_h: usize,
    pub full_w: usize,
}

impl Window {
    /// Window covering an entire canvas.
    pub fn full(h: usize, w: usize) -> Self {
        Window { oy: 0, ox: 0, full_h: h, full_w: w }
    }

    /// The same window expressed at a coarser pyramid level (`n` halvings).
    /// All quantities must be divisible by 2^n.
    pub fn at_level(&self, n: usize) -> Window {
        let d = 1usize << n;
        debug_assert!(
            self.oy % d == 0 && self.ox % d == 0 && self.full_h % d == 0 && self.full_w % d == 0,
            "window {:?} not aligned to level {}",
            self,
            n
        );
        Window { oy: self.oy / d, ox: self.ox / d, full_h: self.full_h / d, full_w: self.full_w / d }
    }
}

/// Half-span of the normalized axis in pixels: a displacement of 1.0 in
/// normalized units equals (size-1)/2 pixels.
#[inline]
pub fn half_span<T: Scalar>(size: usize) -> T {
    T::from_usize(size.saturating_sub(1)) / T::from_f64(2.0)
}

#[inline]
fn lerp<T: Scalar>(v0: T, v1: T, f: T) -> T {
    v0 + f * (v1 - v0)
}

/// Bilinear warp: out(r) = source sampled at r + D(r), in normalized
/// coordinates where the canvas spans [-1, 1] per axis. Taps outside the
/// canvas read zero (missing data).
///
/// `source` is (batch, ch, h, w), `field` is (batch, 2, h, w) with channel 0
/// the x displacement and channel 1 the y displacement.
pub fn warp_forward<T: Scalar>(
    source: &[T],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    field: &[T],
    win: Window,
    out: &mut [T],
) {
    let plane = h * w;
    let half_w: T = half_span(win.full_w);
    let half_h: T = half_span(win.full_h);
    for b in 0..batch {
        let fx_plane = &field[(b * 2) * plane..(b * 2 + 1) * plane];
        let fy_plane = &field[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
        for y in 0..h {
            for x in 0..w {
                let dx = fx_plane[y * w + x];
                let dy = fy_plane[y * w + x];
                let px = T::from_usize(x + win.ox) + dx * half_w;
                let py = T::from_usize(y + win.oy) + dy * half_h;
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let x0 = x0.to_f64() as isize;
                let y0 = y0.to_f64() as isize;
                for c in 0..ch {
                    let splane = &source[(b * ch + c) * plane..(b * ch + c + 1) * plane];
                    let tap = |iy: isize, ix: isize| -> T {
                        if iy < 0
                            || ix < 0
                            || iy >= win.full_h as isize
                            || ix >= win.full_w as isize
                        {
                            return T::zero();
                        }
                        let ly = iy as usize;
                        let lx = ix as usize;
                        if ly < win.oy || lx < win.ox {
                            return T::zero();
                        }
                        let (ly, lx) = (ly - win.oy, lx - win.ox);
                        if ly >= h || lx >= w {
                            return T::zero();
                        }
                        splane[ly * w + lx]
                    };
                    let v00 = tap(y0, x0);
                    let v01 = tap(y0, x0 + 1);
                    let v10 = tap(y0 + 1, x0);
                    let v11 = tap(y0 + 1, x0 + 1);
                    let top = lerp(v00, v01, fx);
                    let bot = lerp(v10, v11, fx);
                    out[(b * ch + c) * plane + y * w + x] = lerp(top, bot, fy);
                }
            }
        }
    }
}

/// Gradients of `warp_forward` with respect to the source values and the
/// field. Either output may be absent.
#[allow(clippy::too_many_arguments)]
pub fn warp_backward<T: Scalar>(
    source: &[T],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    field: &[T],
    win: Window,
    dout: &[T],
    mut dsource: Option<&mut [T]>,
    mut dfield: Option<&mut [T]>,
) {
    let plane = h * w;
    let half_w: T = half_span(win.full_w);
    let half_h: T = half_span(win.full_h);
    let one = T::one();
    for b in 0..batch {
        let fx_plane = &field[(b * 2) * plane..(b * 2 + 1) * plane];
        let fy_plane = &field[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
        for y in 0..h {
            for x in 0..w {
                let dx = fx_plane[y * w + x];
                let dy = fy_plane[y * w + x];
                let px = T::from_usize(x + win.ox) + dx * half_w;
                let py = T::from_usize(y + win.oy) + dy * half_h;
                let x0f = px.floor();
                let y0f = py.floor();
                let fx = px - x0f;
                let fy = py - y0f;
                let x0 = x0f.to_f64() as isize;
                let y0 = y0f.to_f64() as isize;

                // Local buffer index of a tap, None if it reads zero.
                let local = |iy: isize, ix: isize| -> Option<usize> {
                    if iy < 0 || ix < 0 || iy >= win.full_h as isize || ix >= win.full_w as isize {
                        return None;
                    }
                    let (ly, lx) = (iy as usize, ix as usize);
                    if ly < win.oy || lx < win.ox {
                        return None;
                    }
                    let (ly, lx) = (ly - win.oy, lx - win.ox);
                    if ly >= h || lx >= w {
                        return None;
                    }
                    Some(ly * w + lx)
                };
                let t00 = local(y0, x0);
                let t01 = local(y0, x0 + 1);
                let t10 = local(y0 + 1, x0);
                let t11 = local(y0 + 1, x0 + 1);

                let mut gpx = T::zero();
                let mut gpy = T::zero();
                for c in 0..ch {
                    let base = (b * ch + c) * plane;
                    let g = dout[base + y * w + x];
                    if g == T::zero() {
                        continue;
                    }
                    let splane = &source[base..base + plane];
                    let v = |t: Option<usize>| t.map_or(T::zero(), |i| splane[i]);
                    let (v00, v01, v10, v11) = (v(t00), v(t01), v(t10), v(t11));

                    if let Some(ds) = dsource.as_deref_mut() {
                        let dplane = &mut ds[base..base + plane];
                        let w00 = (one - fx) * (one - fy);
                        let w01 = fx * (one - fy);
                        let w10 = (one - fx) * fy;
                        let w11 = fx * fy;
                        if let Some(i) = t00 {
                            dplane[i] += g * w00;
                        }
                        if let Some(i) = t01 {
                            dplane[i] += g * w01;
                        }
                        if let Some(i) = t10 {
                            dplane[i] += g * w10;
                        }
                        if let Some(i) = t11 {
                            dplane[i] += g * w11;
                        }
                    }
                    if dfield.is_some() {
                        gpx += g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                        gpy += g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
                if let Some(df) = dfield.as_deref_mut() {
                    df[(b * 2) * plane + y * w + x] += gpx * half_w;
                    df[(b * 2 + 1) * plane + y * w + x] += gpy * half_h;
                }
            }
        }
    }
}

/// Per-axis tap table for corner-aligned 2x upsampling.
struct UpsampleAxis<T> {
    i0: Vec<usize>,
    i1: Vec<usize>,
    frac: Vec<T>,
}

fn upsample_axis<T: Scalar>(out_len: usize, out_origin: usize, full_in: usize, in_origin: usize, in_len: usize) -> UpsampleAxis<T> {
    // Corner-aligned: output position j maps to input coordinate
    // j * (full_in - 1) / (2*full_in - 1), computed in global coordinates.
    let scale = T::from_usize(full_in.saturating_sub(1)) / T::from_usize(2 * full_in - 1);
    let max_in = T::from_usize(full_in - 1);
    let mut axis = UpsampleAxis {
        i0: Vec::with_capacity(out_len),
        i1: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for j in 0..out_len {
        let u = (T::from_usize(j + out_origin) * scale).max(T::zero()).min(max_in);
        let u0 = u.floor();
        let frac = u - u0;
        let g0 = u0.to_f64() as usize;
        let g1 = (g0 + 1).min(full_in - 1);
        let l0 = g0.saturating_sub(in_origin).min(in_len - 1);
        let l1 = g1.saturating_sub(in_origin).min(in_len - 1);
        axis.i0.push(l0);
        axis.i1.push(l1);
        axis.frac.push(frac);
    }
    axis
}

/// Corner-aligned bilinear 2x upsampling of every plane; values are
/// interpolated, never rescaled, so constant inputs stay exactly constant.
/// `win` describes the input buffer; the output window is the doubled one.
pub fn upsample2x_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    win: Window,
    out: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let ya: UpsampleAxis<T> = upsample_axis(oh, 2 * win.oy, win.full_h, win.oy, h);
    let xa: UpsampleAxis<T> = upsample_axis(ow, 2 * win.ox, win.full_w, win.ox, w);
    for p in 0..planes {
        let iplane = &input[p * h * w..(p + 1) * h * w];
        let oplane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ya.i0[y], ya.i1[y], ya.frac[y]);
            let row0 = &iplane[y0 * w..(y0 + 1) * w];
            let row1 = &iplane[y1 * w..(y1 + 1) * w];
            let orow = &mut oplane[y * ow..(y + 1) * ow];
            for x in 0..ow {
                let (x0, x1, fx) = (xa.i0[x], xa.i1[x], xa.frac[x]);
                let top = lerp(row0[x0], row0[x1], fx);
                let bot = lerp(row1[x0], row1[x1], fx);
                orow[x] = lerp(top, bot, fy);
            }
        }
    }
}

/// Transpose of `upsample2x_forward`: scatters output gradients back onto
/// the input grid.
pub fn upsample2x_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    win: Window,
    dinput: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let ya: UpsampleAxis<T> = upsample_axis(oh, 2 * win.oy, win.full_h, win.oy, h);
    let xa: UpsampleAxis<T> = upsample_axis(ow, 2 * win.ox, win.full_w, win.ox, w);
    let one = T::one();
    for p in 0..planes {
        let oplane = &dout[p * oh * ow..(p + 1) * oh * ow];
        let iplane = &mut dinput[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ya.i0[y], ya.i1[y], ya.frac[y]);
            for x in 0..ow {
                let g = oplane[y * ow + x];
                if g == T::zero() {
                    continue;
                }
                let (x0, x1, fx) = (xa.i0[x], xa.i1[x], xa.frac[x]);
                iplane[y0 * w + x0] += g * (one - fy) * (one - fx);
                iplane[y0 * w + x1] += g * (one - fy) * fx;
                iplane[y1 * w + x0] += g * fy * (one - fx);
                iplane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}
