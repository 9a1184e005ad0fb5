//! Direct 2D convolution (stride 1, square odd kernel, zero padding) and its
//! gradients. Parallel over independent output planes; the accumulation order
//! within each output element is fixed (in-channel, then kernel row/col).

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// out[b,oc,y,x] = bias[oc] + sum_{ic,ky,kx} w[oc,ic,ky,kx] * in[b,ic,y+ky-pad,x+kx-pad]
pub fn forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: ConvGeom, out: &mut [T]) {
    let plane = g.plane();
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, oplane)| {
        let b = idx / g.out_ch;
        let oc = idx % g.out_ch;
        let in_base = b * g.in_ch * plane;
        let w_base = oc * g.in_ch * k * k;
        oplane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..g.in_ch {
            let iplane = &input[in_base + ic * plane..in_base + (ic + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[w_base + (ic * k + ky) * k + kx];
                    // x + kx - pad must land in [0, w)
                    let x0 = pad.saturating_sub(kx);
                    let x1 = (w + pad).saturating_sub(kx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let len = x1 - x0;
                    let in_x0 = x0 + kx - pad;
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * w + in_x0..iy as usize * w + in_x0 + len];
                        let orow = &mut oplane[y * w + x0..y * w + x1];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates dL/d(input) into `dinput` (caller supplies a zeroed or
/// partially accumulated buffer).
pub fn backward_input<T: Scalar>(dout: &[T], weight: &[T], g: ConvGeom, dinput: &mut [T]) {
    let plane = g.plane();
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    dinput.par_chunks_mut(plane).enumerate().for_each(|(idx, iplane)| {
        let b = idx / g.in_ch;
        let ic = idx % g.in_ch;
        let dout_base = b * g.out_ch * plane;
        for oc in 0..g.out_ch {
            let oplane = &dout[dout_base + oc * plane..dout_base + (oc + 1) * plane];
            let w_base = oc * g.in_ch * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[w_base + (ic * k + ky) * k + kx];
                    // ox = ix + pad - kx must land in [0, w)
                    let x0 = kx.saturating_sub(pad);
                    let x1 = (w + kx).saturating_sub(pad).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let len = x1 - x0;
                    let out_x0 = x0 + pad - kx;
                    for iy in 0..h {
                        let oy = iy as isize + pad as isize - ky as isize;
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        let orow =
                            &oplane[oy as usize * w + out_x0..oy as usize * w + out_x0 + len];
                        let irow = &mut iplane[iy * w + x0..iy * w + x1];
                        for (i, &o) in irow.iter_mut().zip(orow) {
                            *i += wv * o;
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates dL/d(weight) into `dweight`.
pub fn backward_weight<T: Scalar>(dout: &[T], input: &[T], g: ConvGeom, dweight: &mut [T]) {
    let plane = g.plane();
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let kk = k * k;
    dweight.par_chunks_mut(kk).enumerate().for_each(|(idx, wchunk)| {
        let oc = idx / g.in_ch;
        let ic = idx % g.in_ch;
        for ky in 0..k {
            for kx in 0..k {
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                let len = x1 - x0;
                let in_x0 = x0 + kx - pad;
                let mut acc = T::zero();
                for b in 0..g.batch {
                    let oplane = &dout[(b * g.out_ch + oc) * plane..(b * g.out_ch + oc + 1) * plane];
                    let iplane = &input[(b * g.in_ch + ic) * plane..(b * g.in_ch + ic + 1) * plane];
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let orow = &oplane[y * w + x0..y * w + x1];
                        let irow = &iplane[iy as usize * w + in_x0..iy as usize * w + in_x0 + len];
                        for (&o, &i) in orow.iter().zip(irow) {
                            acc += o * i;
                        }
                    }
                }
                wchunk[ky * k + kx] += acc;
            }
        }
    });
}

/// Accumulates dL/d(bias) into `dbias`.
pub fn backward_bias<T: Scalar>(dout: &[T], g: ConvGeom, dbias: &mut [T]) {
    let plane = g.plane();
    dbias.par_iter_mut().enumerate().for_each(|(oc, db)| {
        let mut acc = T::zero();
        for b in 0..g.batch {
            let oplane = &dout[(b * g.out_ch + oc) * plane..(b * g.out_ch + oc + 1) * plane];
            for &v in oplane {
                acc += v;
            }
        }
        *db += acc;
    });
}
