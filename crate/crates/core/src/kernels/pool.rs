//! 2x2 max and average pooling (stride 2, even input dims).

use crate::scalar::Scalar;

/// Max pooling. `argmax` receives, per output element, the flat index of the
/// winning input element; ties go to the first window position in row-major
/// order, which keeps the backward pass deterministic.
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut Vec<u32>,
) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    argmax.clear();
    argmax.reserve(planes * oh * ow);
    for p in 0..planes {
        let iplane = &input[p * h * w..(p + 1) * h * w];
        let oplane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i00 = (2 * y) * w + 2 * x;
                let i01 = i00 + 1;
                let i10 = i00 + w;
                let i11 = i10 + 1;
                let mut best = iplane[i00];
                let mut best_i = i00;
                if iplane[i01] > best {
                    best = iplane[i01];
                    best_i = i01;
                }
                if iplane[i10] > best {
                    best = iplane[i10];
                    best_i = i10;
                }
                if iplane[i11] > best {
                    best = iplane[i11];
                    best_i = i11;
                }
                oplane[y * ow + x] = best;
                argmax.push((p * h * w + best_i) as u32);
            }
        }
    }
}

pub fn maxpool_backward<T: Scalar>(dout: &[T], argmax: &[u32], dinput: &mut [T]) {
    for (g, &idx) in dout.iter().zip(argmax) {
        dinput[idx as usize] += *g;
    }
}

/// Average pooling. The window sum is ((v00+v01)+(v10+v11)) * 0.25; the
/// pairwise grouping keeps constant inputs exactly constant.
pub fn avgpool_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for p in 0..planes {
        let iplane = &input[p * h * w..(p + 1) * h * w];
        let oplane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i00 = (2 * y) * w + 2 * x;
                let top = iplane[i00] + iplane[i00 + 1];
                let bot = iplane[i00 + w] + iplane[i00 + w + 1];
                oplane[y * ow + x] = (top + bot) * quarter;
            }
        }
    }
}

pub fn avgpool_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize, dinput: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for p in 0..planes {
        let oplane = &dout[p * oh * ow..(p + 1) * oh * ow];
        let iplane = &mut dinput[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = oplane[y * ow + x] * quarter;
                let i00 = (2 * y) * w + 2 * x;
                iplane[i00] += g;
                iplane[i00 + 1] += g;
                iplane[i00 + w] += g;
                iplane[i00 + w + 1] += g;
            }
        }
    }
}

/// Repeated average pooling; `rounds` halvings of each spatial dim.
pub fn avgpool_n<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    rounds: usize,
) -> Vec<T> {
    let mut cur = input.to_vec();
    let (mut ch, mut cw) = (h, w);
    for _ in 0..rounds {
        let mut next = vec![T::zero(); planes * (ch / 2) * (cw / 2)];
        avgpool_forward(&cur, planes, ch, cw, &mut next);
        cur = next;
        ch /= 2;
        cw /= 2;
    }
    cur
}
