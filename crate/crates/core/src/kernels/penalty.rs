//! Nonsmoothness penalty: sum of squared centered differences of a
//! displacement field over pixel pairs two apart horizontally or vertically.
//! A pair is dropped when either endpoint or the pixel between them is
//! masked.

use crate::scalar::Scalar;

/// Forward value, summed over the batch. `mask` is (batch, h, w), true where
/// the penalty is eliminated.
pub fn smoothness_forward<T: Scalar>(
    field: &[T],
    batch: usize,
    h: usize,
    w: usize,
    mask: Option<&[bool]>,
) -> T {
    let plane = h * w;
    let mut total = T::zero();
    for b in 0..batch {
        let dx = &field[(b * 2) * plane..(b * 2 + 1) * plane];
        let dy = &field[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
        let m = mask.map(|m| &m[b * plane..(b + 1) * plane]);
        let blocked = |i: usize, j: usize, k: usize| -> bool {
            m.is_some_and(|m| m[i] || m[j] || m[k])
        };
        for y in 0..h {
            for x in 0..w.saturating_sub(2) {
                let i = y * w + x;
                if blocked(i, i + 1, i + 2) {
                    continue;
                }
                let ddx = dx[i] - dx[i + 2];
                let ddy = dy[i] - dy[i + 2];
                total += ddx * ddx + ddy * ddy;
            }
        }
        for y in 0..h.saturating_sub(2) {
            for x in 0..w {
                let i = y * w + x;
                if blocked(i, i + w, i + 2 * w) {
                    continue;
                }
                let ddx = dx[i] - dx[i + 2 * w];
                let ddy = dy[i] - dy[i + 2 * w];
                total += ddx * ddx + ddy * ddy;
            }
        }
    }
    total
}

/// Accumulates d(penalty)/d(field) times `gout` into `dfield`.
pub fn smoothness_backward<T: Scalar>(
    field: &[T],
    batch: usize,
    h: usize,
    w: usize,
    mask: Option<&[bool]>,
    gout: T,
    dfield: &mut [T],
) {
    let plane = h * w;
    let two = T::from_f64(2.0);
    for b in 0..batch {
        let base_x = (b * 2) * plane;
        let base_y = (b * 2 + 1) * plane;
        let m = mask.map(|m| &m[b * plane..(b + 1) * plane]);
        let blocked = |i: usize, j: usize, k: usize| -> bool {
            m.is_some_and(|m| m[i] || m[j] || m[k])
        };
        for y in 0..h {
            for x in 0..w.saturating_sub(2) {
                let i = y * w + x;
                if blocked(i, i + 1, i + 2) {
                    continue;
                }
                for base in [base_x, base_y] {
                    let d = field[base + i] - field[base + i + 2];
                    let g = gout * two * d;
                    dfield[base + i] += g;
                    dfield[base + i + 2] -= g;
                }
            }
        }
        for y in 0..h.saturating_sub(2) {
            for x in 0..w {
                let i = y * w + x;
                if blocked(i, i + w, i + 2 * w) {
                    continue;
                }
                for base in [base_x, base_y] {
                    let d = field[base + i] - field[base + i + 2 * w];
                    let g = gout * two * d;
                    dfield[base + i] += g;
                    dfield[base + i + 2 * w] -= g;
                }
            }
        }
    }
}
