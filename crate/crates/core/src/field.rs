//! Displacement fields and normalized-coordinate geometry.
//!
//! A field stores one 2-vector per pixel, (dx, dy), in normalized units: the
//! canvas spans [-1, 1] per axis with corner pixel centers exactly at the
//! endpoints, so adjacent pixels are 2/(size-1) apart. The transform applied
//! by [`warp`] samples the source at r + D(r); the identity transform is the
//! all-zero field.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::sample;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::kernels::sample::Window;

/// Per-pixel displacement vectors, stored as a (2, h, w) tensor with
/// channel 0 = dx and channel 1 = dy.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T> {
    t: Tensor<T>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        DisplacementField { t: Tensor::zeros(&[2, h, w]) }
    }

    pub fn constant(dx: T, dy: T, h: usize, w: usize) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        let plane = h * w;
        t.data_mut()[..plane].iter_mut().for_each(|v| *v = dx);
        t.data_mut()[plane..].iter_mut().for_each(|v| *v = dy);
        DisplacementField { t }
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "displacement field must be (2,h,w), got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("displacement field entries".into()));
        }
        Ok(DisplacementField { t })
    }

    pub fn h(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.t
    }

    pub fn dx(&self, y: usize, x: usize) -> T {
        self.t.at3(0, y, x)
    }

    pub fn dy(&self, y: usize, x: usize) -> T {
        self.t.at3(1, y, x)
    }

    pub fn set(&mut self, y: usize, x: usize, dx: T, dy: T) {
        self.t.set3(0, y, x, dx);
        self.t.set3(1, y, x, dy);
    }

    /// View as a batch-1 rank-4 tensor (1, 2, h, w).
    pub fn to_batched(&self) -> Tensor<T> {
        self.t.reshaped(&[1, 2, self.h(), self.w()]).expect("rank-3 field")
    }

    pub fn from_batched(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 4 || t.shape()[0] != 1 || t.shape()[1] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected (1,2,h,w) field tensor, got {:?}",
                t.shape()
            )));
        }
        Self::from_tensor(t.reshaped(&[2, t.shape()[2], t.shape()[3]])?)
    }

    /// Largest displacement magnitude, converted to pixels of this field's
    /// own canvas.
    pub fn max_abs_px(&self) -> f64 {
        let half_w = sample::half_span::<T>(self.w()).to_f64();
        let half_h = sample::half_span::<T>(self.h()).to_f64();
        let plane = self.h() * self.w();
        let mut best = 0.0f64;
        for i in 0..plane {
            let dx = self.t.data()[i].to_f64().abs() * half_w;
            let dy = self.t.data()[plane + i].to_f64().abs() * half_h;
            best = best.max(dx).max(dy);
        }
        best
    }

    pub fn save_smlt(&self, path: impl AsRef<Path>) -> Result<()> {
        self.t.save_smlt(path)
    }

    pub fn load_smlt(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(Tensor::load_smlt(path)?)
    }
}

/// Pixel offset converted to normalized units: d * 2/(size-1).
pub fn pixels_to_normalized(d_pixels: f64, size: usize) -> Result<f64> {
    if size < 2 {
        return Err(Error::InvalidArgument(format!(
            "pixels_to_normalized requires size >= 2, got {size}"
        )));
    }
    Ok(d_pixels * 2.0 / (size - 1) as f64)
}

/// Normalized pixel-center coordinates as a (2, h, w) tensor, channel 0 the
/// x coordinate and channel 1 the y coordinate. Corner pixel centers map
/// exactly to -1 and +1 on each axis.
pub fn coordinate_grid<T: Scalar>(h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("coordinate grid needs dims >= 2, got {h}x{w}")));
    }
    let mut t = Tensor::zeros(&[2, h, w]);
    let coord = |i: usize, n: usize| -> T {
        // 2i/(n-1) - 1 evaluates exactly to -1 and 1 at the corners
        T::from_usize(2 * i) / T::from_usize(n - 1) - T::one()
    };
    for y in 0..h {
        for x in 0..w {
            t.set3(0, y, x, coord(x, w));
            t.set3(1, y, x, coord(y, h));
        }
    }
    Ok(t)
}

/// Bilinear warp of a rank-2 (h, w) or rank-3 (c, h, w) source by a field of
/// matching spatial dims. Samples beyond the canvas read zero.
pub fn warp<T: Scalar>(source: &Tensor<T>, field: &DisplacementField<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match source.rank() {
        2 => (1, source.shape()[0], source.shape()[1]),
        3 => (source.shape()[0], source.shape()[1], source.shape()[2]),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "warp source must be rank 2 or 3, got {:?}",
                source.shape()
            )))
        }
    };
    if field.h() != h || field.w() != w {
        return Err(Error::ShapeMismatch(format!(
            "warp: source {h}x{w} vs field {}x{}",
            field.h(),
            field.w()
        )));
    }
    let mut out = Tensor::zeros(source.shape());
    sample::warp_forward(
        source.data(),
        1,
        c,
        h,
        w,
        field.tensor().data(),
        Window::full(h, w),
        out.data_mut(),
    );
    Ok(out)
}

/// Doubles the spatial dims of a field by corner-aligned bilinear
/// interpolation; displacement values are interpolated, never rescaled.
pub fn upsample_field<T: Scalar>(field: &DisplacementField<T>) -> DisplacementField<T> {
    let (h, w) = (field.h(), field.w());
    let mut out = Tensor::zeros(&[2, 2 * h, 2 * w]);
    sample::upsample2x_forward(
        field.tensor().data(),
        2,
        h,
        w,
        Window::full(h, w),
        out.data_mut(),
    );
    DisplacementField { t: out }
}

/// Elementwise sum of a residual and an (already upsampled) parent field.
pub fn compose_residual<T: Scalar>(
    residual: &DisplacementField<T>,
    parent_up: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    if residual.h() != parent_up.h() || residual.w() != parent_up.w() {
        return Err(Error::ShapeMismatch(format!(
            "compose_residual: {}x{} vs {}x{}",
            residual.h(),
            residual.w(),
            parent_up.h(),
            parent_up.w()
        )));
    }
    Ok(DisplacementField { t: crate::tensor::add(residual.tensor(), parent_up.tensor())? })
}

/// Mean Euclidean distance between two fields, in pixels of their canvas.
pub fn mean_endpoint_error_px<T: Scalar>(
    a: &DisplacementField<T>,
    b: &DisplacementField<T>,
) -> Result<f64> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::ShapeMismatch(format!(
            "endpoint error: {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let half_w = sample::half_span::<T>(a.w()).to_f64();
    let half_h = sample::half_span::<T>(a.h()).to_f64();
    let plane = a.h() * a.w();
    let (da, db) = (a.tensor().data(), b.tensor().data());
    let mut total = 0.0f64;
    for i in 0..plane {
        let ex = (da[i].to_f64() - db[i].to_f64()) * half_w;
        let ey = (da[plane + i].to_f64() - db[plane + i].to_f64()) * half_h;
        total += (ex * ex + ey * ey).sqrt();
    }
    Ok(total / plane as f64)
}
