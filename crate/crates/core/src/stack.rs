//! Image stacks: ordered grayscale slices with 8-bit PNG interchange.
//!
//! Directory layout: `slice_0000.png`, `slice_0001.png`, ... plus optional
//! `truth_0000.smlt` displacement fields (field k aligns slice k+1 onto
//! slice k) and a `manifest.json` echo of the generator settings.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::tensor::Tensor;

/// Ordered stack of equally sized grayscale slices with values in [0, 1].
/// Zero-valued pixels mark missing data.
#[derive(Debug, Clone)]
pub struct ImageStack {
    slices: Vec<Tensor<f32>>,
}

impl ImageStack {
    pub fn new(slices: Vec<Tensor<f32>>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::EmptyDataset("stack with no slices".into()));
        }
        let dims = slices[0].shape().to_vec();
        for (i, s) in slices.iter().enumerate() {
            if s.rank() != 2 {
                return Err(Error::ShapeMismatch(format!("slice {i} rank {} != 2", s.rank())));
            }
            if s.shape() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "slice {i} dims {:?} != {:?}",
                    s.shape(),
                    dims
                )));
            }
        }
        Ok(ImageStack { slices })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.slices[0].shape()[0], self.slices[0].shape()[1])
    }

    pub fn slice(&self, i: usize) -> &Tensor<f32> {
        &self.slices[i]
    }

    pub fn slices(&self) -> &[Tensor<f32>] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<Tensor<f32>> {
        self.slices
    }

    /// Missing-data mask of a slice: true where the pixel is exactly zero.
    pub fn missing_mask(&self, i: usize) -> Vec<bool> {
        self.slices[i].data().iter().map(|&v| v == 0.0).collect()
    }
}

fn slice_name(i: usize) -> String {
    format!("slice_{i:04}.png")
}

fn truth_name(i: usize) -> String {
    format!("truth_{i:04}.smlt")
}

/// Quantize a [0,1] image to 8 bits and write it as a grayscale PNG.
pub fn save_image_png(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if img.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("png image must be (h,w), got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let bytes: Vec<u8> =
        img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("raw buffer matches dims");
    buf.save(path)?;
    Ok(())
}

/// Load a grayscale PNG mapping 8-bit values to [0, 1] by v/255.
pub fn load_image_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(&[h, w], data)
}

pub fn save_stack(dir: impl AsRef<Path>, stack: &ImageStack) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, slice) in stack.slices.iter().enumerate() {
        save_image_png(dir.join(slice_name(i)), slice)?;
    }
    Ok(())
}

pub fn save_truth_fields(dir: impl AsRef<Path>, fields: &[DisplacementField<f32>]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in fields.iter().enumerate() {
        f.save_smlt(dir.join(truth_name(i)))?;
    }
    Ok(())
}

/// Load `slice_####.png` files; numbering must be contiguous from zero and
/// dimensions uniform.
pub fn load_stack(dir: impl AsRef<Path>) -> Result<ImageStack> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut numbered: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix("slice_") {
            if let Some(num) = rest.strip_suffix(".png") {
                if let Ok(i) = num.parse::<usize>() {
                    numbered.push((i, entry.path()));
                }
            }
        }
    }
    if numbered.is_empty() {
        return Err(Error::EmptyDataset(format!("no slices in {}", dir.display())));
    }
    numbered.sort_by_key(|(i, _)| *i);
    for (expect, (i, path)) in numbered.iter().enumerate() {
        if *i != expect {
            return Err(Error::format(
                path.clone(),
                format!("non-contiguous slice numbering: expected {expect}, found {i}"),
            ));
        }
    }
    let slices: Vec<Tensor<f32>> =
        numbered.iter().map(|(_, p)| load_image_png(p)).collect::<Result<_>>()?;
    ImageStack::new(slices)
}

/// Load `truth_####.smlt` fields, if any are present.
pub fn load_truth_fields(dir: impl AsRef<Path>) -> Result<Vec<DisplacementField<f32>>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    loop {
        let path = dir.join(truth_name(out.len()));
        if !path.exists() {
            break;
        }
        out.push(DisplacementField::load_smlt(&path)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized(t: Tensor<f32>) -> Tensor<f32> {
        t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    #[test]
    fn png_round_trip_is_lossless_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantized(Tensor::from_fn(&[6, 5], |i| (i as f32 * 37.0 % 256.0) / 255.0));
        let path = dir.path().join("x.png");
        save_image_png(&path, &img).unwrap();
        let back = load_image_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn full_byte_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full(&[2, 2], 1.0f32);
        let path = dir.path().join("w.png");
        save_image_png(&path, &img).unwrap();
        let back = load_image_png(&path).unwrap();
        assert!(back.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let slices: Vec<Tensor<f32>> = (0..3)
            .map(|k| quantized(Tensor::from_fn(&[4, 4], |i| ((i + k) as f32 / 20.0).min(1.0))))
            .collect();
        let stack = ImageStack::new(slices).unwrap();
        save_stack(dir.path(), &stack).unwrap();
        let back = load_stack(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in stack.slices().iter().zip(back.slices()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        match load_stack(dir.path()) {
            Err(Error::EmptyDataset(msg)) => assert!(msg.contains("no slices")),
            other => panic!("expected empty-dataset error, got {other:?}"),
        }
    }

    #[test]
    fn gap_in_numbering_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full(&[2, 2], 0.5f32);
        save_image_png(dir.path().join("slice_0000.png"), &img).unwrap();
        save_image_png(dir.path().join("slice_0002.png"), &img).unwrap();
        assert!(load_stack(dir.path()).is_err());
    }

    #[test]
    fn mixed_dims_rejected() {
        let a = Tensor::<f32>::zeros(&[4, 4]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        assert!(ImageStack::new(vec![a, b]).is_err());
    }
}
