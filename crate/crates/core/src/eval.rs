//! Alignment quality evaluation: serial stack alignment, the chunked
//! Pearson correlation metric, and quantile-quantile comparison data.
//!
//! Each aligned slice is scored against its predecessor chunk by chunk;
//! chunks touching missing data (zero pixels) are discarded rather than
//! allowed to distort the score.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::warp;
use crate::model::ModelParams;
use crate::stack::ImageStack;
use crate::tensor::Tensor;

/// Align a stack slice by slice: slice 0 is fixed; every subsequent slice is
/// warped by the model's finest field against the previously aligned slice.
pub fn align_stack(stack: &ImageStack, model: &ModelParams<f32>) -> Result<ImageStack> {
    let mut aligned: Vec<Tensor<f32>> = Vec::with_capacity(stack.len());
    aligned.push(stack.slice(0).clone());
    for k in 0..stack.len() - 1 {
        let source = stack.slice(k + 1);
        let field = model.infer_finest(source, &aligned[k])?;
        aligned.push(warp(source, &field)?);
    }
    ImageStack::new(aligned)
}

/// Two-pass Pearson correlation coefficient; `None` when either side has
/// zero variance (the coefficient is undefined there).
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson needs equal-size chunks");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One retained coefficient with its provenance.
#[derive(Debug, Clone, Serialize)]
pub struct ChunkCoef {
    /// Earlier slice index of the pair (k, k+1).
    pub slice: usize,
    /// Chunk row.
    pub i: usize,
    /// Chunk column.
    pub j: usize,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CpcSummary {
    pub mean: f64,
    pub variance: f64,
    pub p1: f64,
    pub p5: f64,
    pub p95: f64,
    pub p99: f64,
}

#[derive(Debug, Clone)]
pub struct CpcReport {
    /// Label for provenance in CSV output.
    pub stack: String,
    pub coefficients: Vec<ChunkCoef>,
    /// Chunks dropped because they contained missing data.
    pub discarded_missing: usize,
    /// Chunks dropped because a side had zero variance.
    pub discarded_degenerate: usize,
}

impl CpcReport {
    pub fn discard_count(&self) -> usize {
        self.discarded_missing + self.discarded_degenerate
    }

    pub fn values(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.r).collect()
    }

    pub fn mean(&self) -> f64 {
        let v = self.values();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn summary(&self) -> Result<CpcSummary> {
        if self.coefficients.is_empty() {
            return Err(Error::EmptyDataset("summary of empty report".into()));
        }
        let mut v = self.values();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let variance = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        Ok(CpcSummary {
            mean,
            variance,
            p1: quantile_sorted(&v, 0.01),
            p5: quantile_sorted(&v, 0.05),
            p95: quantile_sorted(&v, 0.95),
            p99: quantile_sorted(&v, 0.99),
        })
    }

    /// CSV rows (stack, k, i, j, r) with a summary footer in comment lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stack,k,i,j,r\n");
        for c in &self.coefficients {
            out.push_str(&format!("{},{},{},{},{}\n", self.stack, c.slice, c.i, c.j, c.r));
        }
        if let Ok(s) = self.summary() {
            out.push_str(&format!(
                "# mean={} variance={} p1={} p5={} p95={} p99={}\n",
                s.mean, s.variance, s.p1, s.p5, s.p95, s.p99
            ));
        }
        out.push_str(&format!(
            "# discarded_missing={} discarded_degenerate={} kept={}\n",
            self.discarded_missing,
            self.discarded_degenerate,
            self.coefficients.len()
        ));
        out
    }
}

/// Side of one chunk when a slice is split into `grid` x `grid` equal
/// chunks; trailing remainder pixels are dropped.
pub fn chunk_side(size: usize, grid: usize) -> usize {
    size / grid
}

/// Chunked Pearson correlation over consecutive slice pairs.
pub fn cpc(stack: &ImageStack, grid: usize) -> Result<CpcReport> {
    cpc_named(stack, grid, "stack")
}

pub fn cpc_named(stack: &ImageStack, grid: usize, name: &str) -> Result<CpcReport> {
    if grid < 1 {
        return Err(Error::InvalidArgument("cpc grid must be >= 1".into()));
    }
    let (h, w) = stack.dims();
    let (ch, cw) = (chunk_side(h, grid), chunk_side(w, grid));
    if ch == 0 || cw == 0 {
        return Err(Error::InvalidArgument(format!(
            "slice {h}x{w} smaller than a {grid}x{grid} chunk grid"
        )));
    }

    // chunk pairs are independent; provenance order is restored by collecting
    // per-pair results in index order
    let jobs: Vec<(usize, usize, usize)> = (0..stack.len().saturating_sub(1))
        .flat_map(|k| (0..grid).flat_map(move |i| (0..grid).map(move |j| (k, i, j))))
        .collect();

    enum Outcome {
        Kept(ChunkCoef),
        Missing,
        Degenerate,
    }

    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|&(k, i, j)| {
            let mut x = Vec::with_capacity(ch * cw);
            let mut y = Vec::with_capacity(ch * cw);
            let mut missing = false;
            let (a, b) = (stack.slice(k), stack.slice(k + 1));
            for yy in i * ch..(i + 1) * ch {
                for xx in j * cw..(j + 1) * cw {
                    let va = a.at2(yy, xx);
                    let vb = b.at2(yy, xx);
                    if va == 0.0 || vb == 0.0 {
                        missing = true;
                    }
                    x.push(va as f64);
                    y.push(vb as f64);
                }
            }
            if missing {
                return Outcome::Missing;
            }
            match pearson(&x, &y) {
                Some(r) => Outcome::Kept(ChunkCoef { slice: k, i, j, r }),
                None => Outcome::Degenerate,
            }
        })
        .collect();

    let mut report = CpcReport {
        stack: name.to_string(),
        coefficients: Vec::new(),
        discarded_missing: 0,
        discarded_degenerate: 0,
    };
    for o in outcomes {
        match o {
            Outcome::Kept(c) => report.coefficients.push(c),
            Outcome::Missing => report.discarded_missing += 1,
            Outcome::Degenerate => report.discarded_degenerate += 1,
        }
    }
    Ok(report)
}

/// Linear-interpolated empirical quantile of a sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Matched empirical quantiles of two coefficient distributions:
/// (quantile, value_a, value_b) rows, quantiles i/(count+1) for i=1..count.
pub fn qq_data(a: &CpcReport, b: &CpcReport, quantile_count: usize) -> Result<Vec<(f64, f64, f64)>> {
    if a.coefficients.is_empty() || b.coefficients.is_empty() {
        return Err(Error::EmptyDataset("qq_data on empty report".into()));
    }
    let mut va = a.values();
    let mut vb = b.values();
    va.sort_by(|x, y| x.partial_cmp(y).unwrap());
    vb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok((1..=quantile_count)
        .map(|i| {
            let q = i as f64 / (quantile_count + 1) as f64;
            (q, quantile_sorted(&va, q), quantile_sorted(&vb, q))
        })
        .collect())
}

/// CSV for a set of named quantile columns sharing the same q grid.
pub fn qq_csv(columns: &[(&str, &CpcReport)], quantile_count: usize) -> Result<String> {
    if columns.is_empty() {
        return Err(Error::EmptyDataset("qq_csv with no columns".into()));
    }
    let mut sorted: Vec<Vec<f64>> = Vec::new();
    for (_, rep) in columns {
        if rep.coefficients.is_empty() {
            return Err(Error::EmptyDataset("qq_csv on empty report".into()));
        }
        let mut v = rep.values();
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        sorted.push(v);
    }
    let mut out = String::from("quantile");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 1..=quantile_count {
        let q = i as f64 / (quantile_count + 1) as f64;
        out.push_str(&format!("{q}"));
        for v in &sorted {
            out.push_str(&format!(",{}", quantile_sorted(v, q)));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Mean squared error between two slices over an interior crop, skipping a
/// `crop` pixel border on every side.
pub fn interior_mse(a: &Tensor<f32>, b: &Tensor<f32>, crop: usize) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "interior_mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h <= 2 * crop || w <= 2 * crop {
        return Err(Error::InvalidArgument(format!("crop {crop} swallows the {h}x{w} image")));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in crop..h - crop {
        for x in crop..w - crop {
            let d = a.at2(y, x) as f64 - b.at2(y, x) as f64;
            acc += d * d;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Mean MSE between consecutive slices of a stack, interior-cropped.
pub fn consecutive_mse(stack: &ImageStack, crop: usize) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..stack.len() - 1 {
        total += interior_mse(stack.slice(k), stack.slice(k + 1), crop)?;
    }
    Ok(total / (stack.len() - 1) as f64)
}

pub use crate::loss::mse_value;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn pearson_known_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);

        assert!((pearson(&[1.0, 2.0], &[2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);

        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_chunks_are_undefined() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        assert!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).is_none());
    }

    #[test]
    fn pearson_identical_chunks_give_exactly_one() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin() + 2.0).collect();
        assert_eq!(pearson(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn table_chunk_side() {
        assert_eq!(chunk_side(1132, 12), 94); // 4 remainder pixels dropped
        assert_eq!(chunk_side(96, 12), 8);
    }

    #[test]
    fn cpc_identical_slices_mean_exactly_one() {
        let slice = Tensor::from_fn(&[24, 24], |i| ((i * 7919 % 251) as f32 + 1.0) / 252.0);
        let stack = ImageStack::new(vec![slice.clone(), slice.clone(), slice]).unwrap();
        let report = cpc(&stack, 4).unwrap();
        assert_eq!(report.discard_count(), 0);
        assert_eq!(report.coefficients.len(), 2 * 16);
        assert!(report.coefficients.iter().all(|c| c.r == 1.0));
        assert_eq!(report.mean(), 1.0);
    }

    #[test]
    fn chunks_with_missing_data_are_discarded_and_counted() {
        let mut a = Tensor::from_fn(&[16, 16], |i| (i as f32 % 13.0 + 1.0) / 14.0);
        let b = a.clone();
        a.set2(3, 3, 0.0); // one missing pixel in chunk (0,0) of slice 0
        let stack = ImageStack::new(vec![a, b]).unwrap();
        let report = cpc(&stack, 4).unwrap();
        assert_eq!(report.discarded_missing, 1);
        assert_eq!(report.coefficients.len(), 15);
    }

    #[test]
    fn slice_smaller_than_grid_errors() {
        let s = Tensor::full(&[4, 4], 0.5f32);
        let stack = ImageStack::new(vec![s.clone(), s]).unwrap();
        assert!(cpc(&stack, 5).is_err());
    }

    #[test]
    fn qq_self_is_diagonal_and_shift_offsets_one_axis() {
        let slice = Tensor::from_fn(&[24, 24], |i| ((i * 131 % 97) as f32 + 1.0) / 98.0);
        let next = Tensor::from_fn(&[24, 24], |i| ((i * 17 % 89) as f32 + 1.0) / 90.0);
        let stack = ImageStack::new(vec![slice, next]).unwrap();
        let report = cpc(&stack, 4).unwrap();

        for (_, qa, qb) in qq_data(&report, &report, 19).unwrap() {
            assert_eq!(qa, qb);
        }

        let mut shifted = report.clone();
        for c in shifted.coefficients.iter_mut() {
            c.r += 0.1;
        }
        for (_, qa, qb) in qq_data(&report, &shifted, 19).unwrap() {
            assert!((qb - qa - 0.1).abs() < 1e-12);
        }

        let empty = CpcReport {
            stack: "e".into(),
            coefficients: vec![],
            discarded_missing: 0,
            discarded_degenerate: 0,
        };
        assert!(qq_data(&report, &empty, 9).is_err());
    }

    #[test]
    fn identity_model_align_stack_is_identity() {
        let mut params = ModelParams::<f32>::zeros(ModelConfig { levels: 1, ..Default::default() });
        params.config.levels = 1;
        let slice = Tensor::from_fn(&[16, 16], |i| ((i % 11) as f32 + 1.0) / 12.0);
        let s2 = slice.map(|v| (v * 0.9).max(0.05));
        let stack = ImageStack::new(vec![slice, s2]).unwrap();
        let aligned = align_stack(&stack, &params).unwrap();
        for k in 0..stack.len() {
            assert_eq!(aligned.slice(k), stack.slice(k));
        }

        let single = ImageStack::new(vec![stack.slice(0).clone()]).unwrap();
        let out = align_stack(&single, &params).unwrap();
        assert_eq!(out.len(), 1);
    }
}
