//! Fixed-length mask embeddings from a fitted principal subspace.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use tdla_core::{BBox, Bitmap};

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("embedding dimension {dim} exceeds patch size {pixels}")]
    DimTooLarge { dim: usize, pixels: usize },
    #[error("need at least one training mask")]
    NoMasks,
    #[error("patch has {got} values, expected {want}")]
    PatchSize { got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCodec {
    /// Patch side length.
    pub m: usize,
    pub dim: usize,
    /// Per-pixel mean, length `m·m`.
    pub mean: Vec<f64>,
    /// Orthonormal rows, `dim × m·m` row-major.
    pub basis: Vec<f64>,
    /// Mean squared reconstruction error over the training patches.
    pub residual: f64,
}

impl MaskCodec {
    /// Top-`dim` components of the centered training patches.
    pub fn fit(patches: &[Vec<f64>], m: usize, dim: usize) -> Result<Self, CodecError> {
        let p = m * m;
        if dim > p {
            return Err(CodecError::DimTooLarge { dim, pixels: p });
        }
        if patches.is_empty() {
            return Err(CodecError::NoMasks);
        }
        if let Some(bad) = patches.iter().find(|x| x.len() != p) {
            return Err(CodecError::PatchSize { got: bad.len(), want: p });
        }
        let n = patches.len() as f64;
        let mut mean = vec![0.0; p];
        for x in patches {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let centered = DMatrix::from_fn(patches.len(), p, |i, j| patches[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut basis = Vec::with_capacity(dim * p);
        for &k in &order[..dim] {
            let col = eig.eigenvectors.column(k);
            // sign convention: largest-magnitude entry positive
            let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            basis.extend(col.iter().map(|v| v * s));
        }
        let residual = order[dim..].iter().map(|&k| eig.eigenvalues[k].max(0.0)).sum();
        Ok(Self { m, dim, mean, basis, residual })
    }

    pub fn pixels(&self) -> usize {
        self.m * self.m
    }

    pub fn encode(&self, patch: &[f64]) -> Vec<f64> {
        let p = self.pixels();
        assert_eq!(patch.len(), p);
        (0..self.dim)
            .map(|k| self.basis[k * p..(k + 1) * p].iter().zip(patch).zip(&self.mean).map(|((b, x), m)| b * (x - m)).sum())
            .collect()
    }

    /// Continuous reconstruction; threshold at 0.5 for a binary patch.
    pub fn decode(&self, code: &[f64]) -> Vec<f64> {
        let p = self.pixels();
        let mut out = self.mean.clone();
        for (k, &v) in code.iter().enumerate().take(self.dim) {
            out.iter_mut().zip(&self.basis[k * p..(k + 1) * p]).for_each(|(o, b)| *o += v * b);
        }
        out
    }

    pub fn decode_binary(&self, code: &[f64]) -> Vec<bool> {
        self.decode(code).into_iter().map(|v| v >= 0.5).collect()
    }

    /// Decode into a page raster occupying `b`, sampling the patch
    /// bilinearly at pixel centers.
    pub fn paste(&self, code: &[f64], b: &BBox, width: u32, height: u32) -> Bitmap {
        let patch = self.decode(code);
        paste_patch(&patch, self.m, b, width, height)
    }
}

/// Resample the part of `mask` inside `b` to an `m × m` patch of 0/1
/// values, reading the pixel under each patch cell center.
pub fn crop_patch(mask: &Bitmap, b: &BBox, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    let (bw, bh) = (b.width(), b.height());
    for i in 0..m {
        let y = b.y_min + (i as f64 + 0.5) * bh / m as f64;
        for j in 0..m {
            let x = b.x_min + (j as f64 + 0.5) * bw / m as f64;
            if x >= 0.0 && y >= 0.0 && mask.get(x.floor() as u32, y.floor() as u32) {
                out[i * m + j] = 1.0;
            }
        }
    }
    out
}

/// Threshold a continuous patch stretched over `b` at 0.5.
pub fn paste_patch(patch: &[f64], m: usize, b: &BBox, width: u32, height: u32) -> Bitmap {
    let x0 = b.x_min.floor().max(0.0) as u32;
    let y0 = b.y_min.floor().max(0.0) as u32;
    let x1 = (b.x_max.ceil().max(0.0) as u32).min(width);
    let y1 = (b.y_max.ceil().max(0.0) as u32).min(height);
    let mut bm = Bitmap::with_window(width, height, x0.min(x1), y0.min(y1), x1, y1);
    let (bw, bh) = (b.width(), b.height());
    if bw <= 0.0 || bh <= 0.0 {
        return bm;
    }
    let at = |i: isize, j: isize| patch[i.clamp(0, m as isize - 1) as usize * m + j.clamp(0, m as isize - 1) as usize];
    for py in y0..y1 {
        let cy = py as f64 + 0.5;
        if cy < b.y_min || cy >= b.y_max {
            continue;
        }
        let v = (cy - b.y_min) / bh * m as f64 - 0.5;
        for px in x0..x1 {
            let cx = px as f64 + 0.5;
            if cx < b.x_min || cx >= b.x_max {
                continue;
            }
            let u = (cx - b.x_min) / bw * m as f64 - 0.5;
            let (iu, iv) = (u.floor(), v.floor());
            let (fu, fv) = (u - iu, v - iv);
            let (iu, iv) = (iu as isize, iv as isize);
            let val = at(iv, iu) * (1.0 - fu) * (1.0 - fv)
                + at(iv, iu + 1) * fu * (1.0 - fv)
                + at(iv + 1, iu) * (1.0 - fu) * fv
                + at(iv + 1, iu + 1) * fu * fv;
            if val >= 0.5 {
                bm.set(px, py, true);
            }
        }
    }
    bm
}
