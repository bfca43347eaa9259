//! Image datasets: IDX parsing, resampling, batching, noisy targets and PGM
//! export.

mod idx;

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, IdxError, Result};
use crate::rng::Rng;

pub use idx::{encode_idx_images, parse_idx_images, IdxHeader, IDX_IMAGE_MAGIC};

/// Grayscale images with pixels in `[0, 1]`, stored row-major one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl ImageDataset {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.is_empty() {
            return Err(Error::Idx(IdxError::Empty));
        }
        if pixels.len() % (rows * cols) != 0 {
            return Err(shape_err("ImageDataset pixels", format!("a multiple of {}", rows * cols), pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(parse_idx_images(&bytes)?)
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Pixels per image.
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.dim()..(i + 1) * self.dim()]
    }

    /// The first `n` images.
    pub fn subset(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset of {n} images from a dataset of {}",
                self.len()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..n * self.dim()].to_vec(),
        })
    }

    /// Images `indices` as rows of a `[b × dim]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("image index {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.dim()], data)
    }

    /// Area-weighted box filter to `rows × cols`: every output pixel is the mean
    /// of the input region it covers, with partially covered input pixels
    /// weighted by the overlap.
    pub fn downsample(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > self.rows || cols > self.cols {
            return Err(Error::InvalidArgument(format!(
                "cannot downsample {}×{} to {rows}×{cols}",
                self.rows, self.cols
            )));
        }
        let wr = box_weights(self.rows, rows);
        let wc = box_weights(self.cols, cols);
        let mut out = Vec::with_capacity(self.len() * rows * cols);
        let mut tmp = vec![0.0; rows * self.cols];
        for k in 0..self.len() {
            let img = self.image(k);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for (o, row_w) in wr.iter().enumerate() {
                for &(i, w) in row_w {
                    for c in 0..self.cols {
                        tmp[o * self.cols + c] += w * img[i * self.cols + c];
                    }
                }
            }
            for o in 0..rows {
                for col_w in &wc {
                    let v: f64 = col_w.iter().map(|&(c, w)| w * tmp[o * self.cols + c]).sum();
                    out.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            pixels: out,
        })
    }
}

/// Sparse `(input index, weight)` lists mapping `n_in` cells onto `n_out`.
fn box_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(n_in))
                .filter_map(|i| {
                    let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                    (overlap > 0.0).then(|| (i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// `αξ + (1−α)ε` with fresh `ε ~ N(0, I)`. The noise is drawn even for `α = 1`
/// so the generator stream does not depend on `α`.
pub fn noisy_mix(xi: &Tensor, alpha: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("mix weight α must lie in (0, 1], got {alpha}")));
    }
    let data = xi
        .data()
        .iter()
        .map(|&x| {
            let e = rng.normal();
            if alpha == 1.0 {
                x
            } else {
                alpha * x + (1.0 - alpha) * e
            }
        })
        .collect();
    Tensor::new(xi.shape().to_vec(), data)
}

/// One epoch: a seeded permutation of `0..count` cut into full batches.
pub fn epoch_batches(count: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > count {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} must lie in 1..={count}"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless batch stream, reshuffling at every epoch boundary.
#[derive(Clone, Debug)]
pub struct BatchIter {
    count: usize,
    batch_size: usize,
    rng: Rng,
    pending: std::vec::IntoIter<Vec<usize>>,
    epoch: usize,
}

impl BatchIter {
    pub fn new(count: usize, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 || batch_size > count {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} must lie in 1..={count}"
            )));
        }
        Ok(Self {
            count,
            batch_size,
            rng,
            pending: Vec::new().into_iter(),
            epoch: 0,
        })
    }

    /// Completed epochs, counting the one in progress.
    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        let batches = epoch_batches(self.count, self.batch_size, &mut self.rng).expect("validated in new");
        self.epoch += 1;
        self.pending = batches.into_iter();
        self.pending.next()
    }
}

/// Binary PGM: `P5\n{cols} {rows}\n255\n` followed by
/// `round(clamp(v, 0, 1)·255)` per pixel, ties rounded away from zero.
pub fn export_pgm(image: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if image.len() != rows * cols {
        return Err(shape_err("export_pgm", rows * cols, image.len()));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("export_pgm"));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}
