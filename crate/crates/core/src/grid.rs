//! Dense 2-d raster types shared across the pipeline.

use crate::error::{Error, Result};

/// Grayscale image with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "Image::new",
                detail: format!("{}x{} grid needs {} values, got {}", h, w, h * w, data.len()),
            });
        }
        Ok(Image { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.w + c] = v;
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "Mask::new",
                detail: format!("{}x{} grid needs {} values, got {}", h, w, h * w, data.len()),
            });
        }
        Ok(Mask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of foreground pixels.
    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / (self.h * self.w) as f64
    }
}

/// Per-pixel foreground probabilities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "ProbMap::new",
                detail: format!("{}x{} grid needs {} values, got {}", h, w, h * w, data.len()),
            });
        }
        Ok(ProbMap { h, w, data })
    }

    /// Binary mask of pixels with probability >= threshold.
    pub fn threshold(&self, t: f64) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&p| p >= t).collect(),
        }
    }
}
