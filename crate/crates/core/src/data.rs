//! Frame sequences, visibility masks and the per-pixel error metric.

use std::fmt;

use crate::error::{Error, Result};

/// Half-width of the [0, 255] intensity range expressed in model units.
pub const INTENSITY_SCALE: f64 = 127.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        FrameShape {
            height,
            width,
            channels,
        }
    }

    /// Number of values per frame.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for FrameShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// `T` frames of shape `H x W x C`, frame-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    shape: FrameShape,
    frames: usize,
    data: Vec<f64>,
}

impl FrameSequence {
    pub fn new(shape: FrameShape, frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * shape.len() {
            return Err(Error::Data(format!(
                "{} frames of {} need {} values, got {}",
                frames,
                shape,
                frames * shape.len(),
                data.len()
            )));
        }
        Ok(FrameSequence {
            shape,
            frames,
            data,
        })
    }

    pub fn zeros(shape: FrameShape, frames: usize) -> Self {
        FrameSequence {
            shape,
            frames,
            data: vec![0.0; frames * shape.len()],
        }
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let d = self.shape.len();
        &self.data[t * d..(t + 1) * d]
    }

    /// Values of frames `start..end`.
    pub fn window(&self, start: usize, end: usize) -> &[f64] {
        let d = self.shape.len();
        &self.data[start * d..end * d]
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> FrameSequence {
        FrameSequence {
            shape: self.shape,
            frames: end - start,
            data: self.window(start, end).to_vec(),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// Observed-pixel indicator with the same layout as a [`FrameSequence`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    shape: FrameShape,
    frames: usize,
    data: Vec<bool>,
}

impl VisibilityMask {
    pub fn new(shape: FrameShape, frames: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != frames * shape.len() {
            return Err(Error::Data(format!(
                "mask of {} frames of {} needs {} entries, got {}",
                frames,
                shape,
                frames * shape.len(),
                data.len()
            )));
        }
        Ok(VisibilityMask {
            shape,
            frames,
            data,
        })
    }

    pub fn all_visible(shape: FrameShape, frames: usize) -> Self {
        VisibilityMask {
            shape,
            frames,
            data: vec![true; frames * shape.len()],
        }
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn window(&self, start: usize, end: usize) -> &[bool] {
        let d = self.shape.len();
        &self.data[start * d..end * d]
    }

    pub fn visible_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn matches(&self, seq: &FrameSequence) -> bool {
        self.shape == seq.shape() && self.frames == seq.frames()
    }
}

/// Accumulates mean absolute difference on the [0, 255] scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelError {
    pub abs_sum: f64,
    pub count: usize,
}

impl PixelError {
    pub fn add(&mut self, a: f64, b: f64) {
        self.abs_sum += (a - b).abs() * INTENSITY_SCALE;
        self.count += 1;
    }

    pub fn merge(&mut self, other: PixelError) {
        self.abs_sum += other.abs_sum;
        self.count += other.count;
    }

    /// Mean error, or `None` when nothing was counted.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.abs_sum / self.count as f64)
    }
}

/// Mean per-pixel absolute error on the [0, 255] scale over the entries
/// selected by `select` (all entries when `None`).
pub fn per_pixel_error(a: &[f64], b: &[f64], select: Option<&[bool]>) -> Option<f64> {
    let mut e = PixelError::default();
    for i in 0..a.len().min(b.len()) {
        if select.map_or(true, |s| s[i]) {
            e.add(a[i], b[i]);
        }
    }
    e.mean()
}

/// Per-pixel temporal mean over visible entries, used as a recovery baseline.
/// Pixels never visible fall back to 0 (mid-grey).
pub fn temporal_mean_baseline(x: &FrameSequence, mask: &VisibilityMask) -> FrameSequence {
    let d = x.shape().len();
    let mut sum = vec![0.0; d];
    let mut count = vec![0usize; d];
    for t in 0..x.frames() {
        for i in 0..d {
            if mask.data()[t * d + i] {
                sum[i] += x.data()[t * d + i];
                count[i] += 1;
            }
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut data = Vec::with_capacity(x.data().len());
    for _ in 0..x.frames() {
        data.extend_from_slice(&mean);
    }
    FrameSequence {
        shape: x.shape(),
        frames: x.frames(),
        data,
    }
}
