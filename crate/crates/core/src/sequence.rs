use crate::error::{Error, Result};
use crate::tensor_io::Tensor;

/// `[B, M, E]` token sequence, optionally remembering the `H × W` grid it was
/// flattened from (row-major, `t = row · W + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub grid: Option<(usize, usize)>,
}

impl TokenSequence {
    pub fn new(batch: usize, len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * len * channels {
            return Err(Error::ShapeMismatch(format!(
                "[{batch}, {len}, {channels}] sequence needs {} values, got {}",
                batch * len * channels,
                data.len()
            )));
        }
        Ok(Self {
            batch,
            len,
            channels,
            data,
            grid: None,
        })
    }

    pub fn zeros(batch: usize, len: usize, channels: usize) -> Self {
        Self::new(batch, len, channels, vec![0.0; batch * len * channels]).unwrap()
    }

    pub fn with_grid(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.len {
            return Err(Error::ShapeMismatch(format!(
                "grid {height}x{width} does not cover {} tokens",
                self.len
            )));
        }
        self.grid = Some((height, width));
        Ok(self)
    }

    /// Accepts `[B, M, E]`, `[B, H, W, E]` or a single `[H, W, E]` feature map.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = t.to_f64_vec();
        match *t.shape() {
            [b, m, e] => Self::new(b, m, e, data),
            [b, h, w, e] => Self::new(b, h * w, e, data)?.with_grid(h, w),
            ref s => Err(Error::ShapeMismatch(format!(
                "token tensor must be [B, M, E] or [B, H, W, E], got {s:?}"
            ))),
        }
    }

    /// `[H, W, E]` feature map as a batch of one.
    pub fn from_feature_map(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, e] => Self::new(1, h * w, e, t.to_f64_vec())?.with_grid(h, w),
            [1, h, w, e] => Self::new(1, h * w, e, t.to_f64_vec())?.with_grid(h, w),
            ref s => Err(Error::ShapeMismatch(format!(
                "feature map must be [H, W, E] or [1, H, W, E], got {s:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.batch, self.len, self.channels], self.data.clone())
            .expect("consistent by construction")
    }

    #[inline]
    pub fn token(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.len + t) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn token_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let start = (b * self.len + t) * self.channels;
        &mut self.data[start..start + self.channels]
    }
}
