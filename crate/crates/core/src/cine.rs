use crate::error::{Error, Result};
use crate::tensorlab::Tensor;

/// Real-valued 2D+time image sequence, frames stored row-major `[T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl CineSequence {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames * height * width != data.len() {
            return Err(Error::invalid(format!(
                "sequence {frames}x{height}x{width} needs {} values, got {}",
                frames * height * width,
                data.len()
            )));
        }
        Ok(CineSequence {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        CineSequence {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width],
        }
    }

    /// `(T, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> f64 {
        self.data[(t * self.height + y) * self.width + x]
    }

    pub fn same_dims(&self, other: &CineSequence) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "sequence dimensions differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// As a `[1, 1, T, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, 1, self.frames, self.height, self.width],
            self.data.clone(),
        )
        .expect("dims match data")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let n = s.len();
        if n < 3 || s[..n - 3].iter().any(|&d| d != 1) {
            return Err(Error::invalid(format!(
                "tensor of shape {s:?} is not a single sequence"
            )));
        }
        CineSequence::new(s[n - 3], s[n - 2], s[n - 1], t.data().to_vec())
    }
}
