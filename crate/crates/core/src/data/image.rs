use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H×W×C` image stored row-major (channels fastest), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() || height * width * channels == 0 {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, c] => Self::new(*h, *w, *c, t.data().to_vec()),
            s => Err(Error::Contract(format!("image tensor must be H×W×C, got {s:?}"))),
        }
    }

    /// Loads an 8-bit RGB PNG (or any format the `image` crate reads) scaled to `[0, 1]`.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(h as usize, w as usize, 3, data)
    }
}
