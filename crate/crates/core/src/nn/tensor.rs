use crate::error::{Error, Result};

use super::Scalar;

/// Dense activation block stored channel-major: `[channels][batch][height][width]`.
///
/// Channel-major storage lets a convolution write its GEMM result directly and
/// lets batch normalization see each channel as one contiguous slice.
/// A `[features][batch]` matrix is the `height = width = 1` case.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![F::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<F>,
    ) -> Result<Self> {
        if data.len() != channels * batch * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not fit {channels}x{batch}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            batch,
            height,
            width,
            data,
        })
    }

    /// Features-by-batch matrix view (`height = width = 1`).
    pub fn matrix(rows: usize, batch: usize, data: Vec<F>) -> Result<Self> {
        Self::from_vec(rows, batch, 1, 1, data)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn per_channel(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    pub fn shape_str(&self) -> String {
        format!(
            "{}x{}x{}x{}",
            self.channels, self.batch, self.height, self.width
        )
    }

    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> F {
        self.data[((c * self.batch + n) * self.height + y) * self.width + x]
    }

    /// Packs per-sample HWC images (all of one size) into a channel-major batch.
    pub fn from_hwc_images(
        images: &[&[F]],
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        let batch = images.len();
        let mut out = Self::zeros(channels, batch, height, width);
        let plane = height * width;
        for (n, img) in images.iter().enumerate() {
            if img.len() != plane * channels {
                return Err(Error::Shape(format!(
                    "image {n} has {} values, expected {height}x{width}x{channels}",
                    img.len()
                )));
            }
            for p in 0..plane {
                for c in 0..channels {
                    out.data[(c * batch + n) * plane + p] = img[p * channels + c];
                }
            }
        }
        Ok(out)
    }

    /// Extracts sample `n` as an HWC buffer.
    pub fn hwc_image(&self, n: usize) -> Vec<F> {
        let plane = self.plane();
        let mut out = vec![F::zero(); plane * self.channels];
        for c in 0..self.channels {
            let src = &self.data[(c * self.batch + n) * plane..][..plane];
            for (p, &v) in src.iter().enumerate() {
                out[p * self.channels + c] = v;
            }
        }
        out
    }

    /// Flattens `[C][N][H][W]` into a `[C*H*W][N]` matrix (row index `c*H*W + y*W + x`).
    pub fn flatten_to_matrix(&self) -> Self {
        let plane = self.plane();
        let rows = self.channels * plane;
        let mut out = vec![F::zero(); rows * self.batch];
        for c in 0..self.channels {
            for n in 0..self.batch {
                let src = &self.data[(c * self.batch + n) * plane..][..plane];
                for (p, &v) in src.iter().enumerate() {
                    out[(c * plane + p) * self.batch + n] = v;
                }
            }
        }
        Self {
            channels: rows,
            batch: self.batch,
            height: 1,
            width: 1,
            data: out,
        }
    }

    /// Inverse of [`flatten_to_matrix`](Self::flatten_to_matrix).
    pub fn unflatten_from_matrix(
        &self,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let plane = height * width;
        if self.channels != channels * plane || self.plane() != 1 {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {channels}x{height}x{width}",
                self.shape_str()
            )));
        }
        let batch = self.batch;
        let mut out = Self::zeros(channels, batch, height, width);
        for c in 0..channels {
            for n in 0..batch {
                for p in 0..plane {
                    out.data[(c * batch + n) * plane + p] = self.data[(c * plane + p) * batch + n];
                }
            }
        }
        Ok(out)
    }

    /// Column `n` of a `[features][batch]` matrix.
    pub fn column(&self, n: usize) -> Vec<F> {
        let rows = self.channels * self.plane();
        (0..rows).map(|r| self.data[r * self.batch + n]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> FeatureMap<G> {
        FeatureMap {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hwc_round_trip_and_flatten() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let b: Vec<f64> = (12..24).map(|v| v as f64).collect();
        let fm = FeatureMap::from_hwc_images(&[&a, &b], 2, 2, 3).unwrap();
        assert_eq!(fm.hwc_image(0), a);
        assert_eq!(fm.hwc_image(1), b);
        let flat = fm.flatten_to_matrix();
        assert_eq!(flat.channels, 12);
        let back = flat.unflatten_from_matrix(3, 2, 2).unwrap();
        assert_eq!(back, fm);
        // channel 1, pixel (0,1) of sample 1 is b[1*3+1]
        assert_eq!(fm.at(1, 1, 0, 1), b[4]);
    }
}
