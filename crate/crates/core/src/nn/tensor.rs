use rand::Rng;

use super::{NnError, Real};
use crate::raster::{BinaryMask, GrayImage};

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform(shape: [usize; 4], bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        Self { shape, data }
    }

    /// Stacks single-channel images into an `(n, 1, h, w)` batch.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Result<Self, NnError> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            match dims {
                None => dims = Some(img.dims()),
                Some(d) if d != img.dims() => {
                    return Err(NnError::Shape(format!("batch mixes {:?} and {:?} images", d, img.dims())))
                }
                _ => {}
            }
            data.extend(img.data().iter().map(|&v| T::from_f64(v)));
            n += 1;
        }
        let (w, h) = dims.unwrap_or((0, 0));
        Self::from_vec([n, 1, h, w], data)
    }

    /// Channel `c` of sample `i` as an image.
    pub fn channel_image(&self, i: usize, c: usize) -> GrayImage {
        let [_, _, h, w] = self.shape;
        let data = self.plane(i, c).iter().map(|v| v.as_f64()).collect();
        GrayImage::from_vec(w, h, data).expect("plane matches dims")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, [i, c, y, x]: [usize; 4]) -> usize {
        let [_, cs, h, w] = self.shape;
        ((i * cs + c) * h + y) * w + x
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.index(idx)]
    }

    pub fn plane(&self, i: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// All channels of sample `i`, contiguous.
    pub fn sample(&self, i: usize) -> &[T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[i * chw..(i + 1) * chw]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[i * chw..(i + 1) * chw]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), NnError> {
        self.ensure_shape(other.shape, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The NaN/Inf hook run after layer passes.
    pub fn ensure_finite(&self, context: &str) -> Result<(), NnError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NnError::NonFinite(context.to_string()))
        }
    }

    pub fn ensure_shape(&self, shape: [usize; 4], context: &str) -> Result<(), NnError> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(NnError::Shape(format!("{context}: expected {shape:?}, got {:?}", self.shape)))
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self, NnError> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Class index per pixel (1 = particle) for a batch of masks, in NHW order.
pub fn mask_labels(masks: &[&BinaryMask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.data().iter().map(|&b| b as u8)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_nchw() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |[i, c, y, x]| (i * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at([1, 2, 3, 4]), 1234.0);
        assert_eq!(t.data()[t.index([1, 2, 3, 4])], 1234.0);
        assert_eq!(t.plane(1, 0)[0], 1000.0);
        assert_eq!(t.sample(1).len(), 60);
    }

    #[test]
    fn rejects_wrong_length_and_flags_nan() {
        assert!(Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let mut t = Tensor::<f64>::zeros([1, 1, 2, 2]);
        assert!(t.ensure_finite("x").is_ok());
        t.data_mut()[2] = f64::NAN;
        assert!(matches!(t.ensure_finite("conv"), Err(NnError::NonFinite(s)) if s == "conv"));
    }

    #[test]
    fn image_round_trip() {
        let img = GrayImage::from_fn(3, 2, |x, y| (x + 3 * y) as f64 / 10.0);
        let t = Tensor::<f64>::from_images([&img, &img]).unwrap();
        assert_eq!(t.shape(), [2, 1, 2, 3]);
        assert_eq!(t.channel_image(1, 0), img);
    }
}
