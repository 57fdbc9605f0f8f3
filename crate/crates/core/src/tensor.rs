//! Dense row-major `f64` tensors with at most four axes.

use crate::error::{Error, Result};

pub const MAX_AXES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_AXES {
            return Err(Error::dim(
                "tensor",
                format!(
                    "{} axes requested, at most {MAX_AXES} supported",
                    shape.len()
                ),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_AXES, "too many axes: {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Zero-axis tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Interpret as channels x height x width.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(
                "chw",
                format!("expected a C x H x W tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_AXES {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// One channel of a C x H x W tensor as a flat slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.chw().expect("channel() needs a C x H x W tensor");
        &self.data[c * h * w..(c + 1) * h * w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn scalar_has_one_value() {
        let s = Tensor::scalar(2.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
