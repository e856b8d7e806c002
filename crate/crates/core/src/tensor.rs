//! Dense row-major real and complex n-d arrays.
//!
//! [`Tensor`] is a plain value. Gradient tracking lives on the
//! [`Tape`](crate::autodiff::Tape), which wraps tensors as leaves.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    C128,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::Real(v) => v.len(),
            Data::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_real(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, Data::Real(data))
    }

    pub fn from_complex(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        Self::new(shape, Data::Complex(data))
    }

    pub fn new(shape: &[usize], data: Data) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized extent in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} elements but data has {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Data::Real(vec![value; numel(shape)]),
        }
    }

    pub fn complex_zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Data::Complex(vec![Complex64::new(0.0, 0.0); numel(shape)]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Data::Real(vec![value]),
        }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Data::Real(data),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Data::Real(data),
        }
    }

    pub fn complex_randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                Complex64::new(
                    std * rng.sample::<f64, _>(StandardNormal),
                    std * rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Data::Complex(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            Data::Real(_) => DType::F64,
            Data::Complex(_) => DType::C128,
        }
    }

    pub fn is_complex(&self) -> bool {
        self.dtype() == DType::C128
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn into_data(self) -> Data {
        self.data
    }

    pub fn real(&self) -> Result<&[f64]> {
        match &self.data {
            Data::Real(v) => Ok(v),
            Data::Complex(_) => Err(Error::DType("expected a real tensor".into())),
        }
    }

    pub fn real_mut(&mut self) -> Result<&mut [f64]> {
        match &mut self.data {
            Data::Real(v) => Ok(v),
            Data::Complex(_) => Err(Error::DType("expected a real tensor".into())),
        }
    }

    pub fn complex(&self) -> Result<&[Complex64]> {
        match &self.data {
            Data::Complex(v) => Ok(v),
            Data::Real(_) => Err(Error::DType("expected a complex tensor".into())),
        }
    }

    pub fn complex_mut(&mut self) -> Result<&mut [Complex64]> {
        match &mut self.data {
            Data::Complex(v) => Ok(v),
            Data::Real(_) => Err(Error::DType("expected a complex tensor".into())),
        }
    }

    /// Real view of a tensor that is known to be real. Panics otherwise.
    pub fn re(&self) -> &[f64] {
        self.real().expect("tensor is complex")
    }

    /// Complex copy of the data; real tensors are promoted.
    pub fn to_complex(&self) -> Tensor {
        match &self.data {
            Data::Complex(_) => self.clone(),
            Data::Real(v) => Tensor {
                shape: self.shape.clone(),
                data: Data::Complex(v.iter().map(|&x| Complex64::new(x, 0.0)).collect()),
            },
        }
    }

    pub fn real_part(&self) -> Tensor {
        match &self.data {
            Data::Real(_) => self.clone(),
            Data::Complex(v) => Tensor {
                shape: self.shape.clone(),
                data: Data::Real(v.iter().map(|z| z.re).collect()),
            },
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Squared L2 norm (modulus squared for complex data).
    pub fn norm_sq(&self) -> f64 {
        match &self.data {
            Data::Real(v) => v.iter().map(|x| x * x).sum(),
            Data::Complex(v) => v.iter().map(|z| z.norm_sqr()).sum(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn sum(&self) -> f64 {
        match &self.data {
            Data::Real(v) => v.iter().sum(),
            Data::Complex(v) => v.iter().map(|z| z.re).sum(),
        }
    }

    pub fn max(&self) -> f64 {
        self.re().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.re().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            Data::Real(v) => v.iter().all(|x| x.is_finite()),
            Data::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    pub fn map_real(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = self.real()?.iter().map(|&x| f(x)).collect();
        Tensor::from_real(&self.shape, v)
    }

    /// Largest absolute elementwise difference; complex values compare by modulus.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let d = match (&self.data, &other.data) {
            (Data::Real(a), Data::Real(b)) => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
            _ => {
                let a = self.to_complex();
                let b = other.to_complex();
                a.complex()?
                    .iter()
                    .zip(b.complex()?)
                    .map(|(x, y)| (x - y).norm())
                    .fold(0.0, f64::max)
            }
        };
        Ok(d)
    }

    /// Slice `index` along the leading axis.
    pub fn index0(&self, index: usize) -> Result<Tensor> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("rank-0 tensor"))?;
        if index >= lead {
            return Err(Error::shape(format!("index {index} out of range {lead}")));
        }
        let inner = &self.shape[1..];
        let inner = if inner.is_empty() { &[1][..] } else { inner };
        let n = numel(inner);
        let data = match &self.data {
            Data::Real(v) => Data::Real(v[index * n..(index + 1) * n].to_vec()),
            Data::Complex(v) => Data::Complex(v[index * n..(index + 1) * n].to_vec()),
        };
        Tensor::new(inner, data)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of nothing"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        if parts
            .iter()
            .any(|p| p.shape != first.shape || p.dtype() != first.dtype())
        {
            return Err(Error::shape("stack requires equal shapes and dtypes"));
        }
        let data = match first.dtype() {
            DType::F64 => Data::Real(parts.iter().flat_map(|p| p.re().iter().copied()).collect()),
            DType::C128 => Data::Complex(
                parts
                    .iter()
                    .flat_map(|p| p.complex().expect("checked").iter().copied())
                    .collect(),
            ),
        };
        Tensor::new(&shape, data)
    }

    /// Trailing two extents (rows, columns).
    pub fn hw(&self) -> Result<(usize, usize)> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape(format!(
                "need at least 2 axes, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[r - 2], self.shape[r - 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::from_real(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_real(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn stack_and_index_round_trip() {
        let a = Tensor::from_real(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_real(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index0(0).unwrap(), a);
        assert_eq!(s.index0(1).unwrap(), b);
    }

    #[test]
    fn reshape_keeps_data() {
        let a = Tensor::from_real(&[6], (0..6).map(f64::from).collect()).unwrap();
        let r = a.reshape(&[2, 3]).unwrap();
        assert_eq!(r.re(), a.re());
        assert!(a.reshape(&[4]).is_err());
    }
}
