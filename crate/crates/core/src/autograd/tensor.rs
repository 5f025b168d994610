use crate::error::{Error, Result};
use crate::signal::C64;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    Real(Vec<f64>),
    Complex(Vec<C64>),
}

/// Dense row-major tensor of real or complex values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let expect: usize = shape.iter().product();
    if expect != len {
        return Err(Error::Autograd {
            primitive: "tensor",
            detail: format!("shape {shape:?} needs {expect} values, got {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn real(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        check_shape(shape, values.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data: Data::Real(values),
        })
    }

    pub fn complex(shape: &[usize], values: Vec<C64>) -> Result<Self> {
        check_shape(shape, values.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data: Data::Complex(values),
        })
    }

    pub fn real_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            shape: vec![n],
            data: Data::Real(values),
        }
    }

    pub fn complex_vec(values: Vec<C64>) -> Self {
        let n = values.len();
        Self {
            shape: vec![n],
            data: Data::Complex(values),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::real_vec(vec![value])
    }

    pub fn zeros_like(&self) -> Self {
        let data = match &self.data {
            Data::Real(v) => Data::Real(vec![0.0; v.len()]),
            Data::Complex(v) => Data::Complex(vec![C64::new(0.0, 0.0); v.len()]),
        };
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        match &self.data {
            Data::Real(v) => v.len(),
            Data::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self.data, Data::Complex(_))
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.data {
            Data::Real(v) => Some(v),
            Data::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[C64]> {
        match &self.data {
            Data::Complex(v) => Some(v),
            Data::Real(_) => None,
        }
    }

    pub(crate) fn as_real_mut(&mut self) -> Option<&mut Vec<f64>> {
        match &mut self.data {
            Data::Real(v) => Some(v),
            Data::Complex(_) => None,
        }
    }

    pub(crate) fn as_complex_mut(&mut self) -> Option<&mut Vec<C64>> {
        match &mut self.data {
            Data::Complex(v) => Some(v),
            Data::Real(_) => None,
        }
    }

    /// Single value of a one-element real tensor.
    pub fn item(&self) -> Option<f64> {
        match &self.data {
            Data::Real(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    /// Number of real coordinates (complex entries count twice).
    pub fn real_dim(&self) -> usize {
        match &self.data {
            Data::Real(v) => v.len(),
            Data::Complex(v) => 2 * v.len(),
        }
    }

    /// Flattens to real coordinates, complex entries as (re, im) pairs.
    pub fn to_reals(&self) -> Vec<f64> {
        match &self.data {
            Data::Real(v) => v.clone(),
            Data::Complex(v) => v.iter().flat_map(|c| [c.re, c.im]).collect(),
        }
    }

    /// Inverse of [`Tensor::to_reals`] keeping this tensor's shape and dtype.
    pub fn with_reals(&self, reals: &[f64]) -> Self {
        assert_eq!(reals.len(), self.real_dim());
        let data = match &self.data {
            Data::Real(_) => Data::Real(reals.to_vec()),
            Data::Complex(_) => Data::Complex(
                reals
                    .chunks_exact(2)
                    .map(|p| C64::new(p[0], p[1]))
                    .collect(),
            ),
        };
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub(crate) fn reshaped(mut self, shape: &[usize]) -> Self {
        self.shape = shape.to_vec();
        self
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        match (&mut self.data, &other.data) {
            (Data::Real(a), Data::Real(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Data::Complex(a), Data::Complex(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            _ => panic!("gradient dtype mismatch"),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            Data::Real(v) => v.iter().all(|x| x.is_finite()),
            Data::Complex(v) => v.iter().all(|x| x.re.is_finite() && x.im.is_finite()),
        }
    }
}
