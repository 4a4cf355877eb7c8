use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array. The last axis is contiguous.
///
/// A `Tensor` is a plain value; it joins a computation only when it is
/// registered on a [`Tape`](crate::Tape), which hands back a [`Var`](crate::Var).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Distribution used for seeded random initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init<T> {
    Fill(T),
    Values(Vec<T>),
    Random { seed: u64, dist: Distribution },
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Construction(format!(
            "all extents must be >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn create(shape: &[usize], init: Init<T>) -> Result<Self> {
        check_extents(shape)?;
        let n = numel(shape);
        let data = match init {
            Init::Fill(v) => vec![v; n],
            Init::Values(values) => {
                if values.len() != n {
                    return Err(Error::Construction(format!(
                        "shape {shape:?} needs {n} values, got {}",
                        values.len()
                    )));
                }
                values
            }
            Init::Random { seed, dist } => sample(n, seed, dist)?,
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::create(shape, Init::Values(data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Panics on a zero extent; use [`Tensor::create`] for fallible construction.
    pub fn full(shape: &[usize], value: T) -> Self {
        Self::create(shape, Init::Fill(value)).expect("positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::c(v)).collect())
    }

    pub fn random(shape: &[usize], seed: u64, dist: Distribution) -> Result<Self> {
        Self::create(shape, Init::Random { seed, dist })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }
}

fn sample<T: Scalar>(n: usize, seed: u64, dist: Distribution) -> Result<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match dist {
        Distribution::Uniform { low, high } => {
            if !(low < high) {
                return Err(Error::Construction(format!(
                    "uniform bounds must satisfy low < high, got [{low}, {high})"
                )));
            }
            let u = Uniform::new(low, high).map_err(|e| Error::Construction(e.to_string()))?;
            Ok((0..n).map(|_| T::c(u.sample(&mut rng))).collect())
        }
        Distribution::Normal { mean, std } => {
            let d = Normal::new(mean, std).map_err(|e| Error::Construction(e.to_string()))?;
            Ok((0..n).map(|_| T::c(d.sample(&mut rng))).collect())
        }
    }
}
