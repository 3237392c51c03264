//! Dense row-major tensors.

use std::fmt;

use thiserror::Error;

use crate::real::{lane_sum, Real};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape {shape:?} does not match data length {len}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: expected shape {expected}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type TensorResult<T> = Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> TensorResult<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
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
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> TensorResult<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Mismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> TensorResult<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        lane_sum(&self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Self) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::Mismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn expect_rank(&self, op: &'static str, rank: usize) -> TensorResult<()> {
        if self.rank() != rank {
            return Err(TensorError::Shape {
                op,
                expected: format!("rank {rank}"),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Interprets a `[C,H,W]` or `[B,C,H,W]` tensor as `(B, C, H, W)`.
    pub fn image_dims(&self, op: &'static str) -> TensorResult<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((1, c, h, w)),
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(TensorError::Shape {
                op,
                expected: "[C,H,W] or [B,C,H,W]".into(),
                got: self.shape.clone(),
            }),
        }
    }

    /// Height and width of the trailing two axes.
    pub fn hw(&self) -> (usize, usize) {
        let r = self.shape.len();
        assert!(r >= 2, "hw() on tensor of shape {:?}", self.shape);
        (self.shape[r - 2], self.shape[r - 1])
    }

    /// Plane `i` of the tensor viewed as a stack of `H*W` planes.
    pub fn plane(&self, i: usize) -> &[T] {
        let (h, w) = self.hw();
        &self.data[i * h * w..(i + 1) * h * w]
    }

    pub fn plane_mut(&mut self, i: usize) -> &mut [T] {
        let (h, w) = self.hw();
        &mut self.data[i * h * w..(i + 1) * h * w]
    }

    pub fn num_planes(&self) -> usize {
        let (h, w) = self.hw();
        self.data.len().checked_div(h * w).unwrap_or(0)
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        let (_, w) = self.hw();
        self.data[r * w + c]
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::NAME, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new([2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn planes_and_dims() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |i| i as f32);
        assert_eq!(t.image_dims("t").unwrap(), (2, 3, 4, 5));
        assert_eq!(t.num_planes(), 6);
        assert_eq!(t.plane(1)[0], 20.0);
        let s = Tensor::<f32>::zeros([3, 4, 5]);
        assert_eq!(s.image_dims("t").unwrap(), (1, 3, 4, 5));
        assert!(Tensor::<f32>::zeros([4, 5]).image_dims("t").is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::from_fn([2, 6], |i| i as f64);
        let r = t.clone().reshape([3, 4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape([5]).is_err());
    }
}
