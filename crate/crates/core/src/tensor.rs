//! Dense `N×C×H×W` tensors.
//!
//! Every value in the crate is a rank-4 row-major array. Vectors and scalars
//! are represented with trailing unit dimensions (`N×C×1×1`, `1×1×1×1`).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(N, C, H, W)`.
pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

#[inline]
pub(crate) fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: format!("{} elements", numel(shape)),
                got: shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor from `f(n, c, h, w)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Convenience constructor from `f64` values.
    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                got: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                expected: format!("{:?}", self.shape),
                got: other.shape,
            });
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Largest absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape != other.shape {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Copy of channels `start..start+len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c || len == 0 {
            return Err(Error::Invalid {
                op: "slice_channels",
                reason: format!("range {start}..{} outside {c} channels", start + len),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self {
            shape: [n, len, h, w],
            data,
        })
    }

    /// Writes `src` into channels starting at `start` (inverse of [`Self::slice_channels`]).
    pub(crate) fn write_channels(&mut self, start: usize, src: &Self) {
        let [n, c, h, w] = self.shape;
        let len = src.shape[1];
        let plane = h * w;
        for b in 0..n {
            let dst = (b * c + start) * plane;
            let s = b * len * plane;
            self.data[dst..dst + len * plane].copy_from_slice(&src.data[s..s + len * plane]);
        }
    }
}

/// Output shape of a broadcasting binary op: each dim must agree or be 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides_for(shape: Shape, out: Shape) -> [usize; 4] {
    let full = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if shape[i] == out[i] { full[i] } else { 0 };
    }
    s
}

/// Broadcasting elementwise combination.
pub fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape, b.shape).ok_or_else(|| Error::ShapeMismatch {
        op,
        expected: format!("broadcastable with {:?}", a.shape),
        got: b.shape,
    })?;
    let sa = strides_for(a.shape, out);
    let sb = strides_for(b.shape, out);
    let mut data = Vec::with_capacity(numel(out));
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ia = n * sa[0] + c * sa[1] + h * sa[2];
                let ib = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    data.push(f(a.data[ia + w * sa[3]], b.data[ib + w * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor { shape: out, data })
}

/// Sums `g` over the axes along which `shape` was broadcast up to `g.shape()`.
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: Shape) -> Tensor<T> {
    if g.shape == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let s = strides_for(shape, g.shape);
    let gs = g.shape;
    let mut k = 0;
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for h in 0..gs[2] {
                let base = n * s[0] + c * s[1] + h * s[2];
                for w in 0..gs[3] {
                    out.data[base + w * s[3]] += g.data[k];
                    k += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new([1, 1, 2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn broadcast_channel_vector() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 2], |n, c, h, w| (n + c + h + w) as f64);
        let v = Tensor::from_f64([1, 3, 1, 1], &[1.0, 10.0, 100.0]).unwrap();
        let y = broadcast_zip(&x, &v, "mul", |a, b| a * b).unwrap();
        assert_eq!(y.shape(), [2, 3, 2, 2]);
        assert_eq!(y.at(1, 2, 1, 0), 100.0 * 4.0);
        let r = reduce_to(&y, [1, 3, 1, 1]);
        assert_eq!(r.at(0, 1, 0, 0), 10.0 * (1.0 + 2.0 + 2.0 + 3.0 + 2.0 + 3.0 + 3.0 + 4.0));
    }

    #[test]
    fn incompatible_broadcast_is_error() {
        let a = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let b = Tensor::<f64>::zeros([1, 3, 1, 1]);
        assert!(broadcast_zip(&a, &b, "add", |x, y| x + y).is_err());
    }

    #[test]
    fn slice_and_write_channels_roundtrip() {
        let x = Tensor::<f64>::from_fn([2, 4, 2, 3], |n, c, h, w| (n * 100 + c * 10 + h * 3 + w) as f64);
        let s = x.slice_channels(1, 2).unwrap();
        assert_eq!(s.at(1, 0, 1, 2), x.at(1, 1, 1, 2));
        let mut y = Tensor::zeros([2, 4, 2, 3]);
        for start in (0..4).step_by(2) {
            y.write_channels(start, &x.slice_channels(start, 2).unwrap());
        }
        assert_eq!(x, y);
    }
}
