use std::fmt;

use crate::error::{Error, Result};

/// Extents of a five-axis tensor: (batch, channel, depth, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape5(pub [usize; 5]);

impl Shape5 {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5([n, c, d, h, w])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of elements in one (depth, height, width) slab.
    pub fn slab(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Shape5([self.0[0], c, self.0[2], self.0[3], self.0[4]])
    }

    pub fn with_spatial(&self, s: [usize; 3]) -> Self {
        Shape5([self.0[0], self.0[1], s[0], s[1], s[2]])
    }
}

impl fmt::Debug for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, d, h, w] = self.0;
        write!(f, "({n},{c},{d},{h},{w})")
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense row-major 5-axis array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape5, value: f64) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> f64) -> Self {
        let [n, c, d, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..d {
                    for i3 in 0..h {
                        for i4 in 0..w {
                            data.push(f([i0, i1, i2, i3, i4]));
                        }
                    }
                }
            }
        }
        Tensor5 { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, c, d, h, w] = self.shape.0;
        (((idx[0] * c + idx[1]) * d + idx[2]) * h + idx[3]) * w + idx[4]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 5]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 5], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Contiguous (depth, height, width) block for one (batch, channel) pair.
    pub fn slab(&self, n: usize, c: usize) -> &[f64] {
        let s = self.shape.slab();
        let start = (n * self.shape.channels() + c) * s;
        &self.data[start..start + s]
    }

    pub fn slab_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.shape.slab();
        let start = (n * self.shape.channels() + c) * s;
        &mut self.data[start..start + s]
    }

    pub fn reshape(self, shape: Shape5) -> Result<Self> {
        Tensor5::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor5) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor5) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with a numeric error naming `location` if any entry is NaN or infinite.
    pub fn check_finite(&self, location: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(
                location,
                format!("non-finite value {} at flat index {i}", self.data[i]),
            )),
        }
    }

    pub fn expect_shape(&self, shape: Shape5, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::config(format!(
                "{what}: expected shape {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Copies out batch element `n` as a batch-1 tensor.
    pub fn batch_item(&self, n: usize) -> Tensor5 {
        let per = self.shape.numel() / self.shape.batch().max(1);
        let shape = Shape5([1, self.shape.0[1], self.shape.0[2], self.shape.0[3], self.shape.0[4]]);
        Tensor5 {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks batch-1 (or larger) tensors along the batch axis.
    pub fn stack(items: &[Tensor5]) -> Result<Tensor5> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("stack of zero tensors"))?;
        let mut batch = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape.0[1..] != first.shape.0[1..] {
                return Err(Error::config(format!(
                    "stack: shape {} does not match {}",
                    t.shape, first.shape
                )));
            }
            batch += t.shape.batch();
            data.extend_from_slice(&t.data);
        }
        Tensor5::from_vec(first.shape.with_batch(batch), data)
    }
}

impl Shape5 {
    pub fn with_batch(&self, n: usize) -> Self {
        Shape5([n, self.0[1], self.0[2], self.0[3], self.0[4]])
    }
}

impl fmt::Debug for Tensor5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor5")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor5::from_vec(Shape5::new(1, 1, 2, 2, 2), vec![0.0; 7]).is_err());
        let t = Tensor5::from_vec(Shape5::new(1, 1, 2, 2, 2), vec![1.0; 8]).unwrap();
        assert_eq!(t.sum(), 8.0);
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor5::from_fn(Shape5::new(2, 3, 4, 5, 6), |i| {
            (((i[0] * 3 + i[1]) * 4 + i[2]) * 5 + i[3]) as f64 * 6.0 + i[4] as f64
        });
        for (k, v) in t.data().iter().enumerate() {
            assert_eq!(*v, k as f64);
        }
        assert_eq!(t.get([1, 2, 3, 4, 5]), (t.len() - 1) as f64);
    }

    #[test]
    fn stack_and_batch_item_invert() {
        let a = Tensor5::full(Shape5::new(1, 2, 2, 2, 2), 1.0);
        let b = Tensor5::full(Shape5::new(1, 2, 2, 2, 2), 2.0);
        let s = Tensor5::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), Shape5::new(2, 2, 2, 2, 2));
        assert_eq!(s.batch_item(0), a);
        assert_eq!(s.batch_item(1), b);
    }

    #[test]
    fn check_finite_reports_location() {
        let mut t = Tensor5::zeros(Shape5::new(1, 1, 1, 1, 2));
        t.data_mut()[1] = f64::NAN;
        let err = t.check_finite("layer7").unwrap_err();
        assert!(err.to_string().contains("layer7"));
    }
}
