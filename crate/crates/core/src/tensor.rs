use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// `grad` is `Some` exactly when `requires_grad` is set, and always has the
/// same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
        }
    }

    /// Enables gradient tracking, allocating a zeroed buffer if needed.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![T::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Simultaneous access to values and gradient, for optimizers.
    pub fn data_and_grad_mut(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer. No-op when not tracking.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} gradient values for {} data values", delta.len(), self.data.len()),
            ));
        }
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b);
        }
        Ok(())
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub(crate) fn put_grad(&mut self, grad: Option<Vec<T>>) {
        self.grad = grad;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-type conversion; the gradient buffer is converted as well.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.iter().flatten().all(|v| v.is_finite())
    }

    /// Copies batch item `index` of a tensor whose leading axis is the batch.
    pub fn batch_item(&self, index: usize) -> Result<Tensor<T>> {
        let b = *self.shape.first().ok_or_else(|| Error::shape("batch_item", "rank 0"))?;
        if index >= b {
            return Err(Error::shape("batch_item", format!("index {index} of batch {b}")));
        }
        let per = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::shape("stack_batch", "no tensors"))?;
        let inner = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for t in items {
            if &t.shape[1..] != inner {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(&shape, data)
    }
}

/// Unpacks a rank-4 shape; `op` names the caller in the error.
pub(crate) fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(op, format!("expected rank-4 tensor, got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_present_iff_requires_grad() {
        let mut t = Tensor::<f64>::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 4);
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0, 8.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn batch_roundtrip() {
        let t = Tensor::<f32>::from_fn(&[3, 2, 2], |i| i as f32);
        let items: Vec<_> = (0..3).map(|i| t.batch_item(i).unwrap()).collect();
        let refs: Vec<_> = items.iter().collect();
        assert_eq!(Tensor::stack_batch(&refs).unwrap(), t);
    }
}
