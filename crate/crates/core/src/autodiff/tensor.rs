use super::kernels;
use crate::error::{Error, Result};

/// Dense row-major `f32` array with an optional gradient buffer.
///
/// Gradients accumulate across calls to [`Tensor::accumulate_grad`] until
/// [`Tensor::zero_grad`] is called.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks this tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `softmax(logits / t)` along the trailing axis.
pub fn softmax_with_temperature(logits: &Tensor, t: f32) -> Result<Tensor> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    let k = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("softmax needs at least one axis"))?;
    if k == 0 {
        return Err(Error::invalid("softmax over an empty trailing axis"));
    }
    let mut out = vec![0.0f32; logits.numel()];
    kernels::softmax_rows(logits.data(), k, 1.0 / t, &mut out);
    Tensor::new(logits.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn gradients_accumulate_until_reset() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let p = softmax_with_temperature(&Tensor::zeros(&[3]), 1.0).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn huge_temperature_flattens() {
        let z = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax_with_temperature(&z, 1e6).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn matches_extended_precision_reference() {
        // independent reference: exp((z - max) / T) normalized, in f64
        let z = [1.0f64, 2.0, 3.0];
        let t = 2.0f64;
        let e: Vec<f64> = z.iter().map(|v| ((v - 3.0) / t).exp()).collect();
        let total: f64 = e.iter().sum();
        let zt = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax_with_temperature(&zt, 2.0).unwrap();
        for (got, want) in p.data().iter().zip(e.iter().map(|v| v / total)) {
            assert!((*got as f64 - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_bad_temperature_and_empty_axis() {
        let z = Tensor::zeros(&[3]);
        assert!(softmax_with_temperature(&z, 0.0).is_err());
        assert!(softmax_with_temperature(&z, -1.0).is_err());
        assert!(softmax_with_temperature(&Tensor::zeros(&[2, 0]), 1.0).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let z = Tensor::new(vec![2], vec![1000.0, -1000.0]).unwrap();
        let p = softmax_with_temperature(&z, 0.5).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-7);
    }
}
