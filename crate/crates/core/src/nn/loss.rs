use super::tensor::mask_labels;
use super::{NnError, Real, Tensor};
use crate::raster::BinaryMask;

/// Per-pixel softmax across channels, stabilized by subtracting the
/// per-pixel maximum.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [n, c, h, w] = x.shape();
    if c < 2 {
        return Err(NnError::Shape(format!("softmax needs at least 2 channels, got {c}")));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut buf = vec![T::zero(); c];
    for i in 0..n {
        let src = x.sample(i);
        let dst = out.sample_mut(i);
        for p in 0..hw {
            let m = (0..c).map(|j| src[j * hw + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[j * hw + p] - m).exp();
                z = z + *b;
            }
            for (j, b) in buf.iter().enumerate() {
                dst[j * hw + p] = *b / z;
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy over all pixels of raw logits against one class
/// index per pixel (NHW order), and its gradient `(softmax - onehot) / count`.
pub fn cross_entropy_with_labels<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>), NnError> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(NnError::Shape(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(NnError::Shape(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax_channels(logits)?;
    let count = T::from_f64((n * hw) as f64);
    let mut grad = probs.clone();
    let mut loss = 0.0f64;
    for i in 0..n {
        let x = logits.sample(i);
        let g = grad.sample_mut(i);
        for p in 0..hw {
            let t = labels[i * hw + p] as usize;
            // log-sum-exp form avoids log(0) for saturated predictions
            let m = (0..c).map(|j| x[j * hw + p]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..c).map(|j| (x[j * hw + p] - m).exp()).sum::<T>().ln();
            loss += (lse - x[t * hw + p]).as_f64();
            g[t * hw + p] = g[t * hw + p] - T::one();
        }
    }
    for v in grad.data_mut() {
        *v = *v / count;
    }
    Ok((T::from_f64(loss / (n * hw) as f64), grad))
}

/// Two-class loss with masks as targets: particle pixels are class 1.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, targets: &[&BinaryMask]) -> Result<(T, Tensor<T>), NnError> {
    if logits.c() != 2 {
        return Err(NnError::Shape(format!("expected 2 logit channels, got {}", logits.c())));
    }
    if targets.len() != logits.n() || targets.iter().any(|m| m.dims() != (logits.w(), logits.h())) {
        return Err(NnError::Shape("target masks do not match logits".into()));
    }
    cross_entropy_with_labels(logits, &mask_labels(targets))
}
