use super::{Mode, NnError, Param, Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Normalized activations and inverse deviations from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f64> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

/// Per-channel mean and biased variance over (n, h, w).
fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.plane(i, ch).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for i in 0..n {
            q += x.plane(i, ch).iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

fn affine<T: Real>(x: &Tensor<T>, shift: &[f64], scale: &[f64], gamma: &[T], beta: &[T]) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (m, s) = (T::from_f64(shift[ch]), T::from_f64(scale[ch]));
            for p in 0..hw {
                let xh = (x.data()[off + p] - m) * s;
                x_hat.data_mut()[off + p] = xh;
                y.data_mut()[off + p] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, x_hat)
}

/// Training-mode batch normalization. Returns the output, the cache, and the
/// batch mean and unbiased variance for running-statistics updates.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, BatchNormCache<T>, Vec<f64>, Vec<f64>), NnError> {
    let [n, c, h, w] = x.shape();
    if gamma.len() != c || beta.len() != c {
        return Err(NnError::Shape(format!("batch norm over {c} channels got {} gammas", gamma.len())));
    }
    let count = n * h * w;
    if count < 2 {
        return Err(NnError::Shape(format!(
            "training batch norm needs at least 2 values per channel, got {count}"
        )));
    }
    let (mean, var) = channel_moments(x);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (y, x_hat) = affine(x, &mean, &inv, gamma, beta);
    let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std: inv.into_iter().map(T::from_f64).collect(),
            gamma: gamma.to_vec(),
        },
        mean,
        unbiased,
    ))
}

/// Exact gradient through the batch statistics: returns
/// `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), NnError> {
    let [n, c, h, w] = cache.x_hat.shape();
    grad_out.ensure_shape(cache.x_hat.shape(), "batch norm backward")?;
    let hw = h * w;
    let count = T::from_f64((n * hw) as f64);
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for p in 0..hw {
                let g = grad_out.data()[off + p];
                g_beta[ch] = g_beta[ch] + g;
                g_gamma[ch] = g_gamma[ch] + g * cache.x_hat.data()[off + p];
            }
        }
    }
    let mut gx = Tensor::zeros(cache.x_hat.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let k = cache.gamma[ch] * cache.inv_std[ch] / count;
            for p in 0..hw {
                let g = grad_out.data()[off + p];
                let xh = cache.x_hat.data()[off + p];
                gx.data_mut()[off + p] = k * (count * g - g_beta[ch] - xh * g_gamma[ch]);
            }
        }
    }
    Ok((gx, g_gamma, g_beta))
}

#[derive(Clone, Debug)]
enum BnCache<T> {
    Train(BatchNormCache<T>),
    /// Eval mode is a fixed per-channel scale.
    Eval(Vec<T>),
}

/// Batch normalization layer with learnable affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T = f64> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Completed training-mode passes; zero means running stats are unset.
    pub batches_tracked: u64,
    name: String,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled([1, channels, 1, 1], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            batches_tracked: 0,
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        match mode {
            Mode::Train => {
                let (y, cache, mean, var) = batchnorm_forward(x, gamma, beta)?;
                for ch in 0..self.channels() {
                    self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
                    self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch];
                }
                self.batches_tracked += 1;
                self.cache = Some(BnCache::Train(cache));
                Ok(y)
            }
            Mode::Eval => {
                if self.batches_tracked == 0 {
                    return Err(NnError::Uninitialized(self.name.clone()));
                }
                if x.c() != self.channels() {
                    return Err(NnError::Shape(format!(
                        "batch norm `{}` has {} channels, input has {}",
                        self.name,
                        self.channels(),
                        x.c()
                    )));
                }
                let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let (y, _) = affine(x, &self.running_mean, &inv, gamma, beta);
                let scale = inv.iter().zip(gamma).map(|(&s, &g)| g * T::from_f64(s)).collect();
                self.cache = Some(BnCache::Eval(scale));
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self.cache.take() {
            Some(BnCache::Train(cache)) => {
                let (gx, gg, gb) = batchnorm_backward(&cache, grad_out)?;
                for ch in 0..self.channels() {
                    self.gamma.grad.data_mut()[ch] = self.gamma.grad.data()[ch] + gg[ch];
                    self.beta.grad.data_mut()[ch] = self.beta.grad.data()[ch] + gb[ch];
                }
                Ok(gx)
            }
            Some(BnCache::Eval(scale)) => {
                let hw = grad_out.h() * grad_out.w();
                let c = self.channels();
                let mut gx = grad_out.clone();
                for (j, v) in gx.data_mut().iter_mut().enumerate() {
                    *v = *v * scale[(j / hw) % c];
                }
                Ok(gx)
            }
            None => Err(NnError::MissingCache(self.name.clone())),
        }
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
