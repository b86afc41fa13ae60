use super::{Activation, NnError, Real, Tensor};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Flat input index of each pooled output's winner.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_shape: [usize; 4],
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first window element in
/// row-major order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache), NnError> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::Dimension(format!("max pooling needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec([n, c, oh, ow], out)?,
        MaxPoolCache {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Real>(cache: &MaxPoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [n, c, h, w] = cache.input_shape;
    grad_out.ensure_shape([n, c, h / 2, w / 2], "max pool backward")?;
    let mut gx = Tensor::zeros(cache.input_shape);
    let g = gx.data_mut();
    for (&i, &v) in cache.argmax.iter().zip(grad_out.data()) {
        g[i] = g[i] + v;
    }
    Ok(gx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for xx in 0..ow {
                out.push(row[xx / 2]);
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out).expect("upsampled length")
}

/// Sums each 2x2 block of child gradients into its parent.
pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [n, c, oh, ow] = grad_out.shape();
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(NnError::Dimension(format!("upsample gradient has odd dims {oh}x{ow}")));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Tensor::zeros([n, c, h, w]);
    let g = gx.data_mut();
    for (i, &v) in grad_out.data().iter().enumerate() {
        let plane = i / (oh * ow);
        let (y, xx) = ((i % (oh * ow)) / ow, i % ow);
        let j = plane * h * w + (y / 2) * w + xx / 2;
        g[j] = g[j] + v;
    }
    Ok(gx)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let ([na, ca, ha, wa], [nb, cb, hb, wb]) = (a.shape(), b.shape());
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(NnError::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..na {
        out.extend_from_slice(a.sample(i));
        out.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec([na, ca + cb, ha, wa], out)
}

/// Inverse of [`concat_channels`]: the first `first` channels, then the rest.
pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let [n, c, h, w] = x.shape();
    if first > c {
        return Err(NnError::Shape(format!("cannot split {first} channels from {c}")));
    }
    let cut = first * h * w;
    let mut a = Vec::with_capacity(n * cut);
    let mut b = Vec::with_capacity(x.len() - n * cut);
    for i in 0..n {
        let s = x.sample(i);
        a.extend_from_slice(&s[..cut]);
        b.extend_from_slice(&s[cut..]);
    }
    Ok((Tensor::from_vec([n, first, h, w], a)?, Tensor::from_vec([n, c - first, h, w], b)?))
}

fn negative_slope<T: Real>(act: Activation) -> T {
    match act {
        Activation::Relu => T::zero(),
        Activation::LeakyRelu => T::from_f64(LEAKY_SLOPE),
    }
}

pub fn activation_forward<T: Real>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    leaky(x, negative_slope(act))
}

/// Backward given the forward *input*. At exactly zero the ReLU gradient is
/// 0 and the leaky gradient is the slope.
pub fn activation_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, act: Activation) -> Result<Tensor<T>, NnError> {
    leaky_backward(x, grad_out, negative_slope(act))
}

pub(crate) fn leaky<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub(crate) fn leaky_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Result<Tensor<T>, NnError> {
    grad_out.ensure_shape(x.shape(), "activation backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let (y, cache) = maxpool2_forward(&t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2_backward(&cache, &t([1, 1, 1, 1], &[5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 5.0]);

        let (y, cache) = maxpool2_forward(&Tensor::filled([1, 1, 4, 4], 3.0)).unwrap();
        assert_eq!(y, Tensor::filled([1, 1, 2, 2], 3.0));
        let g = maxpool2_backward(&cache, &Tensor::filled([1, 1, 2, 2], 1.0)).unwrap();
        let expected: Vec<f64> = (0..16).map(|i| if (i / 4) % 2 == 0 && i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(g.data(), &expected[..]);

        assert!(matches!(maxpool2_forward(&Tensor::<f64>::zeros([1, 1, 3, 4])), Err(NnError::Dimension(_))));
    }

    #[test]
    fn upsample_examples() {
        let y = upsample2_forward(&t([1, 1, 1, 1], &[0.3]));
        assert_eq!(y, Tensor::filled([1, 1, 2, 2], 0.3));
        let g = upsample2_backward(&Tensor::<f64>::filled([1, 2, 4, 4], 1.0)).unwrap();
        assert_eq!(g, Tensor::filled([1, 2, 2, 2], 4.0));
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::<f64>::from_fn([2, 2, 4, 4], |[i, c, y, x]| (i + c + y + x) as f64);
        let b = Tensor::<f64>::from_fn([2, 3, 4, 4], |[i, c, y, x]| -((i * c + y * x) as f64));
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), [2, 5, 4, 4]);
        assert_eq!(ab.at([1, 3, 2, 2]), b.at([1, 1, 2, 2]));
        let (a2, b2) = split_channels(&ab, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
        assert!(concat_channels(&Tensor::<f64>::zeros([1, 1, 4, 4]), &Tensor::zeros([1, 1, 2, 4])).is_err());
    }

    #[test]
    fn activation_examples() {
        let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
        assert_eq!(activation_forward(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(activation_forward(&x, Activation::LeakyRelu).data(), &[-0.01, 0.0, 2.0]);
        assert_eq!(leaky(&x, 1.0), x);
        let g = Tensor::filled([1, 1, 1, 3], 1.0);
        assert_eq!(activation_backward(&x, &g, Activation::Relu).unwrap().data(), &[0.0, 0.0, 1.0]);
        assert_eq!(
            activation_backward(&x, &g, Activation::LeakyRelu).unwrap().data(),
            &[0.01, 0.01, 1.0]
        );
    }
}
