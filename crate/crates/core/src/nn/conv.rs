//! Stride-1 "same" convolution as im2col followed by GEMM.
//!
//! Column matrices are built over bounded spatial chunks so memory stays
//! flat for large images.

use rand::Rng;

use super::real::{matmul, MatRef};
use super::{Mode, NnError, Param, Real, Tensor};

/// Output pixels per im2col chunk.
const CHUNK: usize = 4096;

/// What backward needs from forward.
#[derive(Clone, Debug)]
pub struct ConvCache<T = f64> {
    input: Tensor<T>,
    weight: Tensor<T>,
}

fn check_shapes<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<usize, NnError> {
    let [out_c, in_c, kh, kw] = w.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(NnError::Shape(format!("kernel must be odd and square, got {kh}x{kw}")));
    }
    if x.c() != in_c {
        return Err(NnError::Shape(format!(
            "conv expects {in_c} input channels, got {}",
            x.c()
        )));
    }
    if b.len() != out_c {
        return Err(NnError::Shape(format!("bias has {} entries for {out_c} outputs", b.len())));
    }
    Ok(kh)
}

/// Visits the chunk `p0..p0+np` of an `h x w` grid shifted by `(dy, dx)` row
/// by row. For every row segment it passes the column offset within the
/// chunk, the segment length, the source row (None when it falls outside
/// the grid) and the in-bounds `[lo, hi)` range of destination x offsets
/// within the segment, together with the matching source x start.
fn for_each_segment(
    h: usize,
    w: usize,
    p0: usize,
    np: usize,
    dy: isize,
    dx: isize,
    mut f: impl FnMut(usize, usize, Option<usize>, usize, usize, usize),
) {
    let mut p = p0;
    let end = p0 + np;
    while p < end {
        let (y, x0) = (p / w, p % w);
        let len = (w - x0).min(end - p);
        let yy = y as isize + dy;
        let src_row = (yy >= 0 && yy < h as isize).then_some(yy as usize);
        // destination x in [x0, x0+len) maps to source x + dx in [0, w)
        let lo = (-dx).max(x0 as isize).min((x0 + len) as isize) as usize;
        let hi = ((w as isize - dx).min((x0 + len) as isize)).max(lo as isize) as usize;
        let src_x = if hi > lo { (lo as isize + dx) as usize } else { 0 };
        f(p - p0, len, src_row, lo - x0, hi - x0, src_x);
        p += len;
    }
}

/// Fills `cols` (row = (ci, ky, kx), column = output pixel in `p0..p0+np`)
/// for one sample with zero padding.
fn im2col<T: Real>(x: &[T], in_c: usize, h: usize, w: usize, k: usize, p0: usize, np: usize, cols: &mut [T]) {
    let r = (k / 2) as isize;
    for ci in 0..in_c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * np..][..np];
                for_each_segment(h, w, p0, np, ky as isize - r, kx as isize - r, |off, len, src, lo, hi, sx| {
                    let seg = &mut row[off..off + len];
                    match src {
                        Some(yy) => {
                            seg[..lo].fill(T::zero());
                            seg[lo..hi].copy_from_slice(&plane[yy * w + sx..][..hi - lo]);
                            seg[hi..].fill(T::zero());
                        }
                        None => seg.fill(T::zero()),
                    }
                });
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the padded input grid.
fn col2im<T: Real>(cols: &[T], in_c: usize, h: usize, w: usize, k: usize, p0: usize, np: usize, gx: &mut [T]) {
    let r = (k / 2) as isize;
    for ci in 0..in_c {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * np..][..np];
                for_each_segment(h, w, p0, np, ky as isize - r, kx as isize - r, |off, _, src, lo, hi, sx| {
                    if let Some(yy) = src {
                        let dst = &mut plane[yy * w + sx..][..hi - lo];
                        for (d, &v) in dst.iter_mut().zip(&row[off + lo..off + hi]) {
                            *d = *d + v;
                        }
                    }
                });
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>), NnError> {
    let y = conv2d_infer(x, w, b)?;
    Ok((
        y,
        ConvCache {
            input: x.clone(),
            weight: w.clone(),
        },
    ))
}

fn conv2d_infer<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let k = check_shapes(x, w, b)?;
    let [n, in_c, h, wd] = x.shape();
    let out_c = w.shape()[0];
    let (hw, kk) = (h * wd, in_c * k * k);
    let mut y = Tensor::zeros([n, out_c, h, wd]);
    let mut cols = vec![T::zero(); kk * CHUNK.min(hw)];
    for i in 0..n {
        let out = y.sample_mut(i);
        for (o, plane) in out.chunks_mut(hw.max(1)).enumerate() {
            plane.fill(b.data()[o]);
        }
        for p0 in (0..hw).step_by(CHUNK) {
            let np = CHUNK.min(hw - p0);
            let cols = &mut cols[..kk * np];
            if k == 1 {
                for ci in 0..in_c {
                    cols[ci * np..(ci + 1) * np].copy_from_slice(&x.sample(i)[ci * hw + p0..][..np]);
                }
            } else {
                im2col(x.sample(i), in_c, h, wd, k, p0, np, cols);
            }
            matmul(out_c, kk, np, MatRef::new(w.data(), kk), MatRef::new(cols, np), T::one(), &mut out[p0..], hw);
        }
    }
    Ok(y)
}

/// Gradients with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnError> {
    let (x, w) = (&cache.input, &cache.weight);
    let [n, in_c, h, wd] = x.shape();
    let [out_c, _, k, _] = w.shape();
    grad_out.ensure_shape([n, out_c, h, wd], "conv backward")?;
    let (hw, kk) = (h * wd, in_c * k * k);

    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([1, out_c, 1, 1]);
    let mut cols = vec![T::zero(); kk * CHUNK.min(hw)];
    let mut gcols = vec![T::zero(); kk * CHUNK.min(hw)];
    for i in 0..n {
        let go = grad_out.sample(i);
        for (o, plane) in go.chunks(hw.max(1)).enumerate() {
            let s: T = plane.iter().copied().sum();
            gb.data_mut()[o] = gb.data()[o] + s;
        }
        for p0 in (0..hw).step_by(CHUNK) {
            let np = CHUNK.min(hw - p0);
            let cols = &mut cols[..kk * np];
            let gcols = &mut gcols[..kk * np];
            im2col(x.sample(i), in_c, h, wd, k, p0, np, cols);
            let go_chunk = MatRef::new(&go[p0..], hw);
            // dW += dY[:, chunk] * cols^T
            matmul(out_c, np, kk, go_chunk, MatRef::new(cols, np).t(), T::one(), gw.data_mut(), kk);
            // dcols = W^T * dY[:, chunk]
            matmul(kk, out_c, np, MatRef::new(w.data(), kk).t(), go_chunk, T::zero(), gcols, np);
            col2im(gcols, in_c, h, wd, k, p0, np, gx.sample_mut(i));
        }
    }
    Ok((gx, gw, gb))
}

/// Convolution layer owning its parameters and forward cache.
#[derive(Clone, Debug)]
pub struct Conv2d<T = f64> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<ConvCache<T>>,
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-uniform with negative slope `sqrt(5)`: weights and bias both
    /// uniform in `±1 / sqrt(fan_in)`, drawn in that order.
    pub fn new(name: &str, in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        let weight = Tensor::uniform([out_c, in_c, k, k], bound, rng);
        let bias = Tensor::uniform([1, out_c, 1, 1], bound, rng);
        Self::from_parts(name, weight, bias)
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        match mode {
            Mode::Train => {
                let (y, cache) = conv2d_forward(x, &self.weight.value, &self.bias.value)?;
                self.cache = Some(cache);
                Ok(y)
            }
            Mode::Eval => {
                self.cache = None;
                conv2d_infer(x, &self.weight.value, &self.bias.value)
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.take().ok_or_else(|| NnError::MissingCache(self.weight.name.clone()))?;
        let (gx, gw, gb) = conv2d_backward(&cache, grad_out)?;
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&gb)?;
        Ok(gx)
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
