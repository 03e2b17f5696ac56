//! Dense row-major `f64` tensors and the convolution kernels the models run on.
//!
//! Image tensors are laid out `[N, C, H, W]`; convolution kernels are
//! `[C_out, C_in, K, K]`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    /// Panics if `data.len()` disagrees with the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "bad reshape");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `n` of a batch tensor, keeping a leading axis of length one.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stack equally shaped tensors whose leading axis is 1 (or absent) into a batch.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of nothing");
        let inner: Vec<usize> = if items[0].shape.first() == Some(&1) && items[0].shape.len() == 4 {
            items[0].shape[1..].to_vec()
        } else {
            items[0].shape.clone()
        };
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.numel(), items[0].numel(), "stack of unequal tensors");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Spatial output size of the forward convolution, if the window fits.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Input size a transposed convolution maps `small` onto.
    pub fn transposed_size(&self, small: usize) -> usize {
        (small - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    match *t.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => panic!("{what}: expected rank-4 tensor, got {s:?}"),
    }
}

/// Unfold one sample `[C, H, W]` into columns `[C*K*K, Ho*Wo]`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold columns back onto a zeroed sample, accumulating overlaps.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, x: &mut [f64]) {
    let k = g.kernel;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b` (+ `c` when `accumulate`), with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation `y[n] = w ⋆ x[n]`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let (n, ci, h, wd) = dims4(x, "conv2d input");
    let (co, wci, k, k2) = dims4(w, "conv2d weight");
    assert!(wci == ci && k == g.kernel && k2 == g.kernel, "conv2d weight {:?} vs input {:?}", w.shape(), x.shape());
    let ho = g.out_size(h).expect("conv window larger than input");
    let wo = g.out_size(wd).expect("conv window larger than input");
    let ckk = ci * k * k;
    let hw = ho * wo;
    let mut out = vec![0.0; n * co * hw];
    let mut cols = vec![0.0; ckk * hw];
    for s in 0..n {
        im2col(&x.data()[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, g, ho, wo, &mut cols);
        gemm(co, ckk, hw, w.data(), ckk as isize, 1, &cols, hw as isize, 1, &mut out[s * co * hw..], false);
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Adjoint of [`conv2d`] in its input: maps `[N, C_out, Ho, Wo]` back onto
/// `[N, C_in, h, w]`. Used both for backpropagation and as the
/// fractionally-strided (transposed) convolution of the decoder.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, g: ConvGeom, h: usize, wd: usize) -> Tensor {
    let (n, co, ho, wo) = dims4(gy, "conv2d_input_grad upstream");
    let (wco, ci, k, _) = dims4(w, "conv2d_input_grad weight");
    assert_eq!(wco, co, "conv2d_input_grad channel mismatch");
    assert_eq!(g.out_size(h), Some(ho), "conv2d_input_grad height mismatch");
    assert_eq!(g.out_size(wd), Some(wo), "conv2d_input_grad width mismatch");
    let ckk = ci * k * k;
    let hw = ho * wo;
    let mut out = vec![0.0; n * ci * h * wd];
    let mut cols = vec![0.0; ckk * hw];
    for s in 0..n {
        // cols = wᵀ · gy[s]
        gemm(ckk, co, hw, w.data(), 1, ckk as isize, &gy.data()[s * co * hw..], hw as isize, 1, &mut cols, false);
        col2im(&cols, ci, h, wd, g, ho, wo, &mut out[s * ci * h * wd..(s + 1) * ci * h * wd]);
    }
    Tensor::new(vec![n, ci, h, wd], out)
}

/// Adjoint of [`conv2d`] in its kernel: `Σ_n gy[n] · im2col(x[n])ᵀ`.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, g: ConvGeom) -> Tensor {
    let (n, ci, h, wd) = dims4(x, "conv2d_weight_grad input");
    let (gn, co, ho, wo) = dims4(gy, "conv2d_weight_grad upstream");
    assert_eq!(gn, n, "conv2d_weight_grad batch mismatch");
    assert_eq!(g.out_size(h), Some(ho), "conv2d_weight_grad height mismatch");
    let k = g.kernel;
    let ckk = ci * k * k;
    let hw = ho * wo;
    let mut out = vec![0.0; co * ckk];
    let mut cols = vec![0.0; ckk * hw];
    for s in 0..n {
        im2col(&x.data()[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, g, ho, wo, &mut cols);
        gemm(co, hw, ckk, &gy.data()[s * co * hw..], hw as isize, 1, &cols, 1, hw as isize, &mut out, s > 0);
    }
    Tensor::new(vec![co, ci, k, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let (n, ci, h, wd) = dims4(x, "");
        let (co, _, k, _) = dims4(w, "");
        let ho = g.out_size(h).unwrap();
        let wo = g.out_size(wd).unwrap();
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [ConvGeom::new(3, 1, 1), ConvGeom::new(4, 2, 1), ConvGeom::new(7, 1, 3), ConvGeom::new(2, 1, 0)] {
            let x = random(&[2, 3, 8, 8], &mut rng);
            let w = random(&[4, 3, g.kernel, g.kernel], &mut rng);
            let fast = conv2d(&x, &w, g);
            let slow = naive_conv(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_are_adjoints_of_forward() {
        // <conv(x, w), y> == <x, conv_inputᵀ(y, w)> == <w, conv_weightᵀ(x, y)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeom::new(4, 2, 1);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let w = random(&[5, 3, 4, 4], &mut rng);
        let y = random(&[2, 5, 4, 4], &mut rng);
        let lhs = dot(&conv2d(&x, &w, g), &y);
        let via_input = dot(&x, &conv2d_input_grad(&y, &w, g, 8, 8));
        let via_weight = dot(&w, &conv2d_weight_grad(&x, &y, g));
        assert!((lhs - via_input).abs() < 1e-10);
        assert!((lhs - via_weight).abs() < 1e-10);
    }

    #[test]
    fn transposed_geometry_doubles_resolution() {
        let g = ConvGeom::new(4, 2, 1);
        assert_eq!(g.transposed_size(16), 32);
        assert_eq!(g.out_size(32), Some(16));
        assert_eq!(ConvGeom::new(7, 1, 3).out_size(64), Some(64));
        assert_eq!(ConvGeom::new(4, 2, 1).out_size(1), None);
    }
}
