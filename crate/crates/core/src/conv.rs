//! 2-D convolution (cross-correlation), its adjoint, and 2x2 max pooling.
//!
//! Convolutions go through im2col + GEMM one sample at a time. The column
//! matrix for a sample is `[C_in*kH*kW, H'*W']`, so the forward pass is
//! `kernel[C_out, C_in*kH*kW] @ cols` and the adjoint is `kernel^T @ grad`
//! followed by col2im.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [in_channels, in_h, in_w] = input;
        let g = ConvGeometry {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h: kernel[0],
            kernel_w: kernel[1],
            stride,
            padding,
        };
        if stride == 0 {
            return Err(Error::dim("stride must be at least 1"));
        }
        if in_h + 2 * padding < g.kernel_h || in_w + 2 * padding < g.kernel_w {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {}x{}",
                g.kernel_h,
                g.kernel_w,
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        if [in_channels, in_h, in_w, out_channels, g.kernel_h, g.kernel_w].contains(&0) {
            return Err(Error::dim(format!("degenerate conv geometry {g:?}")));
        }
        Ok(g)
    }

    fn from_tensors<T: Scalar>(
        input_shape: &[usize],
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let ks = kernel.shape();
        if input_shape.len() != 4 || ks.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d wants 4-D input and kernel, got {input_shape:?} and {ks:?}"
            )));
        }
        if input_shape[1] != ks[1] {
            return Err(Error::dim(format!(
                "input has {} channels, kernel expects {}",
                input_shape[1], ks[1]
            )));
        }
        Self::new(
            [input_shape[1], input_shape[2], input_shape[3]],
            ks[0],
            [ks[2], ks[3]],
            stride,
            padding,
        )
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_features(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside the input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let spatial = oh * ow;
        for c in 0..self.in_channels {
            let plane = &image[c * self.in_h * self.in_w..];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[oy * ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.in_w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let spatial = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                plane[y * self.in_w + x] = plane[y * self.in_w + x] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward cross-correlation on a flat `[N, C_in*H*W]` batch; no bias.
    pub(crate) fn forward<T: Scalar>(&self, input: &[T], batch: usize, kernel: &[T]) -> Vec<T> {
        let (inf, outf) = (self.in_features(), self.out_features());
        let mut out = vec![T::zero(); batch * outf];
        let mut cols = vec![T::zero(); self.patch_len() * self.out_spatial()];
        for n in 0..batch {
            self.im2col(&input[n * inf..(n + 1) * inf], &mut cols);
            gemm(
                self.out_channels,
                self.patch_len(),
                self.out_spatial(),
                T::one(),
                kernel,
                Op::N,
                &cols,
                Op::N,
                T::zero(),
                &mut out[n * outf..(n + 1) * outf],
            );
        }
        out
    }

    /// Adjoint of [`ConvGeometry::forward`] with respect to the input.
    pub(crate) fn transpose<T: Scalar>(&self, grad_out: &[T], batch: usize, kernel: &[T]) -> Vec<T> {
        let (inf, outf) = (self.in_features(), self.out_features());
        let mut out = vec![T::zero(); batch * inf];
        let mut cols = vec![T::zero(); self.patch_len() * self.out_spatial()];
        for n in 0..batch {
            gemm(
                self.patch_len(),
                self.out_channels,
                self.out_spatial(),
                T::one(),
                kernel,
                Op::T,
                &grad_out[n * outf..(n + 1) * outf],
                Op::N,
                T::zero(),
                &mut cols,
            );
            self.col2im_add(&cols, &mut out[n * inf..(n + 1) * inf]);
        }
        out
    }

    /// Gradient of `<forward(input, K), grad_out>` with respect to `K`, summed over the batch.
    pub(crate) fn kernel_grad<T: Scalar>(&self, input: &[T], grad_out: &[T], batch: usize) -> Vec<T> {
        let (inf, outf) = (self.in_features(), self.out_features());
        let mut dk = vec![T::zero(); self.out_channels * self.patch_len()];
        let mut cols = vec![T::zero(); self.patch_len() * self.out_spatial()];
        for n in 0..batch {
            self.im2col(&input[n * inf..(n + 1) * inf], &mut cols);
            gemm(
                self.out_channels,
                self.out_spatial(),
                self.patch_len(),
                T::one(),
                &grad_out[n * outf..(n + 1) * outf],
                Op::N,
                &cols,
                Op::T,
                T::one(),
                &mut dk,
            );
        }
        dk
    }
}

/// Cross-correlation of `input[N,C_in,H,W]` with `kernel[C_out,C_in,kH,kW]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::from_tensors(input.shape(), kernel, stride, padding)?;
    let n = input.shape()[0];
    let out = g.forward(input.data(), n, kernel.data());
    Tensor::new(vec![n, g.out_channels, g.out_h(), g.out_w()], out)
}

/// Adjoint of [`conv2d`]: maps `grad_out[N,C_out,H',W']` back to `[N,C_in,H,W]`
/// with `H = (H'-1)*stride + kH - 2*padding`.
pub fn conv2d_transposed<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    let ks = kernel.shape();
    if gs.len() != 4 || ks.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d_transposed wants 4-D tensors, got {gs:?} and {ks:?}"
        )));
    }
    let h = ((gs[2] - 1) * stride + ks[2])
        .checked_sub(2 * padding)
        .ok_or_else(|| Error::dim("padding too large for transposed conv"))?;
    let w = ((gs[3] - 1) * stride + ks[3])
        .checked_sub(2 * padding)
        .ok_or_else(|| Error::dim("padding too large for transposed conv"))?;
    conv2d_transposed_to(grad_out, kernel, stride, padding, [h, w])
}

/// [`conv2d_transposed`] with an explicit input size, for strides that leave a remainder.
pub fn conv2d_transposed_to<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    input_hw: [usize; 2],
) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    let ks = kernel.shape();
    if gs.len() != 4 || ks.len() != 4 || gs[1] != ks[0] {
        return Err(Error::dim(format!(
            "grad {gs:?} does not match kernel {ks:?}"
        )));
    }
    let g = ConvGeometry::new([ks[1], input_hw[0], input_hw[1]], ks[0], [ks[2], ks[3]], stride, padding)?;
    if g.out_h() != gs[2] || g.out_w() != gs[3] {
        return Err(Error::dim(format!(
            "input {input_hw:?} produces {}x{} outputs, grad is {}x{}",
            g.out_h(),
            g.out_w(),
            gs[2],
            gs[3]
        )));
    }
    let n = gs[0];
    let out = g.transpose(grad_out.data(), n, kernel.data());
    Tensor::new(vec![n, g.in_channels, g.in_h, g.in_w], out)
}

/// Kernel gradient for [`conv2d`] given its input and the output gradient.
pub fn conv2d_kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_shape: [usize; 4],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(&kernel_shape);
    let g = ConvGeometry::from_tensors(input.shape(), &probe, stride, padding)?;
    let n = input.shape()[0];
    if grad_out.shape() != [n, g.out_channels, g.out_h(), g.out_w()] {
        return Err(Error::dim(format!(
            "grad {:?} inconsistent with conv output",
            grad_out.shape()
        )));
    }
    Tensor::new(kernel_shape.to_vec(), g.kernel_grad(input.data(), grad_out.data(), n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl PoolGeometry {
    pub const WINDOW: usize = 2;

    pub fn new(input: [usize; 3]) -> Result<Self> {
        let [channels, in_h, in_w] = input;
        if in_h % 2 != 0 || in_w % 2 != 0 || in_h == 0 || in_w == 0 {
            return Err(Error::dim(format!(
                "2x2 max pool needs even spatial size, got {in_h}x{in_w}"
            )));
        }
        Ok(PoolGeometry { channels, in_h, in_w })
    }

    pub fn out_h(&self) -> usize {
        self.in_h / 2
    }

    pub fn out_w(&self) -> usize {
        self.in_w / 2
    }

    pub fn in_features(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn out_features(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }

    /// Returns pooled values and, per output cell, the flat input index of its maximum.
    /// Ties go to the first maximal position in row-major window order.
    pub(crate) fn forward<T: Scalar>(&self, input: &[T], batch: usize) -> (Vec<T>, Vec<u32>) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = Vec::with_capacity(batch * self.out_features());
        let mut arg = Vec::with_capacity(batch * self.out_features());
        for plane in 0..batch * self.channels {
            let base = plane * self.in_h * self.in_w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * self.in_w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * self.in_w + 2 * ox + dx;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                    out.push(input[best]);
                    arg.push(best as u32);
                }
            }
        }
        (out, arg)
    }

    pub(crate) fn backward<T: Scalar>(&self, grad_out: &[T], argmax: &[u32], batch: usize) -> Vec<T> {
        let mut g = vec![T::zero(); batch * self.in_features()];
        for (&i, &v) in argmax.iter().zip(grad_out) {
            g[i as usize] = g[i as usize] + v;
        }
        g
    }
}

/// Max pooling over `[N,C,H,W]`. Only `window == stride == 2` is supported.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    if window != 2 || stride != 2 {
        return Err(Error::dim(format!(
            "only 2x2 stride-2 pooling is supported, got window {window} stride {stride}"
        )));
    }
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("maxpool2d wants 4-D input, got {s:?}")));
    }
    let g = PoolGeometry::new([s[1], s[2], s[3]])?;
    let (out, arg) = g.forward(input.data(), s[0]);
    Ok((Tensor::new(vec![s[0], s[1], g.out_h(), g.out_w()], out)?, arg))
}

/// Routes `grad_out` back to the argmax positions recorded by [`maxpool2d`].
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if input_shape.len() != 4 || argmax.len() != grad_out.len() {
        return Err(Error::dim("argmax does not match pooled gradient"));
    }
    let g = PoolGeometry::new([input_shape[1], input_shape[2], input_shape[3]])?;
    let n = input_shape[0];
    if grad_out.shape() != [n, g.channels, g.out_h(), g.out_w()] {
        return Err(Error::dim(format!(
            "pooled gradient {:?} inconsistent with input {input_shape:?}",
            grad_out.shape()
        )));
    }
    if argmax.iter().any(|&i| i as usize >= n * g.in_features()) {
        return Err(Error::dim("argmax index out of range"));
    }
    Tensor::new(input_shape.to_vec(), g.backward(grad_out.data(), argmax, n))
}
