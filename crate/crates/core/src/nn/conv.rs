use rand::Rng;

use super::layers::{join, normal_init, Params};
use super::tensor::{matmul, Float, Tensor};

/// Square-kernel 2D convolution over activations laid out `[C, B, H, W]`.
///
/// The channel-major layout lets a whole batch go through a single GEMM after
/// `im2col`, and the GEMM output is already in the same layout for the next layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    /// `[out_channels, in_channels * k * k]`
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl<F: Float> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        // He initialization for the ReLU that follows.
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Tensor::from_vec(&[out_ch, fan_in], normal_init(rng, out_ch * fan_in, std)),
            bias: Tensor::zeros(&[out_ch]),
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &[F], s: ConvShape) -> Vec<F> {
        let c_in = self.in_channels();
        let (k, st, p) = (self.kernel, self.stride, self.padding as isize);
        let (oh, ow) = (self.out_size(s.height), self.out_size(s.width));
        let ncols = s.batch * oh * ow;
        let mut cols = vec![F::zero(); c_in * k * k * ncols];
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for b in 0..s.batch {
                        let src = &x[(c * s.batch + b) * s.height * s.width..][..s.height * s.width];
                        for oy in 0..oh {
                            let iy = (oy * st + ky) as isize - p;
                            if iy < 0 || iy >= s.height as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * s.width..][..s.width];
                            let drow = &mut dst[(b * oh + oy) * ow..][..ow];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * st + kx) as isize - p;
                                if ix >= 0 && ix < s.width as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[F], s: ConvShape) -> Vec<F> {
        let c_in = self.in_channels();
        let (k, st, p) = (self.kernel, self.stride, self.padding as isize);
        let (oh, ow) = (self.out_size(s.height), self.out_size(s.width));
        let ncols = s.batch * oh * ow;
        let mut x = vec![F::zero(); c_in * s.batch * s.height * s.width];
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for b in 0..s.batch {
                        let dst =
                            &mut x[(c * s.batch + b) * s.height * s.width..][..s.height * s.width];
                        for oy in 0..oh {
                            let iy = (oy * st + ky) as isize - p;
                            if iy < 0 || iy >= s.height as isize {
                                continue;
                            }
                            let srow = &src[(b * oh + oy) * ow..][..ow];
                            let drow = &mut dst[iy as usize * s.width..][..s.width];
                            for (ox, &v) in srow.iter().enumerate() {
                                let ix = (ox * st + kx) as isize - p;
                                if ix >= 0 && ix < s.width as isize {
                                    drow[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output `[C_out, B, OH, OW]` and the column buffer needed by `backward`.
    pub fn forward(&self, x: &[F], s: ConvShape) -> (Vec<F>, Vec<F>, ConvShape) {
        let cols = self.im2col(x, s);
        let out_shape = ConvShape {
            batch: s.batch,
            height: self.out_size(s.height),
            width: self.out_size(s.width),
        };
        let ncols = s.batch * out_shape.height * out_shape.width;
        let c_out = self.out_channels();
        let mut y = Vec::with_capacity(c_out * ncols);
        for &b in &self.bias.data {
            y.extend(std::iter::repeat_n(b, ncols));
        }
        matmul(&self.weight.data, false, &cols, false, &mut y, c_out, self.weight.shape[1], ncols, true);
        (y, cols, out_shape)
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(
        &self,
        cols: &[F],
        dy: &[F],
        in_shape: ConvShape,
        grad: &mut Conv2d<F>,
        need_dx: bool,
    ) -> Option<Vec<F>> {
        let c_out = self.out_channels();
        let fan_in = self.weight.shape[1];
        let ncols = dy.len() / c_out;
        matmul(dy, false, cols, true, &mut grad.weight.data, c_out, ncols, fan_in, true);
        for (g, row) in grad.bias.data.iter_mut().zip(dy.chunks_exact(ncols)) {
            *g += row.iter().copied().sum::<F>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![F::zero(); fan_in * ncols];
        matmul(&self.weight.data, true, dy, false, &mut dcols, fan_in, c_out, ncols, false);
        Some(self.col2im(&dcols, in_shape))
    }
}

impl<F: Float> Params<F> for Conv2d<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
