use rand::Rng;

use super::gemm::sgemm;
use super::param::Param;
use super::Tensor3;

/// 2-D convolution with square kernels, zero padding and bias.
///
/// A 1×1 stride-1 convolution is a per-cell fully connected layer and skips
/// the im2col copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// What backward needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    /// im2col matrix (`cin·k·k × oh·ow`), or the input itself for 1×1 layers.
    cols: Vec<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::he_normal(format!("{name}.weight"), &[out_channels, fan_in], fan_in, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Fully connected per-cell layer.
    pub fn pointwise<R: Rng + ?Sized>(name: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self::new(name, in_channels, out_channels, 1, 1, 0, rng)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, x: &Tensor3) -> (Tensor3, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_dims(x.height, x.width);
        let cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            im2col(x, self.kernel, self.stride, self.padding, oh, ow)
        };
        let n = oh * ow;
        let k = self.in_channels * self.kernel * self.kernel;
        let mut out = vec![0.0f32; self.out_channels * n];
        for (o, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(self.bias.value[o]);
        }
        sgemm(self.out_channels, k, n, 1.0, &self.weight.value, false, &cols, false, 1.0, &mut out);
        let cache = ConvCache { cols, in_h: x.height, in_w: x.width, out_h: oh, out_w: ow };
        (Tensor3::from_vec(self.out_channels, oh, ow, out), cache)
    }

    pub fn infer(&self, x: &Tensor3) -> Tensor3 {
        self.forward(x).0
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &[f32], need_input_grad: bool) -> Option<Tensor3> {
        let n = cache.out_h * cache.out_w;
        let k = self.in_channels * self.kernel * self.kernel;
        assert_eq!(grad_out.len(), self.out_channels * n, "conv grad shape");
        for (o, row) in grad_out.chunks_exact(n).enumerate() {
            self.bias.grad[o] += row.iter().sum::<f32>();
        }
        // dW += dY · colsᵀ
        sgemm(self.out_channels, n, k, 1.0, grad_out, false, &cache.cols, true, 1.0, &mut self.weight.grad);
        if !need_input_grad {
            return None;
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0f32; k * n];
        sgemm(k, self.out_channels, n, 1.0, &self.weight.value, true, grad_out, false, 0.0, &mut dcols);
        if self.is_pointwise() {
            return Some(Tensor3::from_vec(self.in_channels, cache.in_h, cache.in_w, dcols));
        }
        Some(col2im(
            &dcols,
            self.in_channels,
            cache.in_h,
            cache.in_w,
            self.kernel,
            self.stride,
            self.padding,
            cache.out_h,
            cache.out_w,
        ))
    }
}

fn im2col(x: &Tensor3, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f32> {
    let n = oh * ow;
    let mut cols = vec![0.0f32; x.channels * k * k * n];
    for c in 0..x.channels {
        let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    let src = iy as usize * x.width;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.width as isize {
                            cols[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor3 {
    let n = oh * ow;
    let mut out = Tensor3::zeros(channels, h, w);
    for c in 0..channels {
        let plane = &mut out.data[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv2d, x: &Tensor3) -> Tensor3 {
        let (oh, ow) = conv.out_dims(x.height, x.width);
        let k = conv.kernel;
        let mut out = Tensor3::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = conv.bias.value[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wv = conv.weight.value[o * conv.in_channels * k * k + (c * k + ky) * k + kx];
                                s += wv * x.data[c * x.plane() + iy as usize * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[o * oh * ow + oy * ow + ox] = s;
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let mut conv = Conv2d::new("c", 3, 4, k, s, p, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = 0.25);
            let x = random_tensor(&mut rng, 3, 6, 8);
            let got = conv.infer(&x);
            let want = direct_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new("c", 2, 3, k, s, p, &mut rng);
            let x = random_tensor(&mut rng, 2, 5, 6);
            let (y, cache) = conv.forward(&x);
            // Loss = Σ g ⊙ y for a fixed random g.
            let g: Vec<f32> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dx = conv.backward(&cache, &g, true).unwrap();
            let loss = |conv: &Conv2d, x: &Tensor3| -> f64 {
                conv.infer(x).data.iter().zip(&g).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let eps = 1e-2f32;
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data[i] as f64).abs() < 1e-3, "dx[{i}]: {fd} vs {}", dx.data[i]);
            }
            for i in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight.value[i] += eps;
                let mut cm = conv.clone();
                cm.weight.value[i] -= eps;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps as f64);
                assert!((fd - conv.weight.grad[i] as f64).abs() < 1e-3);
            }
            for o in 0..3 {
                let want: f32 = g[o * y.plane()..(o + 1) * y.plane()].iter().sum();
                assert!((conv.bias.grad[o] - want).abs() < 1e-4);
            }
        }
    }
}
