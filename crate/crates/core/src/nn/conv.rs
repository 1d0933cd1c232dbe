//! Channels-last convolution as im2col + matmul.
//!
//! The patch extraction is a custom op whose backward pass scatters the
//! patch gradients back (col2im); everything after it is a plain matmul, so
//! the whole layer stays differentiable at f32 and f64.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, Var};

use crate::error::Result;
use crate::nn::params::{Group, Init, ParamStore};

#[derive(Debug, Clone, Copy)]
struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Im2Col {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Patch column layout: `(ky, kx, c)` fastest-varying last.
    fn forward<T: Copy + Default>(&self, src: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let cols = self.k * self.k * c;
        let mut out = vec![T::default(); b * ho * wo * cols];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * cols;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let d = row + (ky * self.k + kx) * c;
                            out[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        out
    }

    fn backward<T: Copy + Default + std::ops::AddAssign>(
        &self,
        grad: &[T],
        dims: (usize, usize, usize, usize),
    ) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let cols = self.k * self.k * c;
        let mut out = vec![T::default(); b * h * w * c];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * cols;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let s = row + (ky * self.k + kx) * c;
                            for ci in 0..c {
                                out[d + ci] += grad[s + ci];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn dims4(shape: &Shape) -> candle_core::Result<(usize, usize, usize, usize)> {
    shape.dims4()
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(layout.shape())?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("im2col expects a contiguous input".into()))?;
        let (ho, wo) = self.out_hw(dims.1, dims.2);
        let shape = Shape::from((dims.0, ho, wo, self.k * self.k * dims.3));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.forward(&v[start..end], dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.forward(&v[start..end], dims)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let g = grad_res.contiguous()?.flatten_all()?;
        let out = match arg.dtype() {
            candle_core::DType::F32 => {
                Tensor::from_vec(self.backward(&g.to_vec1::<f32>()?, dims), arg.shape(), arg.device())?
            }
            candle_core::DType::F64 => {
                Tensor::from_vec(self.backward(&g.to_vec1::<f64>()?, dims), arg.shape(), arg.device())?
            }
            dt => return Err(candle_core::Error::Msg(format!("im2col backward: unsupported {dt:?}"))),
        };
        Ok(Some(out))
    }
}

/// Square-kernel convolution over `(B, H, W, C)` tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    k: usize,
    stride: usize,
    pad: usize,
    out_ch: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        group: Group,
    ) -> Result<Self> {
        let fan_in = k * k * in_ch;
        let weight = ps.create(&format!("{name}.weight"), &[fan_in, out_ch], Init::kaiming(fan_in), group)?;
        let bias = ps.create(&format!("{name}.bias"), &[out_ch], Init::Const(0.0), group)?;
        Ok(Self {
            weight,
            bias,
            k,
            stride,
            pad: k / 2,
            out_ch,
        })
    }

    /// Same as [`Conv2d::new`] with explicit initializers (used for prediction layers).
    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        weight_init: Init,
        bias_init: Init,
        group: Group,
    ) -> Result<Self> {
        let fan_in = k * k * in_ch;
        let weight = ps.create(&format!("{name}.weight"), &[fan_in, out_ch], weight_init, group)?;
        let bias = ps.create(&format!("{name}.bias"), &[out_ch], bias_init, group)?;
        Ok(Self {
            weight,
            bias,
            k,
            stride: 1,
            pad: k / 2,
            out_ch,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let (cols, ho, wo) = if self.k == 1 && self.stride == 1 {
            (x.reshape((b * h * w, c))?, h, w)
        } else {
            let op = Im2Col {
                k: self.k,
                stride: self.stride,
                pad: self.pad,
            };
            let (ho, wo) = op.out_hw(h, w);
            let cols = x.contiguous()?.apply_op1(op)?;
            (cols.reshape((b * ho * wo, self.k * self.k * c))?, ho, wo)
        };
        let y = cols
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(y.reshape((b, ho, wo, self.out_ch))?)
    }
}

/// Nearest-neighbour 2× upsampling of `(B, H, W, C)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    /// Direct-loop reference convolution over NHWC with weight laid out `(ky, kx, cin) × cout`.
    fn conv_ref(x: &[f64], (b, h, w, c): (usize, usize, usize, usize), wt: &[f64], bias: &[f64], k: usize, s: usize, cout: usize) -> Vec<f64> {
        let p = k / 2;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * ho * wo * cout];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = bias[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x[((bi * h + iy as usize) * w + ix as usize) * c + ci];
                                    acc += xv * wt[((ky * k + kx) * c + ci) * cout + co];
                                }
                            }
                        }
                        out[((bi * ho + oy) * wo + ox) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut ps = ParamStore::new(0, DType::F64);
        let conv = Conv2d::new(&mut ps, "c", 3, 4, 3, 2, Group::Image).unwrap();
        ps.create("noise", &[2 * 6 * 6 * 3], Init::Uniform(1.0), Group::Image).unwrap();
        let x = ps.get("noise").unwrap().var.as_tensor().reshape((2, 6, 6, 3)).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 3, 4]);
        let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let wv: Vec<f64> = conv.weight().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let want = conv_ref(&xv, (2, 6, 6, 3), &wv, &[0.0; 4], 3, 2, 4);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(1, DType::F64);
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2, Group::Image).unwrap();
        let xv: Vec<f64> = (0..2 * 4 * 4 * 2).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let x = Var::from_vec(xv.clone(), (2, 4, 4, 2), &dev).unwrap();
        let loss = |t: &Tensor| conv.forward(t).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(x.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        for i in 0..xv.len() {
            let mut p = xv.clone();
            p[i] += eps;
            let mut m = xv.clone();
            m[i] -= eps;
            let fp: f64 = loss(&Tensor::from_vec(p, (2, 4, 4, 2), &dev).unwrap()).to_scalar().unwrap();
            let fm: f64 = loss(&Tensor::from_vec(m, (2, 4, 4, 2), &dev).unwrap()).to_scalar().unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} g={}", g[i]);
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 2, 2, 1)).unwrap();
        let y: Vec<f32> = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(
            y,
            vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]
        );
    }
}
