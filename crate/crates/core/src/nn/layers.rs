//! Channel-last (`N x H x W x C`) layers.
//!
//! Convolutions are an explicit im2col kernel followed by a matrix
//! product, which on small images is several times faster than the stock
//! CPU convolution and keeps activations channel-last without transposes.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::{Error, Result};

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout, op: &str) -> candle_core::Result<&'a [f32]> {
    let data = match storage {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("{op} only supports f32"),
    };
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} needs a contiguous input"),
    }
}

fn out_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// `N x H x W x C` to `(N * Ho * Wo) x (9 * C)` patches of a zero-padded
/// 3x3 window; column order is `(ky, kx, c)`.
struct Im2Col {
    stride: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = f32_slice(storage, layout, self.name())?;
        let (n, h, w, c) = layout.shape().dims4()?;
        let s = self.stride;
        let (ho, wo) = (out_len(h, s), out_len(w, s));
        let row = 9 * c;
        let mut out = vec![0f32; n * ho * wo * row];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = &mut out[((b * ho + oy) * wo + ox) * row..][..row];
                    for ky in 0..3 {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * c;
                            dst[(ky * 3 + kx) * c..][..c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n * ho * wo, row))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, h, w, c) = arg.dims4()?;
        let grad = grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im { stride: self.stride, n, h, w, c })?;
        Ok(Some(grad))
    }
}

/// Adjoint of [`Im2Col`]: scatters patch gradients back onto the image.
struct Col2Im {
    stride: usize,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let cols = f32_slice(storage, layout, self.name())?;
        let Col2Im { stride: s, n, h, w, c } = *self;
        let (ho, wo) = (out_len(h, s), out_len(w, s));
        let row = 9 * c;
        let mut out = vec![0f32; n * h * w * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = &cols[((b * ho + oy) * wo + ox) * row..][..row];
                    for ky in 0..3 {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                            for (o, g) in out[dst..dst + c].iter_mut().zip(&src[(ky * 3 + kx) * c..][..c]) {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, h, w, c))))
    }
}

/// 3x3 convolution with zero padding 1 on channel-last input.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    /// `out x 3 x 3 x in`
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

pub fn conv3x3(in_ch: usize, out_ch: usize, stride: usize, vb: VarBuilder) -> Result<Conv3x3> {
    if stride == 0 {
        return Err(Error::arg("conv stride must be >= 1"));
    }
    let weight = vb.get_with_hints((out_ch, 3, 3, in_ch), "weight", Init::Const(0.0))?;
    let bias = vb.get_with_hints(out_ch, "bias", Init::Const(0.0))?;
    Ok(Conv3x3 { weight, bias, stride })
}

impl Module for Conv3x3 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, h, w, _) = x.dims4()?;
        let out_ch = self.weight.dim(0)?;
        let cols = x.contiguous()?.apply_op1(Im2Col { stride: self.stride })?;
        let kernel = self.weight.flatten_from(1)?;
        let y = cols.matmul(&kernel.t()?)?.broadcast_add(&self.bias)?;
        y.reshape((n, out_len(h, self.stride), out_len(w, self.stride), out_ch))
    }
}

/// Group normalization over channel-last input.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

pub fn group_norm(groups: usize, channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::arg(format!("{channels} channels do not split into {groups} groups")));
    }
    let weight = vb.get_with_hints(channels, "weight", Init::Const(1.0))?;
    let bias = vb.get_with_hints(channels, "bias", Init::Const(0.0))?;
    Ok(GroupNorm { weight, bias, groups, eps: 1e-5 })
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        let g = x.reshape((n, h * w, self.groups, c / self.groups))?;
        let mean = g.mean_keepdim(3)?.mean_keepdim(1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((n, h, w, c))?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// 2x2 max-pooling, channel-last. Odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let x = x.narrow(1, 0, 2 * h2)?.narrow(2, 0, 2 * w2)?;
    Ok(x.reshape((n, h2, 2, w2, 2, c))?.max(4)?.max(2)?)
}

/// Nearest-neighbour 2x upsampling, channel-last.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    Ok(x.reshape((n, h, 1, w, 1, c))?.broadcast_as((n, h, 2, w, 2, c))?.reshape((n, 2 * h, 2 * w, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use candle_nn::VarMap;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let count: usize = shape.iter().product();
        let v: Vec<f32> = (0..count).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Stock NCHW convolution with the kernel permuted to match.
    fn reference(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
        let xc = x.permute((0, 3, 1, 2)).unwrap();
        let wc = w.permute((0, 3, 1, 2)).unwrap().contiguous().unwrap();
        xc.conv2d(&wc, 1, stride, 1, 1).unwrap().permute((0, 2, 3, 1)).unwrap()
    }

    #[test]
    fn conv_matches_stock_convolution() {
        for (stride, h, w) in [(1, 8, 8), (2, 8, 8), (1, 5, 3), (2, 5, 7)] {
            let x = rand(&[2, h, w, 3], 1);
            let k = rand(&[4, 3, 3, 3], 2);
            let conv = Conv3x3 { weight: k.clone(), bias: Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap(), stride };
            let ours = conv.forward(&x).unwrap();
            let theirs = reference(&x, &k, stride);
            assert_eq!(ours.dims(), theirs.dims());
            let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-5, "stride {stride} {h}x{w}: {diff}");
        }
    }

    #[test]
    fn conv_gradients_match_stock_convolution() {
        for stride in [1, 2] {
            let x = Var::from_tensor(&rand(&[2, 6, 6, 3], 3)).unwrap();
            let k = Var::from_tensor(&rand(&[5, 3, 3, 3], 4)).unwrap();
            let conv = Conv3x3 {
                weight: k.as_tensor().clone(),
                bias: Tensor::zeros(5, DType::F32, &Device::Cpu).unwrap(),
                stride,
            };
            let target = rand(&[2, out_len(6, stride), out_len(6, stride), 5], 5);
            let loss = |y: Tensor| (y * &target).unwrap().sum_all().unwrap();
            let ours = loss(conv.forward(x.as_tensor()).unwrap()).backward().unwrap();
            let theirs = loss(reference(x.as_tensor(), k.as_tensor(), stride)).backward().unwrap();
            for v in [x.as_tensor(), k.as_tensor()] {
                let a = ours.get(v).unwrap();
                let b = theirs.get(v).unwrap();
                let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
                assert!(diff < 1e-4, "stride {stride}: {diff}");
            }
        }
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let gn = group_norm(2, 4, vb).unwrap();
        let x = rand(&[1, 3, 3, 4], 6);
        let y = gn.forward(&x).unwrap().reshape((9, 2, 2)).unwrap();
        let y: Vec<Vec<Vec<f32>>> = y.to_vec3().unwrap();
        for g in 0..2 {
            let vals: Vec<f32> = y.iter().flat_map(|p| p[g].clone()).collect();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3, "group {g}: {mean} {var}");
        }
    }

    #[test]
    fn pooling_and_upsampling() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 4, 4, 1)).unwrap();
        let p = max_pool2(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(p, vec![5.0, 7.0, 13.0, 15.0]);
        let u = upsample2(&Tensor::new(&[[[[1f32], [2.0]]]], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(u.dims(), &[1, 2, 4, 1]);
        assert_eq!(u.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
