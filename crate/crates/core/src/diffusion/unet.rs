//! Small U-Net epsilon-predictor with a sinusoidal timestep embedding.

use candle_core::{DType, Tensor};
use candle_nn::{linear, Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::nn::{conv3x3, group_norm, upsample2, Conv3x3, GroupNorm};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Channels at the top resolution.
    pub width: usize,
    /// Channel multiplier per resolution level; the image is halved between
    /// consecutive levels.
    pub mults: Vec<usize>,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { width: 16, mults: vec![1, 2], time_features: 32 }
    }
}

fn groups_for(ch: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| ch % g == 0).unwrap_or(1)
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    /// 1x1 projection when the channel count changes.
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(in_ch: usize, out_ch: usize, time_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(groups_for(in_ch), in_ch, vb.pp("norm1"))?,
            conv1: conv3x3(in_ch, out_ch, 1, vb.pp("conv1"))?,
            time: linear(time_dim, out_ch, vb.pp("time"))?,
            norm2: group_norm(groups_for(out_ch), out_ch, vb.pp("norm2"))?,
            conv2: conv3x3(out_ch, out_ch, 1, vb.pp("conv2"))?,
            skip: if in_ch == out_ch { None } else { Some(linear(in_ch, out_ch, vb.pp("skip"))?) },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.time.forward(&silu(temb)?)?.unsqueeze(1)?.unsqueeze(1)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

pub struct UNet {
    time_features: usize,
    time1: Linear,
    time2: Linear,
    input: Conv3x3,
    down: Vec<ResBlock>,
    downsample: Vec<Conv3x3>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    output: Conv3x3,
}

impl UNet {
    pub fn new(cfg: &UNetConfig, channels: usize, height: usize, width: usize, vb: VarBuilder) -> Result<Self> {
        if cfg.width == 0 || cfg.mults.is_empty() || cfg.time_features < 2 || cfg.time_features % 2 != 0 {
            return Err(Error::arg(format!("invalid U-Net config {cfg:?}")));
        }
        let factor = 1usize << (cfg.mults.len() - 1);
        if height % factor != 0 || width % factor != 0 {
            return Err(Error::arg(format!(
                "image {height}x{width} is not divisible by {factor} for {} levels",
                cfg.mults.len()
            )));
        }
        let time_dim = 4 * cfg.width;
        let widths: Vec<usize> = cfg.mults.iter().map(|m| m * cfg.width).collect();

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = cfg.width;
        for (i, &w) in widths.iter().enumerate() {
            down.push(ResBlock::new(ch, w, time_dim, vb.pp(format!("down{i}")))?);
            ch = w;
            if i + 1 < widths.len() {
                downsample.push(conv3x3(ch, ch, 2, vb.pp(format!("downsample{i}")))?);
            }
        }
        let mid = ResBlock::new(ch, ch, time_dim, vb.pp("mid"))?;
        let mut up = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            up.push(ResBlock::new(ch + w, w, time_dim, vb.pp(format!("up{i}")))?);
            ch = w;
        }
        Ok(Self {
            time_features: cfg.time_features,
            time1: linear(cfg.time_features, time_dim, vb.pp("time1"))?,
            time2: linear(time_dim, time_dim, vb.pp("time2"))?,
            input: conv3x3(channels, cfg.width, 1, vb.pp("input"))?,
            down,
            downsample,
            mid,
            up,
            out_norm: group_norm(groups_for(ch), ch, vb.pp("out_norm"))?,
            output: conv3x3(ch, channels, 1, vb.pp("output"))?,
        })
    }

    fn time_embedding(&self, t: &[usize], x: &Tensor) -> Result<Tensor> {
        let half = self.time_features / 2;
        let mut feats = Vec::with_capacity(t.len() * self.time_features);
        for &step in t {
            let step = step as f64;
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((step * freq).sin() as f32);
            }
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((step * freq).cos() as f32);
            }
        }
        let emb = Tensor::from_vec(feats, (t.len(), self.time_features), x.device())?;
        let emb = self.time1.forward(&emb)?;
        Ok(self.time2.forward(&silu(&emb)?)?)
    }

    /// Predicts the noise in `x` (N x H x W x C) at timesteps `t`.
    pub fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let temb = self.time_embedding(t, x)?;
        let mut h = self.input.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        let levels = self.up.len();
        for (j, block) in self.up.iter().enumerate() {
            let level = levels - 1 - j;
            let skip = &skips[level];
            if h.dim(1)? != skip.dim(1)? {
                h = upsample2(&h)?;
            }
            h = block.forward(&Tensor::cat(&[&h, skip], 3)?, &temb)?;
        }
        let h = silu(&self.out_norm.forward(&h)?)?;
        Ok(self.output.forward(&h)?.to_dtype(DType::F32)?)
    }
}
