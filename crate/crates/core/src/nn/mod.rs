//! Tensor plumbing shared by the classifier, the denoiser and the NN attack.

mod layers;

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::Rng;

pub use layers::{conv3x3, group_norm, max_pool2, upsample2, Conv3x3, GroupNorm};

use crate::data::ImageShape;
use crate::seed;
use crate::{Error, Result};

/// Packs channel-last images into an `N x H x W x C` f32 tensor, applying
/// `scale * v + shift` to every pixel.
pub fn images_to_tensor(
    images: &[&[f32]],
    shape: ImageShape,
    scale: f32,
    shift: f32,
    device: &Device,
) -> Result<Tensor> {
    let mut buf = Vec::with_capacity(images.len() * shape.len());
    for img in images {
        if img.len() != shape.len() {
            return Err(Error::arg(format!(
                "image has {} values, model expects {:?}",
                img.len(),
                shape
            )));
        }
        buf.extend(img.iter().map(|v| scale * v + shift));
    }
    Ok(Tensor::from_vec(buf, (images.len(), shape.height, shape.width, shape.channels), device)?)
}

/// Inverse of [`images_to_tensor`]: one flat channel-last image per row.
pub fn tensor_to_images(t: &Tensor, scale: f32, shift: f32) -> Result<Vec<Vec<f32>>> {
    let n = t.dim(0)?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = if n == 0 { 0 } else { flat.len() / n };
    Ok(flat.chunks(per.max(1)).take(n).map(|img| img.iter().map(|v| scale * v + shift).collect()).collect())
}

/// Re-initializes every variable from a seeded stream, in name order.
///
/// Weights (rank >= 2) get `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; rank-1
/// tensors named `*.weight` (normalization gains) get ones, everything else
/// zeros. The CPU backend cannot be seeded, so this replaces the
/// initializers used when the layers were built.
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = seed::rng(seed, "init", 0);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let count: usize = dims.iter().product();
        let values: Vec<f32> = if dims.len() >= 2 {
            let fan_in: usize = dims[1..].iter().product();
            let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
            (0..count).map(|_| rng.random_range(-bound..=bound)).collect()
        } else if name.ends_with(".weight") {
            vec![1.0; count]
        } else {
            vec![0.0; count]
        };
        var.set(&Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Sum of squared entries of all weight matrices, for explicit L2 penalties.
pub fn l2_penalty(vars: &[Var]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for v in vars.iter().filter(|v| v.rank() >= 2) {
        let sq = v.as_tensor().sqr()?.sum_all()?;
        total = Some(match total {
            Some(t) => (t + sq)?,
            None => sq,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::zeros((), DType::F32, &Device::Cpu)?),
    }
}

pub fn save_weights(varmap: &VarMap, path: &Path) -> Result<()> {
    varmap.save(path)?;
    Ok(())
}

pub fn load_weights(varmap: &mut VarMap, path: &Path) -> Result<()> {
    varmap.load(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
}
