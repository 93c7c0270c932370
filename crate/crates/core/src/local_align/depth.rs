//! Depth encoding, DepthNet and the depth-weighted context product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cbr_stack, softmax_channels, CbrBlock};
use crate::tensor::{Dims, FeatureMap};

/// Channel widths of the camera-side networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    /// Synthetic camera-feature channels.
    pub cam: usize,
    /// Dual Transform output channels (split evenly between branches).
    pub sk: usize,
    /// Context channels.
    pub context: usize,
    /// Hidden width inside DepthNet.
    pub hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            cam: 64,
            sk: 32,
            context: 80,
            hidden: 96,
        }
    }
}

impl Widths {
    pub fn validate(&self) -> Result<()> {
        if self.cam == 0 || self.context == 0 || self.hidden == 0 {
            return Err(Error::config("channel widths must be >= 1"));
        }
        if self.sk < 2 || self.sk % 2 != 0 {
            return Err(Error::config("dual transform width must be even and >= 2"));
        }
        Ok(())
    }
}

/// Two CBR stacks: one over `D_S`, one over `D_K`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTransform {
    pub sparse: Vec<CbrBlock>,
    pub neighbors: Vec<CbrBlock>,
}

impl DualTransform {
    /// Three stride-2 3x3 blocks per branch, each branch ending at `out / 2` channels.
    pub fn seeded(k: usize, out: usize, seed: u64) -> Result<Self> {
        if out < 2 || out % 2 != 0 {
            return Err(Error::config("dual transform width must be even and >= 2"));
        }
        let half = out / 2;
        let branch = |in_ch: usize, seed: u64| -> Result<Vec<CbrBlock>> {
            let widths = [in_ch, half, half, half];
            (0..3)
                .map(|i| CbrBlock::seeded(widths[i], widths[i + 1], 3, 2, 1, 1.4, seed + i as u64))
                .collect()
        };
        Ok(Self {
            sparse: branch(1, seed)?,
            neighbors: branch(k, seed + 100)?,
        })
    }
}

fn total_stride(blocks: &[CbrBlock]) -> usize {
    blocks.iter().map(|b| b.stride).product()
}

/// Encodes `D_S` and `D_K` and concatenates the two branches into `D_SK`.
pub fn dual_transform(d_s: &FeatureMap, d_k: &FeatureMap, blocks: &DualTransform) -> Result<FeatureMap> {
    let (ds, dk) = (d_s.dims(), d_k.dims());
    if ds.channels != 1 || ds.batch != dk.batch || ds.spatial() != dk.spatial() {
        return Err(Error::config(format!(
            "dual transform inputs {:?} and {:?} disagree",
            ds.as_array(),
            dk.as_array()
        )));
    }
    let (h, w) = ds.spatial();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::config(format!("image {h}x{w} is not divisible by 8")));
    }
    for branch in [&blocks.sparse, &blocks.neighbors] {
        if total_stride(branch) != 8 {
            return Err(Error::config("each dual transform branch must have total stride 8"));
        }
    }
    let (a, b) = rayon::join(
        || cbr_stack(d_s, &blocks.sparse),
        || cbr_stack(d_k, &blocks.neighbors),
    );
    let (a, b) = (a?, b?);
    if a.dims().spatial() != (h / 8, w / 8) || b.dims().spatial() != (h / 8, w / 8) {
        return Err(Error::config("dual transform output is not at 1/8 resolution"));
    }
    FeatureMap::concat_channels(&[&a, &b])
}

/// Three CBR sets mapping `concat(F_Cam, D_SK)` to `depth_bins + context` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet {
    pub blocks: Vec<CbrBlock>,
    pub depth_bins: usize,
    pub context: usize,
}

impl DepthNet {
    pub fn seeded(in_ch: usize, hidden: usize, depth_bins: usize, context: usize, seed: u64) -> Result<Self> {
        let widths = [in_ch, hidden, hidden, depth_bins + context];
        let blocks = (0..3)
            .map(|i| CbrBlock::seeded(widths[i], widths[i + 1], 3, 1, 1, 1.4, seed + i as u64))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            depth_bins,
            context,
        })
    }
}

/// Runs DepthNet and splits its output into `(depth_logits, context)`.
pub fn depthnet(f_cam: &FeatureMap, d_sk: &FeatureMap, net: &DepthNet) -> Result<(FeatureMap, FeatureMap)> {
    let (fc, ds) = (f_cam.dims(), d_sk.dims());
    if fc.batch != ds.batch || fc.spatial() != ds.spatial() {
        return Err(Error::config(format!(
            "camera features {:?} and depth encoding {:?} disagree",
            fc.as_array(),
            ds.as_array()
        )));
    }
    let x = FeatureMap::concat_channels(&[f_cam, d_sk])?;
    let f_dc = cbr_stack(&x, &net.blocks)?;
    let c_dc = f_dc.dims().channels;
    if net.depth_bins + net.context > c_dc || net.depth_bins == 0 {
        return Err(Error::config(format!(
            "split ({}, {}) does not fit {c_dc} channels",
            net.depth_bins, net.context
        )));
    }
    Ok((
        f_dc.slice_channels(0, net.depth_bins)?,
        f_dc.slice_channels(net.depth_bins, net.context)?,
    ))
}

/// `softmax(depth_logits)` outer `context`, channels laid out `c_ctx * D + d`.
pub fn depth_context_product(depth_logits: &FeatureMap, context: &FeatureMap) -> Result<FeatureMap> {
    let (dl, cx) = (depth_logits.dims(), context.dims());
    if dl.batch != cx.batch || dl.spatial() != cx.spatial() {
        return Err(Error::config(format!(
            "depth logits {:?} and context {:?} disagree",
            dl.as_array(),
            cx.as_array()
        )));
    }
    let probs = softmax_channels(depth_logits)?;
    let bins = dl.channels;
    let out_dims = Dims::new(dl.batch, cx.channels * bins, dl.height, dl.width);
    let plane = dl.plane();
    let mut out = vec![0f32; out_dims.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let b = idx / (cx.channels * bins);
        let c = (idx / bins) % cx.channels;
        let d = idx % bins;
        let p = probs.plane(b, d);
        let v = context.plane(b, c);
        for ((o, p), v) in dst.iter_mut().zip(p).zip(v) {
            *o = p * v;
        }
    });
    FeatureMap::from_vec(out_dims, out)
}

/// Seeded camera features: a smooth random field per channel plus, when
/// `depth` is given, a scaled copy of the pooled inverse depth.
pub fn synthetic_camera_features(
    batch: usize,
    channels: usize,
    size: (usize, usize),
    depth: Option<&FeatureMap>,
    seed: u64,
) -> Result<FeatureMap> {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<[f32; 4]> = (0..batch * channels)
        .map(|_| {
            [
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.2..1.0),
            ]
        })
        .collect();
    let inv_depth = match depth {
        Some(d) => Some(pooled_inverse_depth(d, size)?),
        None => None,
    };
    FeatureMap::from_fn(Dims::new(batch, channels, h, w), |b, c, y, x| {
        let [fx, fy, phase, amp] = params[b * channels + c];
        let wave = amp * (fx * x as f32 + fy * y as f32 + phase).sin();
        match &inv_depth {
            Some(inv) if c % 2 == 0 => wave * 0.5 + inv.get(b, 0, y, x),
            _ => wave,
        }
    })
}

/// Mean of `1 / depth` over the positive pixels of each output cell.
fn pooled_inverse_depth(depth: &FeatureMap, size: (usize, usize)) -> Result<FeatureMap> {
    let d = depth.dims();
    let (h, w) = size;
    if d.channels != 1 || d.height % h != 0 || d.width % w != 0 {
        return Err(Error::config("depth render does not tile the feature plane"));
    }
    let (sy, sx) = (d.height / h, d.width / w);
    FeatureMap::from_fn(Dims::new(d.batch, 1, h, w), |b, _, y, x| {
        let (mut total, mut n) = (0f32, 0u32);
        for yy in y * sy..(y + 1) * sy {
            for xx in x * sx..(x + 1) * sx {
                let z = depth.get(b, 0, yy, xx);
                if z > 0.0 {
                    total += 1.0 / z;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f32
        }
    })
}
