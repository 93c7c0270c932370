//! Convolution / batch-norm / ReLU blocks, their input gradients, and the
//! channel softmax used by the depth branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

/// Inference-mode batch normalization parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    /// `gamma = 1, beta = 0, mean = 0, var = 1`.
    pub fn identity(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f32, f32)> {
        (0..self.gamma.len())
            .map(|c| {
                let inv = 1.0 / (self.var[c] + self.eps).sqrt();
                let scale = self.gamma[c] * inv;
                (scale, self.beta[c] - self.mean[c] * scale)
            })
            .collect()
    }
}

/// Conv -> BN -> ReLU block with fixed parameters.
///
/// `weights` is laid out `(out_ch, in_ch, k_h, k_w)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CbrBlock {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: (usize, usize),
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub bn: BatchNorm,
}

impl CbrBlock {
    pub fn new(
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        weights: Vec<f32>,
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
        bn: BatchNorm,
    ) -> Result<Self> {
        let block = Self {
            out_ch,
            in_ch,
            kernel,
            weights,
            bias,
            stride,
            padding,
            bn,
        };
        block.validate()?;
        Ok(block)
    }

    /// Gaussian weights scaled by `gain / sqrt(fan_in)`, zero bias, identity BN.
    pub fn seeded(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f32,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (in_ch * kernel * kernel) as f32;
        let std = gain / fan_in.sqrt();
        let weights = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self::new(
            out_ch,
            in_ch,
            (kernel, kernel),
            weights,
            vec![0.0; out_ch],
            stride,
            padding,
            BatchNorm::identity(out_ch, 1e-5),
        )
    }

    /// A 1x1 block whose weight matrix is `matrix` (`out_ch x in_ch`, row-major).
    pub fn pointwise(matrix: Vec<f32>, out_ch: usize, in_ch: usize, bias: Vec<f32>) -> Result<Self> {
        Self::new(
            out_ch,
            in_ch,
            (1, 1),
            matrix,
            bias,
            1,
            0,
            BatchNorm::identity(out_ch, 1e-5),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.out_ch == 0 || self.in_ch == 0 || kh == 0 || kw == 0 || self.stride == 0 {
            return Err(Error::config("conv block with a zero dimension or stride"));
        }
        if self.weights.len() != self.out_ch * self.in_ch * kh * kw {
            return Err(Error::config(format!(
                "conv weights hold {} values, expected {}x{}x{}x{}",
                self.weights.len(),
                self.out_ch,
                self.in_ch,
                kh,
                kw
            )));
        }
        if self.bias.len() != self.out_ch {
            return Err(Error::config("conv bias length differs from out_ch"));
        }
        let bn = &self.bn;
        for (name, v) in [
            ("gamma", &bn.gamma),
            ("beta", &bn.beta),
            ("mean", &bn.mean),
            ("var", &bn.var),
        ] {
            if v.len() != self.out_ch {
                return Err(Error::config(format!("batch-norm {name} length differs from out_ch")));
            }
        }
        if let Some(v) = bn.var.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::config(format!("batch-norm variance must be > 0, got {v}")));
        }
        if !(bn.eps > 0.0) {
            return Err(Error::config("batch-norm epsilon must be > 0"));
        }
        Ok(())
    }

    #[inline]
    fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f32 {
        let (kh, kw) = self.kernel;
        self.weights[((oc * self.in_ch + ic) * kh + ky) * kw + kx]
    }

    /// Output dims for an input of `dims`.
    pub fn output_dims(&self, dims: Dims) -> Result<Dims> {
        if dims.channels != self.in_ch {
            return Err(Error::config(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, dims.channels
            )));
        }
        let axis = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < k {
                return Err(Error::config(format!(
                    "conv output is empty: input {len} + 2*{} < kernel {k}",
                    self.padding
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok(Dims::new(
            dims.batch,
            self.out_ch,
            axis(dims.height, self.kernel.0)?,
            axis(dims.width, self.kernel.1)?,
        ))
    }
}

/// Output indices `ox` in `[lo, hi)` whose input index `ox * stride + shift` lies in `[0, n_in)`.
fn tap_range(n_out: usize, n_in: isize, stride: isize, shift: isize) -> (usize, usize) {
    let ceil_div = |a: isize, b: isize| (a + b - 1).div_euclid(b);
    let lo = ceil_div(-shift, stride).max(0) as usize;
    let hi = (ceil_div(n_in - shift, stride).max(0) as usize).min(n_out);
    (lo, hi.max(lo))
}

/// Cross-correlation with stride and zero padding, plus per-channel bias.
pub fn conv2d(input: &FeatureMap, block: &CbrBlock) -> Result<FeatureMap> {
    block.validate()?;
    let id = input.dims();
    let od = block.output_dims(id)?;
    let (kh, kw) = block.kernel;
    let (s, p) = (block.stride as isize, block.padding as isize);
    let (ih, iw) = (id.height as isize, id.width as isize);
    let mut out = vec![0f32; od.len()];

    out.par_chunks_mut(od.plane())
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let b = plane_idx / od.channels;
            let oc = plane_idx % od.channels;
            let mut acc = vec![block.bias[oc] as f64; od.plane()];
            for ic in 0..id.channels {
                let in_plane = input.plane(b, ic);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = block.weight(oc, ic, ky, kx) as f64;
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..od.height {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * id.width..][..id.width];
                            let acc_row = &mut acc[oy * od.width..][..od.width];
                            let (lo, hi) = tap_range(od.width, iw, s, kx as isize - p);
                            for ox in lo..hi {
                                let ix = (ox as isize * s + kx as isize - p) as usize;
                                acc_row[ox] += w * in_row[ix] as f64;
                            }
                        }
                    }
                }
            }
            for (o, a) in out_plane.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
    FeatureMap::from_vec(od, out)
}

/// Gradient of [`conv2d`] with respect to its input, given the gradient of its output.
pub fn conv2d_backward_input(input_dims: Dims, block: &CbrBlock, upstream: &FeatureMap) -> Result<FeatureMap> {
    let od = block.output_dims(input_dims)?;
    if upstream.dims() != od {
        return Err(Error::config(format!(
            "conv backward: upstream {:?} does not match output {:?}",
            upstream.dims().as_array(),
            od.as_array()
        )));
    }
    let id = input_dims;
    let (kh, kw) = block.kernel;
    let (s, p) = (block.stride as isize, block.padding as isize);
    let (ih, iw) = (id.height as isize, id.width as isize);
    let mut grad = vec![0f32; id.len()];

    grad.par_chunks_mut(id.plane())
        .enumerate()
        .for_each(|(plane_idx, grad_plane)| {
            let b = plane_idx / id.channels;
            let ic = plane_idx % id.channels;
            let mut acc = vec![0f64; id.plane()];
            for oc in 0..od.channels {
                let up = upstream.plane(b, oc);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = block.weight(oc, ic, ky, kx) as f64;
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..od.height {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let up_row = &up[oy * od.width..][..od.width];
                            let base = iy as usize * id.width;
                            let (lo, hi) = tap_range(od.width, iw, s, kx as isize - p);
                            for ox in lo..hi {
                                let ix = (ox as isize * s + kx as isize - p) as usize;
                                acc[base + ix] += w * up_row[ox] as f64;
                            }
                        }
                    }
                }
            }
            for (o, a) in grad_plane.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
    FeatureMap::from_vec(id, grad)
}

/// Conv -> inference BN -> ReLU.
pub fn cbr(input: &FeatureMap, block: &CbrBlock) -> Result<FeatureMap> {
    Ok(cbr_forward(input, block)?.output)
}

/// Output of a CBR block together with what its backward pass needs.
#[derive(Clone, Debug)]
pub struct CbrTrace {
    pub output: FeatureMap,
    input_dims: Dims,
    /// `true` where the pre-activation was positive.
    active: Vec<bool>,
}

pub fn cbr_forward(input: &FeatureMap, block: &CbrBlock) -> Result<CbrTrace> {
    let mut out = conv2d(input, block)?;
    let od = out.dims();
    let affine = block.bn.affine();
    let mut active = vec![false; od.len()];
    let plane = od.plane();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % od.channels;
        let (scale, shift) = affine[c];
        let pre = *v * scale + shift;
        if pre > 0.0 {
            *v = pre;
            active[i] = true;
        } else {
            *v = 0.0;
        }
    }
    Ok(CbrTrace {
        output: out,
        input_dims: input.dims(),
        active,
    })
}

/// Gradient of a CBR block's input given the gradient of its output.
/// The ReLU derivative at exactly zero pre-activation is taken as 0.
pub fn cbr_backward_input(block: &CbrBlock, trace: &CbrTrace, upstream: &FeatureMap) -> Result<FeatureMap> {
    upstream.same_dims(&trace.output, "cbr backward")?;
    let od = upstream.dims();
    let affine = block.bn.affine();
    let plane = od.plane();
    let pre_grad: Vec<f32> = upstream
        .data()
        .iter()
        .zip(&trace.active)
        .enumerate()
        .map(|(i, (&g, &on))| {
            if on {
                g * affine[(i / plane) % od.channels].0
            } else {
                0.0
            }
        })
        .collect();
    let pre_grad = FeatureMap::from_vec(od, pre_grad)?;
    conv2d_backward_input(trace.input_dims, block, &pre_grad)
}

/// Applies a stack of CBR blocks in order.
pub fn cbr_stack(input: &FeatureMap, blocks: &[CbrBlock]) -> Result<FeatureMap> {
    let mut x = input.clone();
    for block in blocks {
        x = cbr(&x, block)?;
    }
    Ok(x)
}

/// Numerically stable softmax over the channel axis at every `(b, y, x)`.
pub fn softmax_channels(input: &FeatureMap) -> Result<FeatureMap> {
    input.ensure_finite("softmax input")?;
    let d = input.dims();
    let plane = d.plane();
    let mut out = input.clone();
    let per_batch = d.channels * plane;
    out.data_mut()
        .par_chunks_mut(per_batch)
        .for_each(|batch| {
            let mut logits = vec![0f64; d.channels];
            for px in 0..plane {
                let mut max = f64::NEG_INFINITY;
                for (c, l) in logits.iter_mut().enumerate() {
                    *l = batch[c * plane + px] as f64;
                    max = max.max(*l);
                }
                let mut total = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    total += *l;
                }
                for (c, l) in logits.iter().enumerate() {
                    batch[c * plane + px] = (l / total) as f32;
                }
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_map(dims: Dims, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_block(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, seed: u64) -> CbrBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = CbrBlock::seeded(in_ch, out_ch, k, stride, pad, 1.0, seed).unwrap();
        for b in block.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        let bn = &mut block.bn;
        for c in 0..out_ch {
            bn.gamma[c] = rng.random_range(0.5..1.5);
            bn.beta[c] = rng.random_range(-0.3..0.3);
            bn.mean[c] = rng.random_range(-0.2..0.2);
            bn.var[c] = rng.random_range(0.5..2.0);
        }
        block
    }

    /// Six-nested-loop reference convolution.
    fn reference_conv(input: &FeatureMap, block: &CbrBlock) -> Vec<f64> {
        let d = input.dims();
        let (kh, kw) = block.kernel;
        let (s, p) = (block.stride as isize, block.padding as isize);
        let oh = (d.height + 2 * block.padding - kh) / block.stride + 1;
        let ow = (d.width + 2 * block.padding - kw) / block.stride + 1;
        let mut out = Vec::new();
        for b in 0..d.batch {
            for oc in 0..block.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = block.bias[oc] as f64;
                        for ic in 0..block.in_ch {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize * s + ky as isize - p;
                                    let ix = ox as isize * s + kx as isize - p;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < d.height && (ix as usize) < d.width {
                                        acc += block.weights[((oc * block.in_ch + ic) * kh + ky) * kw + kx] as f64
                                            * input.get(b, ic, iy as usize, ix as usize) as f64;
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    fn reference_cbr(input: &FeatureMap, block: &CbrBlock) -> Vec<f64> {
        let conv = reference_conv(input, block);
        let od = block.output_dims(input.dims()).unwrap();
        conv.iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / od.plane()) % od.channels;
                let bn = &block.bn;
                let y = (v - bn.mean[c] as f64) / (bn.var[c] as f64 + bn.eps as f64).sqrt() * bn.gamma[c] as f64
                    + bn.beta[c] as f64;
                y.max(0.0)
            })
            .collect()
    }

    #[test]
    fn zero_input_isolates_bias() {
        let mut block = random_block(1, 1, 3, 1, 1, 3);
        block.bias = vec![0.5];
        let out = conv2d(&FeatureMap::zeros(Dims::new(1, 1, 3, 3)).unwrap(), &block).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn one_by_one_conv_scales() {
        let block = CbrBlock::pointwise(vec![2.0], 1, 1, vec![0.0]).unwrap();
        let input = random_map(Dims::new(1, 1, 4, 5), 1);
        let out = conv2d(&input, &block).unwrap();
        for (o, i) in out.data().iter().zip(input.data()) {
            assert_eq!(*o, 2.0 * i);
        }
    }

    #[test]
    fn conv_matches_loop_reference() {
        let input = random_map(Dims::new(1, 2, 5, 5), 11);
        let block = random_block(2, 3, 3, 1, 1, 12);
        let out = conv2d(&input, &block).unwrap();
        let reference = reference_conv(&input, &block);
        assert_eq!(out.dims(), Dims::new(1, 3, 5, 5));
        for (a, b) in out.data().iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn output_size_formula() {
        let block = random_block(1, 1, 3, 2, 1, 0);
        let od = block.output_dims(Dims::new(1, 1, 256, 704)).unwrap();
        assert_eq!((od.height, od.width), (128, 352));
        let block = random_block(1, 1, 5, 1, 0, 0);
        assert!(block.output_dims(Dims::new(1, 1, 3, 8)).is_err());
        assert!(block.output_dims(Dims::new(1, 2, 8, 8)).is_err());
    }

    #[test]
    fn invalid_bn_rejected() {
        let mut block = random_block(1, 1, 1, 1, 0, 0);
        block.bn.var[0] = 0.0;
        assert!(cbr(&random_map(Dims::new(1, 1, 2, 2), 0), &block).is_err());
        block.bn.var[0] = 1.0;
        block.bn.eps = 0.0;
        assert!(block.validate().is_err());
    }

    #[test]
    fn identity_bn_reduces_to_relu_conv() {
        let input = random_map(Dims::new(1, 2, 6, 6), 5);
        let mut block = random_block(2, 2, 3, 1, 1, 6);
        block.bn = BatchNorm::identity(2, 1e-12);
        let conv = conv2d(&input, &block).unwrap();
        let out = cbr(&input, &block).unwrap();
        for (o, c) in out.data().iter().zip(conv.data()) {
            assert!((o - c.max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_preactivation_is_zeroed() {
        let mut block = random_block(1, 2, 1, 1, 0, 0);
        block.weights = vec![0.0, 0.0];
        block.bias = vec![-1.0, -3.0];
        block.bn = BatchNorm::identity(2, 1e-5);
        let out = cbr(&random_map(Dims::new(1, 1, 3, 3), 2), &block).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cbr_backward_matches_finite_differences() {
        let input = random_map(Dims::new(1, 2, 5, 6), 21);
        let block = random_block(2, 3, 3, 2, 1, 22);
        let up = random_map(block.output_dims(input.dims()).unwrap(), 23);
        let trace = cbr_forward(&input, &block).unwrap();
        let grad = cbr_backward_input(&block, &trace, &up).unwrap();
        let objective = |x: &FeatureMap| -> f64 {
            let y = reference_cbr(x, &block);
            y.iter().zip(up.data()).map(|(a, &b)| a * b as f64).sum()
        };
        let h = 1e-3f32;
        for i in 0..input.dims().len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
            assert!((fd - grad.data()[i] as f64).abs() < 2e-3, "i={i} fd={fd} an={}", grad.data()[i]);
        }
    }

    #[test]
    fn softmax_closed_form_cases() {
        let uniform = FeatureMap::filled(Dims::new(1, 4, 2, 2), 0.3).unwrap();
        for v in softmax_channels(&uniform).unwrap().data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
        let two = FeatureMap::from_vec(Dims::new(1, 2, 1, 1), vec![0.0, 3f32.ln()]).unwrap();
        let out = softmax_channels(&two).unwrap();
        assert!((out.data()[0] - 0.25).abs() < 1e-7);
        assert!((out.data()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let bad = FeatureMap::from_vec(Dims::new(1, 2, 1, 1), vec![f32::NAN, 0.0]).unwrap();
        assert!(softmax_channels(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn conv_and_cbr_match_reference(
            b in 1usize..=2, ic in 1usize..=4, oc in 1usize..=3,
            h in 3usize..=8, w in 3usize..=8,
            k in prop::sample::select(vec![1usize, 3]),
            stride in 1usize..=2, seed in any::<u64>(),
        ) {
            let pad = k / 2;
            let input = random_map(Dims::new(b, ic, h, w), seed);
            let block = random_block(ic, oc, k, stride, pad, seed ^ 0x5a5a);
            let conv = conv2d(&input, &block).unwrap();
            for (a, r) in conv.data().iter().zip(reference_conv(&input, &block)) {
                prop_assert!((*a as f64 - r).abs() < 1e-5);
            }
            let out = cbr(&input, &block).unwrap();
            for (a, r) in out.data().iter().zip(reference_cbr(&input, &block)) {
                prop_assert!((*a as f64 - r).abs() < 1e-5);
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            c in 1usize..=12, seed in any::<u64>(), shift in -20.0f32..20.0,
        ) {
            let logits = random_map(Dims::new(2, c, 3, 4), seed).map(|v| v * 8.0);
            let p = softmax_channels(&logits).unwrap();
            let shifted = softmax_channels(&logits.map(|v| v + shift)).unwrap();
            let d = p.dims();
            for b in 0..d.batch {
                for y in 0..d.height {
                    for x in 0..d.width {
                        let s: f64 = (0..c).map(|ch| p.get(b, ch, y, x) as f64).sum();
                        prop_assert!((s - 1.0).abs() < 1e-6);
                    }
                }
            }
            for (a, b) in p.data().iter().zip(shifted.data()) {
                prop_assert!(*a > 0.0 && *a <= 1.0);
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
