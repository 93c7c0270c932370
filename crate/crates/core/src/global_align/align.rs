//! Offset-field alignment: forward models, analytic gradients and the optimizer.

use serde::{Deserialize, Serialize};

use crate::camera::NoiseSpec;
use crate::error::{Error, Result};
use crate::loss::mse_loss;
use crate::nn::{cbr, cbr_backward_input, cbr_forward, CbrBlock};
use crate::sample::{grid_sample_bilinear, grid_sample_grad_offsets, OffsetField};
use crate::tensor::FeatureMap;

/// `F_B^D`: LiDAR BEV warped into deform weights, multiplied with itself, then CBR.
/// `f_n` is the noisy concatenated BEV the offsets are meant to explain; it
/// only fixes the expected batch and grid here.
pub fn mm_align_forward(f_n: &FeatureMap, f_l: &FeatureMap, offsets: &OffsetField, block: &CbrBlock) -> Result<FeatureMap> {
    check_grid(f_n, f_l, offsets)?;
    let weights = grid_sample_bilinear(f_l, offsets)?;
    cbr(&weights.mul(f_l)?, block)
}

fn check_grid(f_n: &FeatureMap, f_l: &FeatureMap, offsets: &OffsetField) -> Result<()> {
    let (n, l, o) = (f_n.dims(), f_l.dims(), offsets.dims());
    if n.batch != l.batch || n.spatial() != l.spatial() || o.batch != l.batch || o.spatial() != l.spatial() {
        return Err(Error::config(format!(
            "noisy BEV {:?}, LiDAR BEV {:?} and offsets {:?} disagree",
            n.as_array(),
            l.as_array(),
            o.as_array()
        )));
    }
    Ok(())
}

/// Which pathway the offset field warps.
#[derive(Clone, Debug)]
pub enum AlignModel {
    /// [`mm_align_forward`]: the LiDAR BEV is warped and gates itself.
    DeformBev { f_l: FeatureMap, block: CbrBlock },
    /// The camera block of the noisy BEV is warped and re-fused with the LiDAR
    /// block: `cbr(concat(f_l, grid_sample(f_c_noisy, offsets)))`.
    CameraRefuse {
        f_l: FeatureMap,
        f_c: FeatureMap,
        block: CbrBlock,
    },
}

impl AlignModel {
    /// Splits a noisy concatenated BEV into the camera re-fusion model.
    pub fn camera_refuse(f_n: &FeatureMap, lidar_channels: usize, block: CbrBlock) -> Result<Self> {
        let c = f_n.dims().channels;
        if lidar_channels == 0 || lidar_channels >= c {
            return Err(Error::config(format!(
                "LiDAR channel count {lidar_channels} does not split {c} channels"
            )));
        }
        Ok(Self::CameraRefuse {
            f_l: f_n.slice_channels(0, lidar_channels)?,
            f_c: f_n.slice_channels(lidar_channels, c - lidar_channels)?,
            block,
        })
    }

    fn warped(&self) -> &FeatureMap {
        match self {
            Self::DeformBev { f_l, .. } => f_l,
            Self::CameraRefuse { f_c, .. } => f_c,
        }
    }

    pub fn forward(&self, offsets: &OffsetField) -> Result<FeatureMap> {
        Ok(self.forward_traced(offsets)?.0)
    }

    fn forward_traced(&self, offsets: &OffsetField) -> Result<(FeatureMap, crate::nn::CbrTrace)> {
        let sampled = grid_sample_bilinear(self.warped(), offsets)?;
        let (input, block) = match self {
            Self::DeformBev { f_l, block } => (sampled.mul(f_l)?, block),
            Self::CameraRefuse { f_l, block, .. } => (FeatureMap::concat_channels(&[f_l, &sampled])?, block),
        };
        let trace = cbr_forward(&input, block)?;
        Ok((trace.output.clone(), trace))
    }

    /// Loss against `target` and its gradient with respect to the offsets.
    pub fn loss_and_grad(&self, offsets: &OffsetField, target: &FeatureMap) -> Result<(f64, OffsetField)> {
        let (out, trace) = self.forward_traced(offsets)?;
        let lg = mse_loss(&out, target)?;
        let g_in = match self {
            Self::DeformBev { block, .. } | Self::CameraRefuse { block, .. } => cbr_backward_input(block, &trace, &lg.grad)?,
        };
        let g_sampled = match self {
            Self::DeformBev { f_l, .. } => g_in.mul(f_l)?,
            Self::CameraRefuse { f_l, f_c, .. } => g_in.slice_channels(f_l.dims().channels, f_c.dims().channels)?,
        };
        let grad = grid_sample_grad_offsets(self.warped(), offsets, &g_sampled)?;
        Ok((lg.loss, grad))
    }

    pub fn loss(&self, offsets: &OffsetField, target: &FeatureMap) -> Result<f64> {
        Ok(mse_loss(&self.forward(offsets)?, target)?.loss)
    }

    pub fn offset_shape(&self) -> (usize, usize, usize) {
        let d = self.warped().dims();
        (d.batch, d.height, d.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Offsets are clamped to `[-clamp, clamp]` cells after every step.
    pub clamp: f32,
    /// Step halvings tried before an iteration counts as no progress.
    pub max_halvings: usize,
    /// Iterations without decrease before stopping with the best field so far.
    pub stall_patience: usize,
    /// Stop early once the loss is at or below this value.
    pub loss_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 300,
            clamp: 8.0,
            max_halvings: 10,
            stall_patience: 50,
            loss_tolerance: 1e-12,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and > 0"));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::config("offset clamp must be finite and > 0"));
        }
        if self.stall_patience == 0 {
            return Err(Error::config("stall patience must be >= 1"));
        }
        if !(self.loss_tolerance >= 0.0) {
            return Err(Error::config("loss tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// One line of the optimizer log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub mean_abs_du: f64,
    pub mean_abs_dv: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Iterations,
    Converged,
    Stalled,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub offsets: OffsetField,
    /// Loss before any step, then after each iteration.
    pub losses: Vec<f64>,
    pub log: Vec<IterRecord>,
    pub iters: usize,
    pub stop: StopReason,
}

impl OptimizeResult {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("loss curve holds the initial loss")
    }

    pub fn stalled(&self) -> bool {
        self.stop == StopReason::Stalled
    }

    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }
}

fn record(iter: usize, loss: f64, offsets: &OffsetField) -> IterRecord {
    let (mean_abs_du, mean_abs_dv) = offsets.interior_mean_abs(0);
    IterRecord {
        iter,
        loss,
        mean_abs_du,
        mean_abs_dv,
    }
}

fn finite_loss(loss: f64, iter: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical(format!("alignment loss became {loss} at iteration {iter}")))
    }
}

/// Descends on a zero-initialized offset field.
///
/// Steps are Adam-scaled per cell. A step is accepted only if it lowers the
/// loss; otherwise it is halved up to `max_halvings` times. The recorded loss
/// curve is therefore non-increasing.
pub fn optimize_offsets(model: &AlignModel, target: &FeatureMap, cfg: &OptimizerConfig) -> Result<OptimizeResult> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    cfg.validate()?;
    let (b, h, w) = model.offset_shape();
    let mut offsets = OffsetField::zeros(b, h, w)?;
    let (loss0, mut grad) = model.loss_and_grad(&offsets, target)?;
    let mut loss = finite_loss(loss0, 0)?;
    let mut losses = vec![loss];
    let mut log = vec![record(0, loss, &offsets)];
    let n = offsets.as_map().data().len();
    let (mut m, mut v) = (vec![0f64; n], vec![0f64; n]);
    let mut since_decrease = 0;
    let mut stop = StopReason::Iterations;
    let mut iters = 0;
    for iter in 1..=cfg.iterations {
        if loss <= cfg.loss_tolerance {
            stop = StopReason::Converged;
            break;
        }
        iters = iter;
        let t = iter as i32;
        let step: Vec<f64> = grad
            .as_map()
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let g = g as f64;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / (1.0 - BETA1.powi(t));
                let v_hat = v[i] / (1.0 - BETA2.powi(t));
                cfg.learning_rate * m_hat / (v_hat.sqrt() + EPS)
            })
            .collect();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let mut trial = offsets.clone();
            for (o, s) in trial.as_map_mut().data_mut().iter_mut().zip(&step) {
                *o = (*o as f64 - scale * s) as f32;
            }
            trial.clamp(cfg.clamp);
            // the full step is usually accepted, so only it pays for the gradient up front
            let (trial_loss, trial_grad) = if scale == 1.0 {
                let (l, g) = model.loss_and_grad(&trial, target)?;
                (l, Some(g))
            } else {
                (model.loss(&trial, target)?, None)
            };
            if finite_loss(trial_loss, iter)? < loss {
                let trial_grad = match trial_grad {
                    Some(g) => g,
                    None => model.loss_and_grad(&trial, target)?.1,
                };
                accepted = Some((trial, trial_loss, trial_grad));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((trial, trial_loss, trial_grad)) => {
                offsets = trial;
                loss = trial_loss;
                grad = trial_grad;
                since_decrease = 0;
            }
            None => since_decrease += 1,
        }
        losses.push(loss);
        log.push(record(iter, loss, &offsets));
        if since_decrease >= cfg.stall_patience {
            stop = StopReason::Stalled;
            break;
        }
    }
    Ok(OptimizeResult {
        offsets,
        losses,
        log,
        iters,
        stop,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Train,
    Eval,
}

/// Offset noise in effect at `epoch_fraction` of training: the configured
/// noise in training, none at evaluation.
pub fn offset_noise_schedule(mode: NoiseMode, epoch_fraction: f64, train: &NoiseSpec) -> Result<NoiseSpec> {
    if !(0.0..=1.0).contains(&epoch_fraction) {
        return Err(Error::config(format!("epoch fraction {epoch_fraction} is outside [0, 1]")));
    }
    Ok(match mode {
        NoiseMode::Train => *train,
        NoiseMode::Eval => NoiseSpec::ZERO,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn identity_warp_reduces_to_square() {
        let f_l = FeatureMap::from_fn(Dims::new(1, 2, 4, 5), |_, c, y, x| (c + y + x) as f32 * 0.1).unwrap();
        let block = CbrBlock::seeded(2, 2, 1, 1, 0, 1.0, 3).unwrap();
        let zero = OffsetField::zeros(1, 4, 5).unwrap();
        let out = mm_align_forward(&f_l, &f_l, &zero, &block).unwrap();
        assert_eq!(out, cbr(&f_l.mul(&f_l).unwrap(), &block).unwrap());
    }

    #[test]
    fn flat_lidar_gives_flat_weights_inside() {
        let f_l = FeatureMap::filled(Dims::new(1, 1, 8, 8), 2.0).unwrap();
        let offsets = OffsetField::from_map(
            FeatureMap::from_fn(Dims::new(1, 2, 8, 8), |_, c, y, x| {
                let toward = if c == 0 { 3.5 - x as f32 } else { 3.5 - y as f32 };
                toward * 0.5
            })
            .unwrap(),
        )
        .unwrap();
        let w = grid_sample_bilinear(&f_l, &offsets).unwrap();
        assert!(w.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn schedule_modes() {
        let train = NoiseSpec {
            rot_deg: 2.0,
            trans_m: 0.3,
            bev_shift_max: 5,
        };
        assert_eq!(offset_noise_schedule(NoiseMode::Eval, 0.5, &train).unwrap(), NoiseSpec::ZERO);
        assert_eq!(offset_noise_schedule(NoiseMode::Train, 0.5, &train).unwrap(), train);
        assert_eq!(
            offset_noise_schedule(NoiseMode::Train, 0.5, &train).unwrap(),
            offset_noise_schedule(NoiseMode::Train, 0.5, &train).unwrap()
        );
        assert!(offset_noise_schedule(NoiseMode::Train, 1.5, &train).is_err());
    }

    #[test]
    fn rejects_mismatched_grids() {
        let a = FeatureMap::zeros(Dims::new(1, 1, 4, 4)).unwrap();
        let b = FeatureMap::zeros(Dims::new(1, 1, 4, 5)).unwrap();
        let block = CbrBlock::seeded(1, 1, 1, 1, 0, 1.0, 0).unwrap();
        assert!(mm_align_forward(&a, &b, &OffsetField::zeros(1, 4, 5).unwrap(), &block).is_err());
    }
}
