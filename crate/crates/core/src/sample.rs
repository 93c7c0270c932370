//! Bilinear grid sampling driven by a per-cell offset field.
//!
//! Sample positions are `(x + du, y + dv)` in cell units. Corners outside the
//! grid contribute zero. Each position is interpolated inside the cell
//! `(x0, x0 + 1]` with `x0 = ceil(px) - 1`, so a position that lands exactly on
//! a grid line takes the derivative of the cell to its left (lower index).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

/// Per-cell displacement `(du, dv)`: channel 0 is `du` (along x), channel 1 is `dv` (along y).
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField(FeatureMap);

impl OffsetField {
    pub fn zeros(batch: usize, height: usize, width: usize) -> Result<Self> {
        Ok(Self(FeatureMap::zeros(Dims::new(batch, 2, height, width))?))
    }

    /// Every cell displaced by the same `(du, dv)`.
    pub fn constant(batch: usize, height: usize, width: usize, du: f32, dv: f32) -> Result<Self> {
        let map = FeatureMap::from_fn(Dims::new(batch, 2, height, width), |_, c, _, _| {
            if c == 0 {
                du
            } else {
                dv
            }
        })?;
        Ok(Self(map))
    }

    pub fn from_map(map: FeatureMap) -> Result<Self> {
        if map.dims().channels != 2 {
            return Err(Error::config(format!(
                "offset field needs 2 channels, got {}",
                map.dims().channels
            )));
        }
        Ok(Self(map))
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn as_map_mut(&mut self) -> &mut FeatureMap {
        &mut self.0
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    #[inline]
    pub fn du(&self, b: usize, y: usize, x: usize) -> f32 {
        self.0.get(b, 0, y, x)
    }

    #[inline]
    pub fn dv(&self, b: usize, y: usize, x: usize) -> f32 {
        self.0.get(b, 1, y, x)
    }

    /// Clamps both components to `[-limit, limit]`.
    pub fn clamp(&mut self, limit: f32) {
        for v in self.0.data_mut() {
            *v = v.clamp(-limit, limit);
        }
    }

    /// Mean of `(du, dv)` over cells at least `margin` away from every border.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        self.interior_reduce(margin, |v| v)
    }

    /// Mean of `(|du|, |dv|)` over cells at least `margin` away from every border.
    pub fn interior_mean_abs(&self, margin: usize) -> (f64, f64) {
        self.interior_reduce(margin, f64::abs)
    }

    fn interior_reduce(&self, margin: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
        let d = self.dims();
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for b in 0..d.batch {
            for y in margin..d.height.saturating_sub(margin) {
                for x in margin..d.width.saturating_sub(margin) {
                    su += f(self.du(b, y, x) as f64);
                    sv += f(self.dv(b, y, x) as f64);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return (0.0, 0.0);
        }
        (su / n as f64, sv / n as f64)
    }
}

fn check_shapes(input: &FeatureMap, offsets: &OffsetField) -> Result<()> {
    let (i, o) = (input.dims(), offsets.dims());
    if i.batch != o.batch || i.height != o.height || i.width != o.width {
        return Err(Error::config(format!(
            "grid sample: offsets {:?} do not match input {:?}",
            o.as_array(),
            i.as_array()
        )));
    }
    Ok(())
}

/// Lower corner and fractional weight along one axis.
#[inline]
fn cell(pos: f32) -> (isize, f32) {
    let x0 = pos.ceil() - 1.0;
    (x0 as isize, pos - x0)
}

/// Bilinear footprint of one sample position: four corners with weights, and
/// the weights' derivatives with respect to the position.
struct Footprint {
    x0: isize,
    y0: isize,
    fx: f32,
    fy: f32,
}

impl Footprint {
    #[inline]
    fn new(px: f32, py: f32) -> Self {
        let (x0, fx) = cell(px);
        let (y0, fy) = cell(py);
        Self { x0, y0, fx, fy }
    }

    /// `(value, d/dpx, d/dpy)` of the bilinear interpolant over `plane`.
    #[inline]
    fn eval(&self, plane: &[f32], h: usize, w: usize) -> (f32, f32, f32) {
        let at = |y: isize, x: isize| -> f32 {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                plane[y as usize * w + x as usize]
            } else {
                0.0
            }
        };
        let v00 = at(self.y0, self.x0);
        let v01 = at(self.y0, self.x0 + 1);
        let v10 = at(self.y0 + 1, self.x0);
        let v11 = at(self.y0 + 1, self.x0 + 1);
        let (fx, fy) = (self.fx, self.fy);
        let top = (1.0 - fx) * v00 + fx * v01;
        let bottom = (1.0 - fx) * v10 + fx * v11;
        let value = (1.0 - fy) * top + fy * bottom;
        let d_px = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
        let d_py = bottom - top;
        (value, d_px, d_py)
    }
}

/// Samples every `(b, c)` plane of `input` at `(x + du, y + dv)`.
pub fn grid_sample_bilinear(input: &FeatureMap, offsets: &OffsetField) -> Result<FeatureMap> {
    check_shapes(input, offsets)?;
    let d = input.dims();
    let (h, w) = d.spatial();
    let mut out = vec![0f32; d.len()];
    out.par_chunks_mut(d.plane())
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let b = plane_idx / d.channels;
            let c = plane_idx % d.channels;
            let plane = input.plane(b, c);
            for y in 0..h {
                for x in 0..w {
                    let fp = Footprint::new(x as f32 + offsets.du(b, y, x), y as f32 + offsets.dv(b, y, x));
                    out_plane[y * w + x] = fp.eval(plane, h, w).0;
                }
            }
        });
    FeatureMap::from_vec(d, out)
}

/// `dL/d(offsets)` given `dL/d(output) = upstream` for [`grid_sample_bilinear`].
pub fn grid_sample_grad_offsets(
    input: &FeatureMap,
    offsets: &OffsetField,
    upstream: &FeatureMap,
) -> Result<OffsetField> {
    check_shapes(input, offsets)?;
    input.same_dims(upstream, "grid sample gradient")?;
    let d = input.dims();
    let (h, w) = d.spatial();
    let mut grad = vec![0f32; d.batch * 2 * d.plane()];
    grad.par_chunks_mut(2 * d.plane())
        .enumerate()
        .for_each(|(b, g)| {
            let (gu, gv) = g.split_at_mut(d.plane());
            for y in 0..h {
                for x in 0..w {
                    let fp = Footprint::new(x as f32 + offsets.du(b, y, x), y as f32 + offsets.dv(b, y, x));
                    let (mut su, mut sv) = (0f64, 0f64);
                    for c in 0..d.channels {
                        let up = upstream.plane(b, c)[y * w + x];
                        if up == 0.0 {
                            continue;
                        }
                        let (_, dpx, dpy) = fp.eval(input.plane(b, c), h, w);
                        su += (up * dpx) as f64;
                        sv += (up * dpy) as f64;
                    }
                    gu[y * w + x] = su as f32;
                    gv[y * w + x] = sv as f32;
                }
            }
        });
    OffsetField::from_map(FeatureMap::from_vec(Dims::new(d.batch, 2, h, w), grad)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offsets_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = FeatureMap::from_fn(Dims::new(2, 3, 5, 7), |_, _, _, _| rng.random_range(-10.0..10.0)).unwrap();
        let out = grid_sample_bilinear(&input, &OffsetField::zeros(2, 5, 7).unwrap()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn ramp_shifts_by_offset() {
        let ramp = FeatureMap::from_fn(Dims::new(1, 1, 6, 8), |_, _, _, x| x as f32).unwrap();
        let out = grid_sample_bilinear(&ramp, &OffsetField::constant(1, 6, 8, 1.0, 0.0).unwrap()).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(out.get(0, 0, y, x), x as f32 + 1.0);
            }
            // last column samples beyond the grid
            assert_eq!(out.get(0, 0, y, 7), 0.0);
        }
        let half = grid_sample_bilinear(&ramp, &OffsetField::constant(1, 6, 8, 0.25, 0.0).unwrap()).unwrap();
        assert!((half.get(0, 0, 2, 3) - 3.25).abs() < 1e-6);
    }

    #[test]
    fn far_outside_samples_are_zero() {
        let input = FeatureMap::filled(Dims::new(1, 2, 4, 4), 5.0).unwrap();
        let out = grid_sample_bilinear(&input, &OffsetField::constant(1, 4, 4, 100.0, -3.0).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let input = FeatureMap::zeros(Dims::new(1, 1, 4, 4)).unwrap();
        let offsets = OffsetField::zeros(1, 4, 5).unwrap();
        assert!(matches!(grid_sample_bilinear(&input, &offsets), Err(Error::Config(_))));
        let up = FeatureMap::zeros(Dims::new(1, 2, 4, 4)).unwrap();
        assert!(grid_sample_grad_offsets(&input, &OffsetField::zeros(1, 4, 4).unwrap(), &up).is_err());
    }

    #[test]
    fn flat_field_has_zero_gradient() {
        let input = FeatureMap::filled(Dims::new(1, 2, 6, 6), 3.0).unwrap();
        let offsets = OffsetField::constant(1, 6, 6, 0.3, -0.4).unwrap();
        let up = FeatureMap::filled(Dims::new(1, 2, 6, 6), 1.0).unwrap();
        let g = grid_sample_grad_offsets(&input, &offsets, &up).unwrap();
        for b in 0..1 {
            for y in 1..5 {
                for x in 1..5 {
                    assert_eq!(g.du(b, y, x), 0.0);
                    assert_eq!(g.dv(b, y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn ramp_gradient_is_one_on_interior() {
        let ramp = FeatureMap::from_fn(Dims::new(1, 1, 6, 6), |_, _, _, x| x as f32).unwrap();
        let up = FeatureMap::filled(Dims::new(1, 1, 6, 6), 1.0).unwrap();
        let g = grid_sample_grad_offsets(&ramp, &OffsetField::zeros(1, 6, 6).unwrap(), &up).unwrap();
        for y in 1..6 {
            for x in 1..6 {
                assert_eq!(g.du(0, y, x), 1.0, "({y},{x})");
                assert_eq!(g.dv(0, y, x), 0.0, "({y},{x})");
            }
        }
    }
}
