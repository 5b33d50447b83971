//! Temporal-consistency measures for translated sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{backward_warp_with, FlowField};
use crate::grid::{Boundary, FrameImage, LatentGrid};
use crate::mask::BinaryMask;

/// Warp errors are reported in units of `1e-3`.
pub const WARP_ERROR_SCALE: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    /// MSE in `[0, 1]` pixel units for each consecutive pair.
    pub per_pair: Vec<f64>,
    pub mean: Option<f64>,
    /// Same restricted to valid cells; `None` where a pair has no valid cell.
    pub masked_per_pair: Vec<Option<f64>>,
    pub masked_mean: Option<f64>,
    /// Mean variance of flow-corresponded latent values across key frames.
    pub token_consistency: Option<f64>,
}

impl MetricReport {
    pub fn mean_scaled(&self) -> Option<f64> {
        self.mean.map(|m| m * WARP_ERROR_SCALE)
    }

    pub fn masked_mean_scaled(&self) -> Option<f64> {
        self.masked_mean.map(|m| m * WARP_ERROR_SCALE)
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Compares each frame with its predecessor pulled along `flows[i - 1]`
/// (a field on frame `i`'s grid pointing into frame `i - 1`).
pub fn warp_error(
    edited: &[FrameImage],
    flows: &[FlowField],
    valid: Option<&[BinaryMask]>,
    boundary: Boundary,
) -> Result<MetricReport> {
    if edited.is_empty() || flows.len() != edited.len() - 1 {
        return Err(Error::Validation(format!(
            "{} frames need {} flows, got {}",
            edited.len(),
            edited.len().saturating_sub(1),
            flows.len()
        )));
    }
    if let Some(v) = valid {
        if v.len() != flows.len() {
            return Err(Error::Validation("one valid mask per pair expected".into()));
        }
    }
    let mut per_pair = Vec::with_capacity(flows.len());
    let mut masked = Vec::with_capacity(flows.len());
    for (i, flow) in flows.iter().enumerate() {
        let (prev, cur) = (edited[i].grid(), edited[i + 1].grid());
        if !prev.same_shape(cur) {
            return Err(Error::dim(format!("frames {i} and {} differ in size", i + 1)));
        }
        let warped = backward_warp_with(prev, flow, boundary)?;
        let (c, h, w) = cur.dims();
        let cell_sq: Vec<f64> = (0..h * w)
            .map(|p| {
                (0..c)
                    .map(|ch| {
                        let d = warped.plane(ch)[p] as f64 - cur.plane(ch)[p] as f64;
                        d * d
                    })
                    .sum::<f64>()
            })
            .collect();
        per_pair.push(cell_sq.iter().sum::<f64>() / (c * h * w) as f64);
        if let Some(v) = valid {
            let m = &v[i];
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::dim(format!("valid mask {i} does not match frame size")));
            }
            let kept = m.count_ones();
            masked.push((kept > 0).then(|| {
                let sum: f64 = cell_sq.iter().zip(m.bits()).filter(|(_, &b)| b).map(|(s, _)| s).sum();
                sum / (c * kept) as f64
            }));
        }
    }
    let mean = mean_of(per_pair.iter().copied());
    let masked_mean = mean_of(masked.iter().flatten().copied());
    Ok(MetricReport {
        per_pair,
        mean,
        masked_per_pair: masked,
        masked_mean,
        token_consistency: None,
    })
}

/// Pulls every later latent onto the anchor grid along `anchor_flows[k - 1]`
/// and averages the per-cell sample variance (denominator `n - 1`) over
/// cells whose correspondences all stay inside the grid.
///
/// Returns `None` for fewer than two latents or when no cell qualifies.
pub fn token_consistency(
    latents: &[LatentGrid],
    anchor_flows: &[FlowField],
    boundary: Boundary,
) -> Result<Option<f64>> {
    if latents.is_empty() {
        return Ok(None);
    }
    if anchor_flows.len() != latents.len() - 1 {
        return Err(Error::Validation(format!(
            "{} latents need {} anchor flows, got {}",
            latents.len(),
            latents.len() - 1,
            anchor_flows.len()
        )));
    }
    let anchor = &latents[0];
    if let Some(i) = latents.iter().position(|z| !z.same_shape(anchor)) {
        return Err(Error::dim(format!("latent {i} differs in shape from the anchor")));
    }
    if latents.len() < 2 {
        return Ok(None);
    }
    let (c, h, w) = anchor.dims();
    let mut inside = vec![true; h * w];
    let mut pulled = vec![anchor.clone()];
    for (z, flow) in latents[1..].iter().zip(anchor_flows) {
        if boundary == Boundary::Clamp {
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = flow.at(y, x);
                    let (tx, ty) = (x as f64 + u as f64, y as f64 + v as f64);
                    if !(0.0..=(w - 1) as f64).contains(&tx) || !(0.0..=(h - 1) as f64).contains(&ty) {
                        inside[y * w + x] = false;
                    }
                }
            }
        }
        pulled.push(backward_warp_with(z, flow, boundary)?);
    }
    let n = pulled.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for p in (0..h * w).filter(|&p| inside[p]) {
            let mean = pulled.iter().map(|z| z.plane(ch)[p] as f64).sum::<f64>() / n;
            let var = pulled
                .iter()
                .map(|z| (z.plane(ch)[p] as f64 - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            total += var;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(h: usize, w: usize, f: impl FnMut(usize, usize, usize) -> f32) -> FrameImage {
        FrameImage::from_fn(h, w, f).unwrap()
    }

    #[test]
    fn identical_frames_have_zero_error() {
        let f = frame(4, 5, |c, y, x| (c + y + x) as f32 / 12.0);
        let zero = FlowField::zeros(4, 5).unwrap();
        let r = warp_error(&[f.clone(), f.clone(), f], &[zero.clone(), zero], None, Boundary::Clamp).unwrap();
        assert_eq!(r.per_pair, vec![0.0, 0.0]);
        assert_eq!(r.mean, Some(0.0));
        assert_eq!(r.masked_mean, None);
    }

    #[test]
    fn constant_offset_gives_its_square() {
        let a = frame(3, 3, |_, y, x| 0.25 + 0.0625 * (y * 3 + x) as f32 / 8.0);
        let b = frame(3, 3, |c, y, x| a.grid().get(c, y, x) + 0.125);
        let zero = FlowField::zeros(3, 3).unwrap();
        let r = warp_error(&[a, b], &[zero], None, Boundary::Clamp).unwrap();
        assert!((r.per_pair[0] - 0.015625).abs() < 1e-9);
    }

    #[test]
    fn masked_variant_uses_valid_cells_only() {
        let a = frame(1, 2, |_, _, _| 0.0);
        let b = frame(1, 2, |_, _, x| if x == 0 { 0.0 } else { 0.5 });
        let zero = FlowField::zeros(1, 2).unwrap();
        let valid = [BinaryMask::new(1, 2, vec![true, false]).unwrap()];
        let r = warp_error(
            &[a.clone(), b.clone()],
            std::slice::from_ref(&zero),
            Some(&valid),
            Boundary::Clamp,
        )
        .unwrap();
        assert_eq!(r.masked_mean, Some(0.0));
        assert_eq!(r.mean, Some(0.125));
        let none = [BinaryMask::filled(1, 2, false).unwrap()];
        let r = warp_error(&[a, b], &[zero], Some(&none), Boundary::Clamp).unwrap();
        assert_eq!(r.masked_per_pair, vec![None]);
        assert_eq!(r.masked_mean, None);
    }

    #[test]
    fn warp_error_follows_the_flow() {
        let a = frame(1, 4, |_, _, x| x as f32 / 4.0);
        let b = frame(1, 4, |_, _, x| x.saturating_sub(1) as f32 / 4.0);
        let back = FlowField::constant(1, 4, -1.0, 0.0).unwrap();
        let r = warp_error(&[a, b], &[back], None, Boundary::Clamp).unwrap();
        assert_eq!(r.mean, Some(0.0));
    }

    #[test]
    fn shape_errors() {
        let a = frame(2, 2, |_, _, _| 0.0);
        let zero = FlowField::zeros(2, 2).unwrap();
        assert!(warp_error(
            std::slice::from_ref(&a),
            std::slice::from_ref(&zero),
            None,
            Boundary::Clamp
        )
        .is_err());
        let z = LatentGrid::zeros(1, 2, 2).unwrap();
        let y = LatentGrid::zeros(2, 2, 2).unwrap();
        assert!(token_consistency(&[z, y], &[zero], Boundary::Clamp).is_err());
    }

    #[test]
    fn identical_latents_are_consistent() {
        let z = LatentGrid::from_fn(2, 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f32).unwrap();
        let zero = FlowField::zeros(3, 3).unwrap();
        let tc = token_consistency(&[z.clone(), z.clone(), z], &[zero.clone(), zero], Boundary::Clamp).unwrap();
        assert_eq!(tc, Some(0.0));
    }

    #[test]
    fn shifted_latents_are_consistent_under_their_flow() {
        let z0 = LatentGrid::from_fn(1, 1, 6, |_, _, x| x as f32).unwrap();
        let z1 = LatentGrid::from_fn(1, 1, 6, |_, _, x| x.saturating_sub(2) as f32).unwrap();
        let flow = FlowField::constant(1, 6, 2.0, 0.0).unwrap();
        let tc = token_consistency(&[z0, z1], &[flow], Boundary::Clamp).unwrap();
        assert_eq!(tc, Some(0.0));
    }

    #[test]
    fn out_of_bounds_cells_are_skipped() {
        let z0 = LatentGrid::zeros(1, 1, 2).unwrap();
        let z1 = LatentGrid::new(1, 1, 2, vec![0.0, 9.0]).unwrap();
        let flow = FlowField::new(1, 2, vec![0.0, 5.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(
            token_consistency(&[z0, z1], &[flow], Boundary::Clamp).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn independent_latents_match_population_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, h, w) = (6, 16, 16);
        let latents: Vec<LatentGrid> = (0..n)
            .map(|_| LatentGrid::from_fn(1, h, w, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap())
            .collect();
        let flows = vec![FlowField::zeros(h, w).unwrap(); n - 1];
        let tc = token_consistency(&latents, &flows, Boundary::Clamp).unwrap().unwrap();
        let population = 1.0 / 3.0;
        assert!((tc - population).abs() < 0.1 * population, "{tc}");
    }

    proptest! {
        #[test]
        fn color_relabel_keeps_static_error_zero(values in prop::collection::vec(0.0f32..1.0, 12), gamma in 0.5f32..2.0) {
            let base = frame(2, 2, |c, y, x| values[c * 4 + y * 2 + x]);
            let mapped = FrameImage::from_grid(base.grid().map(|v| v.powf(gamma)).unwrap()).unwrap();
            let zero = FlowField::zeros(2, 2).unwrap();
            let r = warp_error(&[mapped.clone(), mapped], &[zero], None, Boundary::Clamp).unwrap();
            prop_assert_eq!(r.mean, Some(0.0));
        }

        #[test]
        fn masked_error_never_exceeds_worst_case(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = frame(4, 4, |_, _, _| rng.random_range(0.0..1.0));
            let b = frame(4, 4, |_, _, _| rng.random_range(0.0..1.0));
            let zero = FlowField::zeros(4, 4).unwrap();
            let full = [BinaryMask::filled(4, 4, true).unwrap()];
            let r = warp_error(&[a, b], &[zero], Some(&full), Boundary::Clamp).unwrap();
            prop_assert!(r.per_pair[0] >= 0.0);
            prop_assert!((r.masked_mean.unwrap() - r.mean.unwrap()).abs() < 1e-12);
        }
    }
}
