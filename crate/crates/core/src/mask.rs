//! Occlusion, residual and binary alignment masks.
//!
//! The binary mask marks cells where the warped previous-frame latent is kept
//! (`1`) versus where the freshly denoised latent is used (`0`). A cell is kept
//! iff `occlusion - alpha * residual > threshold`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{backward_warp_with, forward_splat_with, FlowField};
use crate::grid::{average_pool, Boundary, FrameImage, LatentGrid};

/// Single-channel map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl UnitMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::dim(format!(
                "map {width}x{height} cannot hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("map values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn to_grid(&self) -> LatentGrid {
        LatentGrid::new(1, self.height, self.width, self.values.clone()).expect("map is finite")
    }

    fn same_dims(&self, other: &UnitMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(format!(
                "maps differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Splat occupancy of an all-ones field; `0` marks disoccluded cells.
pub type OcclusionMap = UnitMap;

/// Channel-mean absolute difference between the warped previous frame and
/// the current frame.
pub type ResidualMap = UnitMap;

/// Strictly two-valued `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::dim(format!(
                "mask {width}x{height} cannot hold {} cells",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `1 x H x W` grid holding exactly `0.0` / `1.0`.
    pub fn to_grid(&self) -> LatentGrid {
        LatentGrid::new(
            1,
            self.height,
            self.width,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask grid is finite")
    }

    /// Accepts single-channel grids whose values are exactly `0.0` or `1.0`.
    pub fn from_grid(grid: &LatentGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::dim("masks have a single channel"));
        }
        let bits = grid
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::Validation(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid.height(), grid.width(), bits)
    }

    /// Cellwise logical AND.
    pub fn and(&self, other: &BinaryMask) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim("mask dims differ"));
        }
        Self::new(
            self.height,
            self.width,
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        )
    }
}

/// Weight of the residual term and decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub alpha: f32,
    pub threshold: f32,
}

impl MaskParams {
    pub fn new(alpha: f32, threshold: f32) -> Result<Self> {
        let p = Self { alpha, threshold };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Validation(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Validation(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            threshold: 0.6,
        }
    }
}

/// Occupancy of the current frame: splat ones along the previous->current
/// field (defined on the previous grid) and clamp to `[0, 1]`.
pub fn occlusion_map(flow_prev_to_cur: &FlowField) -> Result<OcclusionMap> {
    occlusion_map_with(flow_prev_to_cur, Boundary::Clamp)
}

pub fn occlusion_map_with(flow_prev_to_cur: &FlowField, boundary: Boundary) -> Result<OcclusionMap> {
    let (h, w) = (flow_prev_to_cur.height(), flow_prev_to_cur.width());
    let ones = LatentGrid::filled(1, h, w, 1.0)?;
    let occupancy = forward_splat_with(&ones, flow_prev_to_cur, boundary)?;
    UnitMap::new(h, w, occupancy.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect())
}

/// `|warp(prev, flow_cur_to_prev) - cur|`, averaged over channels and
/// clamped to `[0, 1]`.
pub fn residual_map(prev: &FrameImage, cur: &FrameImage, flow_cur_to_prev: &FlowField) -> Result<ResidualMap> {
    residual_map_with(prev, cur, flow_cur_to_prev, Boundary::Clamp)
}

pub fn residual_map_with(
    prev: &FrameImage,
    cur: &FrameImage,
    flow_cur_to_prev: &FlowField,
    boundary: Boundary,
) -> Result<ResidualMap> {
    if !prev.grid().same_shape(cur.grid()) {
        return Err(Error::dim("frames differ in shape"));
    }
    let warped = backward_warp_with(prev.grid(), flow_cur_to_prev, boundary)?;
    let (c, h, w) = warped.dims();
    let values = (0..h * w)
        .map(|i| {
            let sum: f64 = (0..c)
                .map(|ch| (warped.plane(ch)[i] as f64 - cur.grid().plane(ch)[i] as f64).abs())
                .sum();
            ((sum / c as f64) as f32).clamp(0.0, 1.0)
        })
        .collect();
    UnitMap::new(h, w, values)
}

/// Cell is `1` iff `o - alpha * r > threshold` (strict).
pub fn binary_mask(o: &OcclusionMap, r: &ResidualMap, params: &MaskParams) -> Result<BinaryMask> {
    params.validate()?;
    o.same_dims(r)?;
    let bits = o
        .values
        .iter()
        .zip(&r.values)
        .map(|(&o, &r)| o - params.alpha * r > params.threshold)
        .collect();
    BinaryMask::new(o.height, o.width, bits)
}

/// Pools a pixel-resolution mask by `factor` and re-binarizes at `>= 0.5`.
pub fn mask_to_latent_res(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    let pooled = average_pool(&mask.to_grid(), factor)?;
    BinaryMask::new(
        pooled.height(),
        pooled.width(),
        pooled.data().iter().map(|&v| v >= 0.5).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: &[f32]) -> UnitMap {
        UnitMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn occlusion_cases() {
        let o = occlusion_map(&FlowField::zeros(3, 4).unwrap()).unwrap();
        assert!(o.values().iter().all(|&v| v == 1.0));

        let o = occlusion_map(&FlowField::constant(3, 4, 1.0, 0.0).unwrap()).unwrap();
        for y in 0..3 {
            assert_eq!(o.at(y, 0), 0.0);
            assert!((1..4).all(|x| o.at(y, x) == 1.0));
        }
    }

    #[test]
    fn converging_flow_clamps_and_vacates() {
        // Pixels 0 and 1 of a 1x3 row both land on cell 1; pixel 2 stays.
        let flow = FlowField::new(1, 3, vec![1.0, 0.0, 0.0], vec![0.0; 3]).unwrap();
        // Splat oracle: cell 0 receives nothing, cell 1 receives 2, cell 2 receives 1.
        let o = occlusion_map(&flow).unwrap();
        assert_eq!(o.values(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn residual_cases() {
        let prev = FrameImage::from_fn(4, 4, |c, y, x| (c + y + x) as f32 / 12.0).unwrap();
        let zero = FlowField::zeros(4, 4).unwrap();
        let r = residual_map(&prev, &prev, &zero).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));

        let brighter = FrameImage::from_grid(prev.grid().map(|v| v + 0.2).unwrap()).unwrap();
        let r = residual_map(&prev, &brighter, &zero).unwrap();
        assert!(r.values().iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn residual_vanishes_for_exact_shift_away_from_border() {
        let pattern = |c: usize, y: i64, x: i64| ((c as i64 * 7 + y * 3 + x * 5).rem_euclid(11)) as f32 / 10.0;
        let prev = FrameImage::from_fn(6, 8, |c, y, x| pattern(c, y as i64, x as i64)).unwrap();
        // Content moves right by 2: cur(x) = prev(x - 2).
        let cur = FrameImage::from_fn(6, 8, |c, y, x| pattern(c, y as i64, x as i64 - 2)).unwrap();
        let flow = FlowField::constant(6, 8, -2.0, 0.0).unwrap();
        let r = residual_map(&prev, &cur, &flow).unwrap();
        for y in 0..6 {
            for x in 2..8 {
                assert_eq!(r.at(y, x), 0.0);
            }
        }
    }

    #[test]
    fn mask_truth_table_at_default_params() {
        let p = MaskParams::default();
        assert_eq!((p.alpha, p.threshold), (5.0, 0.6));
        let m = binary_mask(&map(1, 3, &[1.0, 0.0, 1.0]), &map(1, 3, &[0.0, 0.05, 0.1]), &p).unwrap();
        assert_eq!(m.bits(), &[true, false, false]);
    }

    #[test]
    fn mask_is_strict_at_threshold() {
        let p = MaskParams::new(0.0, 0.5).unwrap();
        let m = binary_mask(&map(1, 2, &[0.5, 0.50001]), &map(1, 2, &[0.0, 0.0]), &p).unwrap();
        assert_eq!(m.bits(), &[false, true]);
    }

    #[test]
    fn params_are_validated() {
        assert!(MaskParams::new(-1.0, 0.5).is_err());
        assert!(MaskParams::new(1.0, 0.0).is_err());
        assert!(MaskParams::new(1.0, 1.0).is_err());
        assert!(binary_mask(&map(1, 1, &[1.0]), &map(1, 2, &[0.0, 0.0]), &MaskParams::default()).is_err());
    }

    #[test]
    fn latent_res_reduction() {
        let ones = BinaryMask::filled(4, 4, true).unwrap();
        assert!(mask_to_latent_res(&ones, 2).unwrap().bits().iter().all(|&b| b));
        let zeros = BinaryMask::filled(4, 4, false).unwrap();
        assert!(mask_to_latent_res(&zeros, 4).unwrap().bits().iter().all(|&b| !b));
        let three = BinaryMask::new(2, 2, vec![true, true, true, false]).unwrap();
        assert!(mask_to_latent_res(&three, 2).unwrap().bits()[0]);
        let one = BinaryMask::new(2, 2, vec![false, false, true, false]).unwrap();
        assert!(!mask_to_latent_res(&one, 2).unwrap().bits()[0]);
        assert!(mask_to_latent_res(&one, 3).is_err());
    }

    #[test]
    fn mask_grid_round_trip_and_rejects_fractions() {
        let m = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(BinaryMask::from_grid(&m.to_grid()).unwrap(), m);
        let bad = LatentGrid::new(1, 1, 1, vec![0.5]).unwrap();
        assert!(BinaryMask::from_grid(&bad).is_err());
    }

    #[test]
    fn permutation_flow_has_full_occupancy() {
        // Swap pixel pairs (0,1), (2,3) along each row.
        let flow = FlowField::from_fn(3, 4, |_, x| (if x % 2 == 0 { 1.0 } else { -1.0 }, 0.0)).unwrap();
        let o = occlusion_map(&flow).unwrap();
        assert!(o.values().iter().all(|&v| v == 1.0));
    }

    fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f32..=1.0, n)
    }

    proptest! {
        #[test]
        fn raising_occlusion_or_lowering_residual_never_clears_a_cell(
            o in unit_vec(16), r in unit_vec(16), bump in unit_vec(16),
            alpha in 0.0f32..10.0, thr in 0.01f32..0.99,
        ) {
            let p = MaskParams::new(alpha, thr).unwrap();
            let base = binary_mask(&map(4, 4, &o), &map(4, 4, &r), &p).unwrap();
            let o2: Vec<f32> = o.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect();
            let r2: Vec<f32> = r.iter().zip(&bump).map(|(a, b)| (a - b).max(0.0)).collect();
            let raised = binary_mask(&map(4, 4, &o2), &map(4, 4, &r), &p).unwrap();
            let lowered = binary_mask(&map(4, 4, &o), &map(4, 4, &r2), &p).unwrap();
            for i in 0..16 {
                prop_assert!(!base.bits()[i] || raised.bits()[i]);
                prop_assert!(!base.bits()[i] || lowered.bits()[i]);
            }
        }

        #[test]
        fn zero_alpha_depends_only_on_occlusion(o in unit_vec(9), r in unit_vec(9), thr in 0.01f32..0.99) {
            let p = MaskParams::new(0.0, thr).unwrap();
            let m = binary_mask(&map(3, 3, &o), &map(3, 3, &r), &p).unwrap();
            let expected: Vec<bool> = o.iter().map(|&v| v > thr).collect();
            prop_assert_eq!(m.bits(), &expected[..]);
        }

        #[test]
        fn integer_permutation_shift_has_full_occupancy_under_wrap(
            h in 1usize..12, w in 1usize..12, dx in -20i32..20, dy in -20i32..20,
        ) {
            let flow = FlowField::constant(h, w, dx as f32, dy as f32).unwrap();
            let o = occlusion_map_with(&flow, Boundary::Wrap).unwrap();
            prop_assert!(o.values().iter().all(|&v| v == 1.0));
        }
    }
}
