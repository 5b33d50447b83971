//! Optical-flow fields, Middlebury `.flo` I/O, backward warping and forward
//! splatting.
//!
//! A field attached to grid `G` maps each pixel `p` of `G` to the location
//! `p + (u(p), v(p))` in the other frame. [`backward_warp`] pulls a source
//! grid through a field defined on the target; [`forward_splat`] pushes a
//! source grid along a field defined on the source.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{average_pool, sample_bilinear, Boundary, FrameImage, LatentGrid};

/// Middlebury sentinel, the bytes `PIEH` read as a little-endian `f32`.
pub const FLO_SENTINEL: f32 = 202021.25;

/// Per-pixel displacement in pixels; `u` points right, `v` points down.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("flow dims must be positive"));
        }
        let n = height * width;
        if u.len() != n || v.len() != n {
            return Err(Error::dim(format!(
                "flow {width}x{height} needs {n} values per component, got {} and {}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite flow value".into()));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, du: f32, dv: f32) -> Result<Self> {
        let n = height * width;
        Self::new(height, width, vec![du; n], vec![dv; n])
    }

    /// Builds a field from `f(y, x) -> (u, v)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Result<Self> {
        let n = height * width;
        let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(height, width, u, v)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// True when some displacement exceeds the frame extent.
    pub fn exceeds_sanity_bound(&self) -> bool {
        self.u.iter().any(|d| d.abs() > self.width as f32) || self.v.iter().any(|d| d.abs() > self.height as f32)
    }

    /// True when every target `p + flow(p)` lies inside `[0, w-1] x [0, h-1]`.
    pub fn targets_in_bounds(&self) -> bool {
        (0..self.height).all(|y| {
            (0..self.width).all(|x| {
                let (du, dv) = self.at(y, x);
                let (tx, ty) = (x as f64 + du as f64, y as f64 + dv as f64);
                (0.0..=(self.width - 1) as f64).contains(&tx) && (0.0..=(self.height - 1) as f64).contains(&ty)
            })
        })
    }

    /// The field as a `2 x H x W` grid with `u` in channel 0.
    pub fn to_grid(&self) -> LatentGrid {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        LatentGrid::new(2, self.height, self.width, data).expect("flow is finite")
    }

    pub fn from_grid(grid: &LatentGrid) -> Result<Self> {
        if grid.channels() != 2 {
            return Err(Error::dim(format!(
                "flow grids have 2 channels, got {}",
                grid.channels()
            )));
        }
        Self::new(
            grid.height(),
            grid.width(),
            grid.plane(0).to_vec(),
            grid.plane(1).to_vec(),
        )
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.len());
        out.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_flo_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        if f32::from_le_bytes(bytes[..4].try_into().unwrap()) != FLO_SENTINEL {
            return Err(Error::Format("bad .flo sentinel".into()));
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if width <= 0 || height <= 0 {
            return Err(Error::Format(format!("invalid .flo size {width}x{height}")));
        }
        let (w, h) = (width as usize, height as usize);
        let expected = 12 + 8 * w * h;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes in .flo",
                bytes.len() - expected
            )));
        }
        let mut u = Vec::with_capacity(w * h);
        let mut v = Vec::with_capacity(w * h);
        for pair in bytes[12..].chunks_exact(8) {
            u.push(f32::from_le_bytes(pair[..4].try_into().unwrap()));
            v.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
        }
        Self::new(h, w, u, v)
    }
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    FlowField::from_flo_bytes(&fs::read(path)?)
}

pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, field.to_flo_bytes())?;
    Ok(())
}

fn check_dims(grid: &LatentGrid, flow: &FlowField) -> Result<()> {
    if grid.height() != flow.height || grid.width() != flow.width {
        return Err(Error::dim(format!(
            "grid {}x{} does not match flow {}x{}",
            grid.width(),
            grid.height(),
            flow.width,
            flow.height
        )));
    }
    Ok(())
}

/// Samples `source` at `p + flow(p)` for every target pixel `p`, clamping
/// sample coordinates to the border.
pub fn backward_warp(source: &LatentGrid, flow: &FlowField) -> Result<LatentGrid> {
    backward_warp_with(source, flow, Boundary::Clamp)
}

pub fn backward_warp_with(source: &LatentGrid, flow: &FlowField, boundary: Boundary) -> Result<LatentGrid> {
    check_dims(source, flow)?;
    let (c, h, w) = source.dims();
    LatentGrid::from_fn(c, h, w, |ch, y, x| {
        let (du, dv) = flow.at(y, x);
        sample_bilinear(
            source.plane(ch),
            h,
            w,
            x as f64 + du as f64,
            y as f64 + dv as f64,
            boundary,
        )
    })
}

pub fn backward_warp_frame(source: &FrameImage, flow: &FlowField, boundary: Boundary) -> Result<FrameImage> {
    FrameImage::from_grid(backward_warp_with(source.grid(), flow, boundary)?)
}

/// Pushes each source pixel onto the (up to) four cells around
/// `p + flow(p)` with bilinear weights, summing overlaps. Deposits that fall
/// outside the grid are discarded.
pub fn forward_splat(source: &LatentGrid, flow: &FlowField) -> Result<LatentGrid> {
    forward_splat_with(source, flow, Boundary::Clamp)
}

pub fn forward_splat_with(source: &LatentGrid, flow: &FlowField, boundary: Boundary) -> Result<LatentGrid> {
    check_dims(source, flow)?;
    let (c, h, w) = source.dims();
    let mut acc = vec![0.0f64; c * h * w];
    // Fixed pixel order keeps the accumulation bit-reproducible.
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = flow.at(y, x);
            let tx = x as f64 + du as f64;
            let ty = y as f64 + dv as f64;
            let taps = splat_taps(tx, ty, h, w, boundary);
            for ch in 0..c {
                let value = source.get(ch, y, x) as f64;
                let plane = &mut acc[ch * h * w..(ch + 1) * h * w];
                for &(cell, weight) in taps.iter().flatten() {
                    plane[cell] += value * weight;
                }
            }
        }
    }
    LatentGrid::new(c, h, w, acc.into_iter().map(|v| v as f32).collect())
}

/// Target cells and bilinear weights for one splatted sample.
fn splat_taps(tx: f64, ty: f64, h: usize, w: usize, boundary: Boundary) -> [Option<(usize, f64)>; 4] {
    let (x0, fx) = (tx.floor(), tx - tx.floor());
    let (y0, fy) = (ty.floor(), ty - ty.floor());
    let resolve = |coord: f64, n: usize| -> Option<usize> {
        match boundary {
            Boundary::Clamp => (coord >= 0.0 && coord < n as f64).then_some(coord as usize),
            Boundary::Wrap => Some((coord.rem_euclid(n as f64) as usize) % n),
        }
    };
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    corners.map(|(cx, cy, weight)| {
        let (ix, iy) = (resolve(cx, w)?, resolve(cy, h)?);
        Some((iy * w + ix, weight))
    })
}

/// Average-pools both components by `factor` and rescales displacements to
/// coarse-grid units.
pub fn downsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    let pooled = average_pool(&flow.to_grid(), factor)?;
    let scale = factor as f32;
    FlowField::from_grid(&pooled.map(|d| d / scale)?)
}

/// Chains `first` (grid A -> grid B) with `second` (grid B -> grid C) into a
/// field on grid A pointing into grid C: `first(p) + second(p + first(p))`.
pub fn compose_flows(first: &FlowField, second: &FlowField, boundary: Boundary) -> Result<FlowField> {
    if first.height != second.height || first.width != second.width {
        return Err(Error::dim("composed flows must share dimensions"));
    }
    let pulled = backward_warp_with(&second.to_grid(), first, boundary)?;
    let u = first.u.iter().zip(pulled.plane(0)).map(|(a, b)| a + b).collect();
    let v = first.v.iter().zip(pulled.plane(1)).map(|(a, b)| a + b).collect();
    FlowField::new(first.height, first.width, u, v)
}
