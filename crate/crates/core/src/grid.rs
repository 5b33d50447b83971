//! Dense tensor value types, resampling helpers and the `LWTENSOR` file format.
//!
//! All grids are stored row-major with channel planes outermost, so element
//! `(c, y, x)` lives at `c * height * width + y * width + x`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic tag opening every tensor file.
pub const TENSOR_MAGIC: &[u8; 8] = b"LWTENSOR";

/// A `channels x height x width` grid of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "grid dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::dim(format!(
                "grid {channels}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    /// Builds a grid by evaluating `f(c, y, x)` for every cell.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.dims() == other.dims()
    }

    /// Applies `f` elementwise. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Combines two same-shaped grids elementwise.
    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// An RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage(LatentGrid);

impl FrameImage {
    /// Wraps a 3-channel grid, clamping every value into `[0, 1]`.
    pub fn from_grid(grid: LatentGrid) -> Result<Self> {
        if grid.channels() != 3 {
            return Err(Error::dim(format!("frames have 3 channels, got {}", grid.channels())));
        }
        let clamped = grid.map(|v| v.clamp(0.0, 1.0))?;
        Ok(Self(clamped))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        Self::from_grid(LatentGrid::from_fn(3, height, width, f)?)
    }

    /// Maps interleaved 8-bit RGB to `[0, 1]` by `value / 255`.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::dim(format!(
                "rgb buffer of {} bytes does not match {width}x{height}",
                rgb.len()
            )));
        }
        Self::from_fn(height, width, |c, y, x| rgb[(y * width + x) * 3 + c] as f32 / 255.0)
    }

    /// Interleaved 8-bit RGB, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = vec![0u8; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * 3 + c] = (self.0.get(c, y, x) * 255.0).round() as u8;
                }
            }
        }
        out
    }

    /// Snaps every value to the nearest 8-bit level, i.e. what a PNG round trip yields.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.height(), self.width(), &self.to_rgb8()).expect("quantized frame keeps its shape")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn grid(&self) -> &LatentGrid {
        &self.0
    }

    pub fn into_grid(self) -> LatentGrid {
        self.0
    }
}

impl AsRef<LatentGrid> for FrameImage {
    fn as_ref(&self) -> &LatentGrid {
        &self.0
    }
}

/// Mean over each `factor x factor` block, per channel.
pub fn average_pool(grid: &LatentGrid, factor: usize) -> Result<LatentGrid> {
    let (c, h, w) = grid.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!(
            "{h}x{w} is not divisible by pooling factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    LatentGrid::from_fn(c, oh, ow, |ch, oy, ox| {
        let mut acc = 0.0f64;
        for y in oy * factor..(oy + 1) * factor {
            for x in ox * factor..(ox + 1) * factor {
                acc += grid.get(ch, y, x) as f64;
            }
        }
        (acc / norm) as f32
    })
}

/// How sample coordinates that leave the grid are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Sampling clamps to the border; splat deposits outside are dropped.
    #[default]
    Clamp,
    /// Toroidal wrap-around in both axes.
    Wrap,
}

/// Integer neighbours and fractional offset along one axis.
#[inline]
pub(crate) fn axis_taps(coord: f64, n: usize, boundary: Boundary) -> (usize, usize, f64) {
    match boundary {
        Boundary::Clamp => {
            let x = coord.clamp(0.0, (n - 1) as f64);
            let i0 = x.floor();
            let frac = x - i0;
            let i0 = i0 as usize;
            (i0, (i0 + 1).min(n - 1), frac)
        }
        Boundary::Wrap => {
            let x = coord.rem_euclid(n as f64);
            let i0f = x.floor();
            let frac = x - i0f;
            let i0 = (i0f as usize) % n;
            (i0, (i0 + 1) % n, frac)
        }
    }
}

/// Bilinear sample of one `h x w` plane at `(x, y)`.
///
/// Uses the `a + t * (b - a)` form so integer coordinates return the stored
/// value bit-exactly.
#[inline]
pub fn sample_bilinear(plane: &[f32], height: usize, width: usize, x: f64, y: f64, boundary: Boundary) -> f32 {
    let (x0, x1, fx) = axis_taps(x, width, boundary);
    let (y0, y1, fy) = axis_taps(y, height, boundary);
    let at = |yy: usize, xx: usize| plane[yy * width + xx] as f64;
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let top = lerp(at(y0, x0), at(y0, x1), fx);
    let bottom = lerp(at(y1, x0), at(y1, x1), fx);
    lerp(top, bottom, fy) as f32
}

/// Bilinear upsampling by an integer factor with pixel-centre alignment and
/// border clamp.
pub fn upsample_bilinear(grid: &LatentGrid, factor: usize) -> Result<LatentGrid> {
    if factor == 0 {
        return Err(Error::dim("upsampling factor must be positive"));
    }
    let (c, h, w) = grid.dims();
    let f = factor as f64;
    LatentGrid::from_fn(c, h * factor, w * factor, |ch, y, x| {
        let sx = (x as f64 + 0.5) / f - 0.5;
        let sy = (y as f64 + 0.5) / f - 0.5;
        sample_bilinear(grid.plane(ch), h, w, sx, sy, Boundary::Clamp)
    })
}

/// A decoded tensor file of any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || expected != data.len() {
            return Err(Error::dim(format!(
                "dims {dims:?} describe {expected} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Interprets rank-3 tensors as `C x H x W` and rank-2 tensors as `1 x H x W`.
    pub fn into_grid(self) -> Result<LatentGrid> {
        match self.dims[..] {
            [c, h, w] => LatentGrid::new(c, h, w, self.data),
            [h, w] => LatentGrid::new(1, h, w, self.data),
            _ => Err(Error::dim(format!(
                "expected a rank 2 or 3 tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let expected: usize = self.dims.iter().product();
        if self.dims.is_empty() || expected != self.data.len() {
            return Err(Error::dim(format!(
                "dims {:?} describe {expected} values, payload has {}",
                self.dims,
                self.data.len()
            )));
        }
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != TENSOR_MAGIC {
            return Err(Error::Format("missing LWTENSOR magic".into()));
        }
        let mut cursor = 8usize;
        let read_u32 = |cursor: &mut usize| -> Result<u32> {
            let end = *cursor + 4;
            let chunk = bytes.get(*cursor..end).ok_or(Error::Truncated {
                expected: end,
                found: bytes.len(),
            })?;
            *cursor = end;
            Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
        };
        let rank = read_u32(&mut cursor)? as usize;
        if rank == 0 {
            return Err(Error::Format("tensor rank must be positive".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut cursor)? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let expected = cursor + 4 * count;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let data: Vec<f32> = bytes[cursor..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at index {i}")));
        }
        Ok(Self { dims, data })
    }
}

impl From<&LatentGrid> for RawTensor {
    fn from(grid: &LatentGrid) -> Self {
        let (c, h, w) = grid.dims();
        Self {
            dims: vec![c, h, w],
            data: grid.data().to_vec(),
        }
    }
}

pub fn write_raw(tensor: &RawTensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = tensor.encode()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    RawTensor::decode(&fs::read(path)?)
}

pub fn write_tensor(grid: &LatentGrid, path: impl AsRef<Path>) -> Result<()> {
    write_raw(&RawTensor::from(grid), path)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<LatentGrid> {
    read_raw(path)?.into_grid()
}

/// Reads a tensor file as a frame; values outside `[0, 1]` are clamped.
pub fn read_frame_tensor(path: impl AsRef<Path>) -> Result<FrameImage> {
    FrameImage::from_grid(read_tensor(path)?)
}
