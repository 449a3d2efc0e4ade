use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

/// Row-major 2D raster. Pixel `(u, v)` is column `u`, row `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type DepthImage = Image<f32>;
pub type GrayImage = Image<f32>;
pub type Mask = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

impl GrayImage {
    /// Bilinear sample with clamp-to-edge addressing.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let a = *self.get(x0, y0) * (1.0 - fx) + *self.get(x1, y0) * fx;
        let b = *self.get(x0, y1) * (1.0 - fx) + *self.get(x1, y1) * fx;
        a * (1.0 - fy) + b * fy
    }

    /// Copies the pixels covered by `rect` (rounded outward to whole pixels).
    pub fn crop(&self, rect: &Rect) -> GrayImage {
        let u0 = rect.min_u.floor().max(0.0) as usize;
        let v0 = rect.min_v.floor().max(0.0) as usize;
        let u1 = (rect.max_u.ceil() as usize).min(self.width.saturating_sub(1));
        let v1 = (rect.max_v.ceil() as usize).min(self.height.saturating_sub(1));
        if u1 < u0 || v1 < v0 {
            return GrayImage::filled(0, 0, 0.0);
        }
        let w = u1 - u0 + 1;
        let h = v1 - v0 + 1;
        let mut out = Vec::with_capacity(w * h);
        for v in v0..=v1 {
            out.extend_from_slice(&self.data[v * self.width + u0..v * self.width + u1 + 1]);
        }
        GrayImage::from_vec(w, h, out).expect("crop dimensions")
    }

    /// Binary PGM (P5), intensities mapped from [0, 1] to [0, 255].
    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)
    }
}

impl DepthImage {
    /// Little-endian `u32 width`, `u32 height`, then row-major `f32` meters.
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(&(self.width as u32).to_le_bytes())?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut input: R) -> io::Result<Self> {
        let mut header = [0u8; 8];
        input.read_exact(&mut header)?;
        let width = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "depth image too large"))?;
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { width, height, data })
    }
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_u: f64,
    pub min_v: f64,
    pub max_u: f64,
    pub max_v: f64,
}

impl Rect {
    pub fn new(min_u: f64, min_v: f64, max_u: f64, max_v: f64) -> Self {
        Self { min_u, min_v, max_u, max_v }
    }

    pub fn from_center(cu: f64, cv: f64, width: f64, height: f64) -> Self {
        Self::new(cu - width / 2.0, cv - height / 2.0, cu + width / 2.0, cv + height / 2.0)
    }

    pub fn width(&self) -> f64 {
        (self.max_u - self.min_u).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.max_v - self.min_v).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.min_u + self.max_u) / 2.0, (self.min_v + self.max_v) / 2.0)
    }

    pub fn scaled(&self, factor: f64) -> Rect {
        let (cu, cv) = self.center();
        Rect::from_center(cu, cv, self.width() * factor, self.height() * factor)
    }

    pub fn translated(&self, du: f64, dv: f64) -> Rect {
        Rect::new(self.min_u + du, self.min_v + dv, self.max_u + du, self.max_v + dv)
    }

    /// Intersection with `[0, width-1] × [0, height-1]`.
    pub fn clamped(&self, width: usize, height: usize) -> Rect {
        let w = (width.max(1) - 1) as f64;
        let h = (height.max(1) - 1) as f64;
        let min_u = self.min_u.clamp(0.0, w);
        let min_v = self.min_v.clamp(0.0, h);
        Rect::new(min_u, min_v, self.max_u.clamp(min_u, w), self.max_v.clamp(min_v, h))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.min_u && u <= self.max_u && v >= self.min_v && v <= self.max_v
    }

    pub fn is_finite(&self) -> bool {
        [self.min_u, self.min_v, self.max_u, self.max_v].iter().all(|v| v.is_finite())
    }

    /// Integer pixel ranges covered by the rectangle within an image.
    pub fn pixel_range(&self, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let u0 = self.min_u.ceil().max(0.0) as usize;
        let v0 = self.min_v.ceil().max(0.0) as usize;
        let u1 = ((self.max_u.floor() + 1.0).max(0.0) as usize).min(width);
        let v1 = ((self.max_v.floor() + 1.0).max(0.0) as usize).min(height);
        (u0..u1.max(u0), v0..v1.max(v0))
    }
}
