use crate::geometry::{GrayImage, Rect};

/// Side length of the resampled patch that features are computed on.
pub const FEATURE_RES: usize = 32;
const CHANNELS: usize = 3;
pub const FEATURE_DIM: usize = CHANNELS * FEATURE_RES * FEATURE_RES;

/// Unit-norm feature vector. `z_i ⋆ z_j` is the inner product.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    values: Vec<f64>,
    low_texture: bool,
}

impl Feature {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Set when the source patch had no usable contrast and the uniform
    /// fallback vector was returned instead.
    pub fn is_low_texture(&self) -> bool {
        self.low_texture
    }

    pub fn similarity(&self, other: &Feature) -> f64 {
        dot(&self.values, &other.values)
    }

    /// Builds a feature from raw values, normalizing to unit length.
    pub fn from_values(values: Vec<f64>) -> Feature {
        normalize_or_uniform(values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_or_uniform(mut values: Vec<f64>) -> Feature {
    let norm = dot(&values, &values).sqrt();
    if norm < 1e-9 {
        let u = 1.0 / (values.len() as f64).sqrt();
        values.iter_mut().for_each(|v| *v = u);
        return Feature { values, low_texture: true };
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Feature { values, low_texture: false }
}

/// Maps an image region to a feature vector. `response_map` scores every
/// template-sized placement inside a search window; the default does it by
/// brute force through `extract`.
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, frame: &GrayImage, rect: &Rect) -> Feature;

    /// Resampled grayscale patch for a region (kept with templates for inspection).
    fn patch(&self, frame: &GrayImage, rect: &Rect) -> GrayImage;

    /// Number of placements per axis for a search window `context` times the
    /// template region.
    fn offsets_per_axis(&self, context: f64) -> usize;

    /// Similarity of each template against each placement. The result is
    /// indexed `[template][oy * n + ox]` where placement `(ox, oy)` covers
    /// `window.min + (ox, oy) * cell` with `cell = template_size / FEATURE_RES`.
    fn response_map(&self, frame: &GrayImage, window: &Rect, template_size: (f64, f64), templates: &[&Feature]) -> Vec<Vec<f64>> {
        let n = self.offsets_per_axis(window.width() / template_size.0);
        let cell = (template_size.0 / FEATURE_RES as f64, template_size.1 / FEATURE_RES as f64);
        let mut out = vec![vec![0.0; n * n]; templates.len()];
        for oy in 0..n {
            for ox in 0..n {
                let min_u = window.min_u + ox as f64 * cell.0;
                let min_v = window.min_v + oy as f64 * cell.1;
                let rect = Rect::new(min_u, min_v, min_u + template_size.0, min_v + template_size.1);
                let f = self.extract(frame, &rect);
                for (t, tmpl) in templates.iter().enumerate() {
                    out[t][oy * n + ox] = if f.low_texture { 0.0 } else { tmpl.similarity(&f) };
                }
            }
        }
        out
    }
}

/// Mean-subtracted intensity at 32×32 concatenated with mean-subtracted
/// |∂x| and |∂y| gradient magnitude maps, L2-normalized.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClassicalExtractor;

impl ClassicalExtractor {
    /// Samples `rect` on an `nx × ny` grid of `cell`-sized steps starting at its min corner.
    fn resample(frame: &GrayImage, min_u: f64, min_v: f64, cell: (f64, f64), nx: usize, ny: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            let y = min_v + (j as f64 + 0.5) * cell.1;
            for i in 0..nx {
                let x = min_u + (i as f64 + 0.5) * cell.0;
                out.push(frame.sample_bilinear(x, y) as f64);
            }
        }
        out
    }

    fn gradient_magnitudes(img: &[f64], nx: usize, ny: usize) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; nx * ny];
        let mut gy = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let l = img[j * nx + i.saturating_sub(1)];
                let r = img[j * nx + (i + 1).min(nx - 1)];
                let u = img[j.saturating_sub(1) * nx + i];
                let d = img[(j + 1).min(ny - 1) * nx + i];
                gx[j * nx + i] = (0.5 * (r - l)).abs();
                gy[j * nx + i] = (0.5 * (d - u)).abs();
            }
        }
        (gx, gy)
    }

    fn channels(frame: &GrayImage, rect: &Rect) -> [Vec<f64>; 3] {
        let cell = (rect.width() / FEATURE_RES as f64, rect.height() / FEATURE_RES as f64);
        let img = Self::resample(frame, rect.min_u, rect.min_v, cell, FEATURE_RES, FEATURE_RES);
        let (gx, gy) = Self::gradient_magnitudes(&img, FEATURE_RES, FEATURE_RES);
        [img, gx, gy]
    }
}

impl FeatureExtractor for ClassicalExtractor {
    fn extract(&self, frame: &GrayImage, rect: &Rect) -> Feature {
        let mut values = Vec::with_capacity(FEATURE_DIM);
        for ch in Self::channels(frame, rect) {
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            values.extend(ch.iter().map(|v| v - mean));
        }
        normalize_or_uniform(values)
    }

    fn patch(&self, frame: &GrayImage, rect: &Rect) -> GrayImage {
        let [img, _, _] = Self::channels(frame, rect);
        GrayImage::from_vec(FEATURE_RES, FEATURE_RES, img.into_iter().map(|v| v as f32).collect()).expect("patch size")
    }

    fn offsets_per_axis(&self, context: f64) -> usize {
        ((context * FEATURE_RES as f64).round() as usize).saturating_sub(FEATURE_RES) + 1
    }

    fn response_map(&self, frame: &GrayImage, window: &Rect, template_size: (f64, f64), templates: &[&Feature]) -> Vec<Vec<f64>> {
        let r = FEATURE_RES;
        let n = self.offsets_per_axis(window.width() / template_size.0);
        let side = n + r - 1;
        let cell = (template_size.0 / r as f64, template_size.1 / r as f64);
        let img = Self::resample(frame, window.min_u, window.min_v, cell, side, side);
        let (gx, gy) = Self::gradient_magnitudes(&img, side, side);
        let chans = [img, gx, gy];

        // Per-channel box sums of values and squares for every placement.
        let block = (r * r) as f64;
        let mut sums = vec![[0.0f64; CHANNELS]; n * n];
        let mut sq = vec![0.0f64; n * n];
        for (c, ch) in chans.iter().enumerate() {
            let integral = integral_image(ch, side);
            let integral_sq = integral_image(&ch.iter().map(|v| v * v).collect::<Vec<_>>(), side);
            for oy in 0..n {
                for ox in 0..n {
                    let s = box_sum(&integral, side, ox, oy, r);
                    let s2 = box_sum(&integral_sq, side, ox, oy, r);
                    sums[oy * n + ox][c] = s;
                    sq[oy * n + ox] += s2 - s * s / block;
                }
            }
        }

        let mut out = Vec::with_capacity(templates.len());
        for tmpl in templates {
            let tv = tmpl.values();
            let t_sums: [f64; CHANNELS] = std::array::from_fn(|c| tv[c * r * r..(c + 1) * r * r].iter().sum());
            let mut resp = vec![0.0; n * n];
            for oy in 0..n {
                for ox in 0..n {
                    let var = sq[oy * n + ox];
                    if var < 1e-12 {
                        continue;
                    }
                    let mut num = 0.0;
                    for (c, ch) in chans.iter().enumerate() {
                        let t = &tv[c * r * r..(c + 1) * r * r];
                        for row in 0..r {
                            let src = &ch[(oy + row) * side + ox..(oy + row) * side + ox + r];
                            let tr = &t[row * r..(row + 1) * r];
                            num += src.iter().zip(tr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        num -= t_sums[c] * sums[oy * n + ox][c] / block;
                    }
                    resp[oy * n + ox] = num / var.sqrt();
                }
            }
            out.push(resp);
        }
        out
    }
}

fn integral_image(v: &[f64], side: usize) -> Vec<f64> {
    let w = side + 1;
    let mut out = vec![0.0; w * w];
    for y in 0..side {
        let mut row = 0.0;
        for x in 0..side {
            row += v[y * side + x];
            out[(y + 1) * w + x + 1] = out[y * w + x + 1] + row;
        }
    }
    out
}

fn box_sum(integral: &[f64], side: usize, x: usize, y: usize, r: usize) -> f64 {
    let w = side + 1;
    integral[(y + r) * w + x + r] - integral[y * w + x + r] - integral[(y + r) * w + x] + integral[y * w + x]
}
