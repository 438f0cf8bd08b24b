//! Image containers and the resampling primitives shared by every stage.
//!
//! Pixels are stored as `f64` in row-major order. 8-bit content is promoted
//! on load and keeps its nominal `[0, 255]` range; pyramid residuals and
//! kernel outputs may leave that range freely.

use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel floating-point image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    /// Wraps `data`, checking its length and that every value is finite.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "plane data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("plane contains non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    /// Builds a plane by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Pixel access with replicate (clamp-to-edge) extension.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two planes of equal size.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other, "zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { height: self.height, width: self.width, data })
    }

    pub fn ensure_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{what}: dimension mismatch {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation (divides by N).
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Copies the window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if top + out_h > self.height || left + out_w > self.width {
            return Err(Error::shape(format!(
                "crop {out_h}x{out_w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(out_h * out_w);
        for r in top..top + out_h {
            data.extend_from_slice(&self.row(r)[left..left + out_w]);
        }
        Ok(Self { height: out_h, width: out_w, data })
    }

    /// Replicate-pads on the bottom and right edge up to `(out_h, out_w)`.
    pub fn pad_replicate(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h < self.height || out_w < self.width {
            return Err(Error::shape("pad target smaller than image"));
        }
        Ok(Self::from_fn(out_h, out_w, |r, c| self.get(r.min(self.height - 1), c.min(self.width - 1))))
    }

    /// Reads a PNG and returns its Y plane. Grayscale files are taken to
    /// hold Y already and are not converted.
    pub fn load_y(path: &Path, standard: LumaStandard) -> Result<Self> {
        let img = ::image::open(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        if img.color().has_color() {
            return Ok(RgbImage::from_dynamic(img)?.to_y(standard));
        }
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Self::new(h as usize, w as usize, gray.into_raw().into_iter().map(f64::from).collect())
    }

    /// Writes the plane as an 8-bit grayscale PNG (rounded, clamped).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        let buf = ::image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::io("failed to build grayscale buffer"))?;
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }
}

/// Three-channel image with interleaved RGB samples in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "rgb data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self { height, width, data }
    }

    /// Gray RGB image with R = G = B = plane value.
    pub fn from_gray(plane: &ImagePlane) -> Self {
        Self::from_fn(plane.height(), plane.width(), |r, c| {
            let v = plane.get(r, c);
            [v, v, v]
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_y(&self, standard: LumaStandard) -> ImagePlane {
        rgb_to_y_with(self, standard)
    }

    /// Loads an 8-bit PNG (gray or color); samples are promoted to `f64`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: ::image::DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(f64::from).collect();
        Self::new(h as usize, w as usize, data)
    }
}

/// Which RGB to Y conversion to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LumaStandard {
    /// ITU-R BT.601, studio swing: Y in `[16, 235]`.
    #[default]
    Bt601Studio,
    /// ITU-R BT.601, full range: `0.299 R + 0.587 G + 0.114 B`.
    Bt601Full,
}

/// BT.601 studio-swing Y: `16 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y(img: &RgbImage) -> ImagePlane {
    rgb_to_y_with(img, LumaStandard::Bt601Studio)
}

pub fn rgb_to_y_with(img: &RgbImage, standard: LumaStandard) -> ImagePlane {
    let (h, w) = img.dims();
    ImagePlane::from_fn(h, w, |r, c| {
        let [red, green, blue] = img.pixel(r, c);
        let y = match standard {
            LumaStandard::Bt601Studio => 16.0 + (65.481 * red + 128.553 * green + 24.966 * blue) / 255.0,
            LumaStandard::Bt601Full => 0.299 * red + 0.587 * green + 0.114 * blue,
        };
        y.clamp(0.0, 255.0)
    })
}

/// Centered window of size `out_h x out_w`. Odd margins put the extra
/// row/column at the bottom/right.
pub fn crop_center(img: &ImagePlane, out_h: usize, out_w: usize) -> Result<ImagePlane> {
    if out_h > img.height() || out_w > img.width() {
        return Err(Error::shape(format!(
            "center crop {out_h}x{out_w} larger than image {}x{}",
            img.height(),
            img.width()
        )));
    }
    img.crop((img.height() - out_h) / 2, (img.width() - out_w) / 2, out_h, out_w)
}

/// Bilinear sample at column `x`, row `y`; outside the image the edge
/// value is replicated.
#[inline]
pub fn sample_bilinear(img: &ImagePlane, x: f64, y: f64) -> f64 {
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let c0 = x0 as usize;
    let r0 = y0 as usize;
    let c1 = (c0 + 1).min(img.width() - 1);
    let r1 = (r0 + 1).min(img.height() - 1);
    let top = img.get(r0, c0) * (1.0 - fx) + img.get(r0, c1) * fx;
    let bottom = img.get(r1, c0) * (1.0 - fx) + img.get(r1, c1) * fx;
    top * (1.0 - fy) + bottom * fy
}
