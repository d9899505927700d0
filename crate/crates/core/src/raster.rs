//! Dense raster samples: RGB images in `[0, 1]` and integer label maps.
//!
//! Images are stored channel-first (`3 × H × W`) because that is the layout
//! the network consumes.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Label value excluded from every loss and from evaluation.
pub const IGNORE: u8 = 255;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Channel-first, `CHANNELS * height * width` values.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; CHANNELS * height * width] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, rgb);
            }
        }
        img
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                CHANNELS * height * width
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let p = self.plane();
        let i = y * self.width + x;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let p = self.plane();
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[p + i] = rgb[1];
        self.data[2 * p + i] = rgb[2];
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == CHANNELS * self.plane()
            && self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Round every value to the nearest 8-bit level, so the in-memory raster
    /// matches what a PNG round trip produces.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    /// Half-open crop `[x0, x1) × [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        if x1 > self.width || y1 > self.height || x0 >= x1 || y0 >= y1 {
            return Err(Error::Shape(format!(
                "crop ({x0},{y0},{x1},{y1}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let (h, w) = (y1 - y0, x1 - x0);
        let mut out = Image::new(h, w);
        for c in 0..CHANNELS {
            for y in 0..h {
                let src = c * self.plane() + (y0 + y) * self.width + x0;
                let dst = c * h * w + y * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Bilinear resize (half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let data = crate::nn::resize::bilinear_forward(
            &self.data,
            CHANNELS,
            self.height,
            self.width,
            height,
            width,
        );
        Image { height, width, data }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let p = self.plane();
        let mut out = Vec::with_capacity(3 * p);
        for i in 0..p {
            for c in 0..CHANNELS {
                out.push(to_u8(self.data[c * p + i]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Shape("rgb8 buffer size".into()));
        }
        let mut img = Image::new(height, width);
        let p = img.plane();
        for i in 0..p {
            for c in 0..CHANNELS {
                img.data[c * p + i] = bytes[3 * i + c] as f32 / 255.0;
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, &self.to_rgb8())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let (w, h, color, bytes) = read_png(path)?;
        if color != png::ColorType::Rgb {
            return Err(Error::Dataset(format!("{}: expected 8-bit RGB", path.display())));
        }
        Image::from_rgb8(h, w, &bytes)
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, fill: u8) -> Self {
        Self { height, width, data: vec![fill; height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_valid(&self, classes: usize) -> bool {
        self.data.len() == self.height * self.width
            && self.data.iter().all(|&v| v == IGNORE || (v as usize) < classes)
    }

    /// Sorted set of non-IGNORE class ids present.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<LabelMap> {
        if x1 > self.width || y1 > self.height || x0 >= x1 || y0 >= y1 {
            return Err(Error::Shape("label crop outside map".into()));
        }
        let w = x1 - x0;
        let mut data = Vec::with_capacity((y1 - y0) * w);
        for y in y0..y1 {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x1]);
        }
        LabelMap::from_data(y1 - y0, w, data)
    }

    /// Labels sampled at the center pixel of every `stride × stride` block.
    ///
    /// With `require_pure`, blocks containing more than one label value become
    /// IGNORE.
    pub fn downsample(&self, stride: usize, require_pure: bool) -> Result<LabelMap> {
        if stride == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Shape(format!(
                "{}x{} label map not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / stride, self.width / stride);
        let mut out = LabelMap::new(gh, gw, IGNORE);
        for i in 0..gh {
            for j in 0..gw {
                let center = self.get(i * stride + stride / 2, j * stride + stride / 2);
                let pure = !require_pure
                    || (0..stride).all(|dy| {
                        (0..stride).all(|dx| self.get(i * stride + dy, j * stride + dx) == center)
                    });
                out.set(i, j, if pure { center } else { IGNORE });
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<LabelMap> {
        let (w, h, color, bytes) = read_png(path)?;
        if color != png::ColorType::Grayscale {
            return Err(Error::Dataset(format!("{}: expected 8-bit grayscale", path.display())));
        }
        LabelMap::from_data(h, w, bytes)
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Dataset(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!("{}: expected 8-bit depth", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_after_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).fract();
        }
        img.quantize();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);

        let mut lab = LabelMap::new(4, 5, 1);
        lab.set(2, 3, IGNORE);
        let q = dir.path().join("b.png");
        lab.save_png(&q).unwrap();
        assert_eq!(LabelMap::load_png(&q).unwrap(), lab);
    }

    #[test]
    fn downsample_takes_block_centers() {
        let mut lab = LabelMap::new(8, 8, 0);
        lab.set(2, 2, 3); // center of block (0, 0) at stride 4
        lab.set(0, 4, 1); // corner of block (0, 1)
        let d = lab.downsample(4, false).unwrap();
        assert_eq!(d.data, vec![3, 0, 0, 0]);
        let p = lab.downsample(4, true).unwrap();
        assert_eq!(p.data, vec![IGNORE, IGNORE, 0, 0]);
    }

    #[test]
    fn crop_copies_window() {
        let mut img = Image::new(4, 4);
        img.set(1, 2, [0.1, 0.2, 0.3]);
        let c = img.crop(2, 1, 4, 3).unwrap();
        assert_eq!((c.height, c.width), (2, 2));
        assert_eq!(c.get(0, 0), [0.1, 0.2, 0.3]);
        assert!(img.crop(0, 0, 5, 1).is_err());
    }
}
