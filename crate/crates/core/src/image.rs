//! RGB images and single-channel masks, with 8-bit PNG I/O and conversion
//! to batched NCHW tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use layergan_autograd::{Float, Tensor};

use crate::error::{Error, Result};

/// `3 x H x W` image, channel-major, values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// `H x W` map with values in `[0, 1]`. Binary masks hold exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// 8-bit code of a `[-1, 1]` intensity.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Image { height, width, data }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Image with every value snapped to its nearest 8-bit code.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| dequantize(quantize(v))).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let plane = self.height * self.width;
        let mut bytes = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                bytes.push(quantize(self.data[c * plane + i]));
            }
        }
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, bytes) = read_png(path, png::ColorType::Rgb)?;
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = dequantize(bytes[3 * i + c]);
            }
        }
        Image::from_data(h, w, data)
    }

    /// Stacks images into an `[n, 3, h, w]` tensor.
    pub fn batch<T: Float>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if !img.same_size(first) {
                return Err(Error::Invalid("images in a batch differ in size".into()));
            }
            data.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        Ok(Tensor::new(vec![images.len(), 3, first.height, first.width], data)?)
    }

    /// Extracts item `index` of an `[n, 3, h, w]` tensor.
    pub fn from_batch<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || index >= s[0] {
            return Err(Error::Invalid(format!("cannot take image {index} from tensor {s:?}")));
        }
        let len = 3 * s[2] * s[3];
        let data = t.data()[index * len..(index + 1) * len]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Image::from_data(s[2], s[3], data)
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Image::batch(&[self]).expect("single image batch")
    }
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Mask {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Invalid(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Set membership for binary masks.
    pub fn contains(&self, i: usize) -> bool {
        self.data[i] >= 0.5
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn combine(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(self.same_size(other), "mask size mismatch");
        Mask {
            height: self.height,
            width: self.width,
            data: (0..self.data.len())
                .map(|i| {
                    if f(self.contains(i), other.contains(i)) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        self.combine(other, |a, b| a && b)
    }

    pub fn minus(&self, other: &Mask) -> Mask {
        self.combine(other, |a, b| a && !b)
    }

    /// `self ⊆ other` for binary masks.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_size(other) && (0..self.data.len()).all(|i| !self.contains(i) || other.contains(i))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, bytes) = read_png(path, png::ColorType::Grayscale)?;
        Mask::from_data(h, w, bytes.into_iter().map(|b| b as f32 / 255.0).collect())
    }

    /// `[1, 1, h, w]` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("mask shape")
    }

    /// Extracts item `index` of an `[n, 1, h, w]` tensor.
    pub fn from_batch<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 || index >= s[0] {
            return Err(Error::Invalid(format!("cannot take mask {index} from tensor {s:?}")));
        }
        let len = s[2] * s[3];
        let data = t.data()[index * len..(index + 1) * len]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Mask::from_data(s[2], s[3], data)
    }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type != want {
        return Err(png_err(
            path,
            format!(
                "expected 8-bit {want:?}, found {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
