use std::fs;
use std::path::Path;

use super::RenderError;

/// Row-major RGB image with `f64` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RenderError> {
        if data.len() != width * height * 3 {
            return Err(RenderError::ImageSize {
                expected: width * height * 3,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Channel values rounded to 8 bits, as a viewer would display them.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// The image after an 8-bit round trip.
    pub fn quantized_8bit(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.to_rgb8().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RenderError> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    /// Raw little-endian `f32` samples, row-major RGB, no header.
    pub fn save_raw_f32(&self, path: impl AsRef<Path>) -> Result<(), RenderError> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(path, bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_raw_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(3, 2);
        img.set(1, 1, [1.0, 0.5, 0.0]);
        img.save_png(dir.path().join("a.png")).unwrap();
        img.save_raw_f32(dir.path().join("a.f32")).unwrap();
        let raw = fs::read(dir.path().join("a.f32")).unwrap();
        assert_eq!(raw.len(), 3 * 2 * 3 * 4);
        let off = 4 * 3 * (3 + 1);
        assert_eq!(f32::from_le_bytes(raw[off..off + 4].try_into().unwrap()), 1.0);
        assert_eq!(img.to_rgb8()[3 * 4 + 1], 128);
    }

    #[test]
    fn size_checked() {
        assert!(Image::from_data(2, 2, vec![0.0; 11]).is_err());
    }
}
