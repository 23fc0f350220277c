use std::io::{Read, Write};
use std::path::Path;

use super::VisionError;

/// 8-bit image, interleaved channels, rows top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, VisionError> {
        if !(channels == 1 || channels == 3) {
            return Err(VisionError::Input(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(VisionError::Input(format!(
                "{width}x{height}x{channels} raster needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn blank(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copy of the `w × h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        let mut out = Raster::blank(w, h, self.channels);
        let row = w * self.channels;
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            out.data[y * row..(y + 1) * row].copy_from_slice(&self.data[src..src + row]);
        }
        out
    }

    /// Writes `other` with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, other: &Raster, x0: usize, y0: usize) {
        let row = other.width * self.channels;
        for y in 0..other.height {
            let dst = ((y0 + y) * self.width + x0) * self.channels;
            self.data[dst..dst + row].copy_from_slice(&other.data[y * row..(y + 1) * row]);
        }
    }

    /// Bilinear resample with half-pixel centers. Same-size resampling is exact.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Raster {
        if new_w == self.width && new_h == self.height {
            return self.clone();
        }
        let mut out = Raster::blank(new_w, new_h, self.channels);
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        for y in 0..new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) as f64 * (1.0 - wx) + self.get(x1, y0, c) as f64 * wx;
                    let bot = self.get(x0, y1, c) as f64 * (1.0 - wx) + self.get(x1, y1, c) as f64 * wx;
                    let v = top * (1.0 - wy) + bot * wy;
                    out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Raw planar encoding: width, height, channels as little-endian u32,
    /// then one full plane per channel.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in 0..self.channels {
            out.extend(self.data.iter().skip(c).step_by(self.channels));
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self, VisionError> {
        if bytes.len() < 12 {
            return Err(VisionError::Input("raw image shorter than its header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (w, h, c) = (word(0), word(1), word(2));
        let body = &bytes[12..];
        if body.len() != w * h * c {
            return Err(VisionError::Input(format!(
                "raw payload for {w}x{h}x{c} should be {} bytes, got {}",
                w * h * c,
                body.len()
            )));
        }
        let plane = w * h;
        let mut data = vec![0u8; plane * c];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = body[ch * plane + i];
            }
        }
        Raster::new(w, h, c, data)
    }

    pub fn write_raw(&self, path: &Path) -> Result<(), VisionError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_raw())?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self, VisionError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_raw(&bytes)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), VisionError> {
        let color = if self.channels == 1 {
            image::ColorType::L8
        } else {
            image::ColorType::Rgb8
        };
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color)
            .map_err(|e| VisionError::Input(format!("png encode {}: {e}", path.display())))
    }

    /// Loads a PNG as grayscale or RGB; alpha is dropped.
    pub fn read_png(path: &Path) -> Result<Self, VisionError> {
        let img = image::open(path).map_err(|e| VisionError::Input(format!("png decode {}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 | 2 => Raster::new(w, h, 1, img.into_luma8().into_raw()),
            _ => Raster::new(w, h, 3, img.into_rgb8().into_raw()),
        }
    }

    /// Dispatches on extension: `.png` or anything else as raw planar.
    pub fn load(path: &Path) -> Result<Self, VisionError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => Self::read_png(path),
            _ => Self::read_raw(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize, c: usize) -> Raster {
        let data = (0..w * h * c).map(|i| (i * 7 % 251) as u8).collect();
        Raster::new(w, h, c, data).unwrap()
    }

    #[test]
    fn raw_round_trip_is_planar() {
        let r = gradient(3, 2, 3);
        let bytes = r.to_raw();
        assert_eq!(&bytes[..4], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        // first plane holds channel 0 of every pixel
        assert_eq!(bytes[12], r.get(0, 0, 0));
        assert_eq!(bytes[13], r.get(1, 0, 0));
        assert_eq!(bytes[12 + 6], r.get(0, 0, 1));
        assert_eq!(Raster::from_raw(&bytes).unwrap(), r);
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let mut bytes = gradient(4, 4, 1).to_raw();
        bytes.pop();
        assert!(Raster::from_raw(&bytes).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let r = gradient(5, 7, c);
            let p = dir.path().join(format!("img{c}.png"));
            r.write_png(&p).unwrap();
            assert_eq!(Raster::load(&p).unwrap(), r);
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let r = gradient(9, 4, 3);
        assert_eq!(r.resize_bilinear(9, 4), r);
    }

    #[test]
    fn constant_image_stays_constant_under_resize() {
        let r = Raster::new(5, 3, 1, vec![77; 15]).unwrap();
        let s = r.resize_bilinear(13, 8);
        assert!(s.data.iter().all(|&v| v == 77));
    }
}
