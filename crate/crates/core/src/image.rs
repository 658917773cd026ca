//! Plain (ASCII) PGM/PPM images with pixels normalized to `[0, 1]`.

use std::path::Path;

use crate::error::{GridError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Row-major, channels interleaved.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(GridError::Config(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(GridError::Config(format!(
                "{} pixel values for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, channels, pixels })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, pixels: vec![value; width * height * channels] }
    }

    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + ch]
    }

    pub fn set(&mut self, x: usize, y: usize, ch: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + ch] = v;
    }

    /// `P2` (grayscale) or `P3` (color), maxval 255, values rounded and clamped.
    pub fn to_pnm(&self) -> String {
        self.to_pnm_with_comment(None)
    }

    pub fn to_pnm_with_comment(&self, comment: Option<&str>) -> String {
        let magic = if self.channels == 1 { "P2" } else { "P3" };
        let mut out = format!("{magic}\n");
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&format!("{} {}\n255\n", self.width, self.height));
        for row in self.pixels.chunks(self.width * self.channels) {
            let vals: Vec<String> = row.iter().map(|v| to_byte(*v).to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    /// Reads plain (`P2`/`P3`) or raw (`P5`/`P6`) netpbm bytes.
    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut header = Vec::with_capacity(4);
        while header.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(GridError::Format("truncated netpbm header".into()));
            }
            header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| GridError::Format(format!("bad header field {s:?}")));
        let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(GridError::Format(format!("unsupported maxval {maxval}")));
        }
        let (channels, raw) = match header[0].as_str() {
            "P2" => (1, false),
            "P3" => (3, false),
            "P5" => (1, true),
            "P6" => (3, true),
            m => return Err(GridError::Format(format!("unsupported netpbm magic {m:?}"))),
        };
        let count = w * h * channels;
        let values: Vec<usize> = if raw {
            let data = bytes.get(pos + 1..pos + 1 + count).ok_or_else(|| GridError::Format("truncated raster".into()))?;
            data.iter().map(|&b| b as usize).collect()
        } else {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            text.split_whitespace().take(count).map(num).collect::<Result<_>>()?
        };
        if values.len() != count {
            return Err(GridError::Format("truncated raster".into()));
        }
        Image::new(w, h, channels, values.iter().map(|&v| v as f64 / maxval as f64).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pnm())?;
        Ok(())
    }

    pub fn save_with_comment(&self, path: &Path, comment: &str) -> Result<()> {
        std::fs::write(path, self.to_pnm_with_comment(Some(comment)))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pnm(&std::fs::read(path)?)
    }
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale map with linear `[min, max] -> [0, 1]` scaling; constant maps become all white.
pub fn scaled_map(width: usize, height: usize, values: &[f64]) -> Result<Image> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo { values.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![1.0; values.len()] };
    Image::new(width, height, 1, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_round_trip() {
        let img = Image::new(2, 1, 3, vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let text = img.to_pnm();
        assert_eq!(text, "P3\n2 1\n255\n0 255 51 102 153 204\n");
        let back = Image::from_pnm(text.as_bytes()).unwrap();
        assert_eq!(back.to_pnm(), text);
    }

    #[test]
    fn raw_gray() {
        let mut bytes = b"P5\n# c\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let img = Image::from_pnm(&bytes).unwrap();
        assert_eq!(img.channels, 1);
        assert_eq!(img.get(1, 0, 0), 1.0);
        assert_eq!(to_byte(img.get(0, 1, 0)), 128);
    }

    #[test]
    fn constant_map_is_white() {
        let m = scaled_map(2, 2, &[0.3; 4]).unwrap();
        assert!(m.pixels.iter().all(|&p| p == 1.0));
    }
}
