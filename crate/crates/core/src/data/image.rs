use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image, row-major, pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::BadConfig(format!(
                "image dims must be positive: {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::shape("image", &[height, width], &[pixels.len()]));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::BadConfig("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Snaps every pixel to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&v| quantize(v) as f64 / 255.0)
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// Parses a binary PGM; errors are reported as I/O errors naming `path`.
pub fn decode_pgm(path: &Path, data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| {
        Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("invalid PGM: {msg}"),
            ),
        )
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut number = || token().and_then(|t| t.parse::<usize>().ok());
    let (Some(w), Some(h), Some(maxval)) = (number(), number(), number()) else {
        return Err(bad("truncated header"));
    };
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = pos + 1;
    let need = w * h;
    if w == 0 || h == 0 || data.len() < raster + need {
        return Err(bad("truncated raster"));
    }
    if data.len() > raster + need {
        return Err(bad("trailing bytes"));
    }
    Ok((w, h, data[raster..].to_vec()))
}
